//! Finite-difference check of every training loss on a toy problem.

use rand::Rng;
use serde::Serialize;
use wst_autograd::{finite_difference_check_with, Matrix, ParamStore, Stencil, Trace, Var};

use crate::classifier::{ClassifierConfig, TextCnn};
use crate::error::{CoreError, Result};
use crate::lm::{Direction, DirectionalLm, LmConfig, LmPair};
use crate::lrp::LrpConfig;
use crate::seed::rng_for;
use crate::seq2seq::{ModelConfig, Seq2Seq};
use crate::text::batch::Batch;
use crate::training::{stage1_loss, stage2_loss, step_noise, Stage2Config, Stage2Context};

/// Parameter groups of the sequence model, by name prefix.
pub const GROUPS: [&str; 9] = [
    "s2s.emb",
    "s2s.enc",
    "s2s.dec",
    "s2s.att",
    "s2s.out",
    "lambda.",
    "style.emb",
    "style.w1",
    "style.w2",
];

pub const LOSSES: [&str; 7] = ["L_sr", "L_xl", "L_st", "L_yl", "L_cp", "L_lm", "L2"];

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Worst error per group in [`GROUPS`] order.
    pub groups: Vec<(String, f64)>,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Two sentences over a four-word vocabulary, hidden size 8, with every
/// frozen module randomly initialized and the style output layer made
/// nonzero so that the whole style component is exercised.
pub struct Toy {
    pub model: Seq2Seq,
    pub ctx: Stage2Context,
    pub src: Vec<Vec<usize>>,
    pub lambda_x: Vec<Vec<f64>>,
    pub noise: Vec<Matrix>,
    pub cfg: Stage2Config,
}

pub const TOY_VOCAB: usize = 8;

pub fn toy(seed: u64) -> Result<Toy> {
    let v = TOY_VOCAB;
    let mcfg = ModelConfig {
        embed_dim: 8,
        hidden: 8,
        attn_dim: 8,
        style_dim: 4,
        style_hidden: 8,
    };
    let mut model = Seq2Seq::new(v, &mcfg, &mut rng_for(seed, "toy/model"));
    let mut rng = rng_for(seed, "toy/style-out");
    for id in [model.style_w2, model.style_b2] {
        for x in model.store.value_mut(id).data.iter_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    let ccfg = ClassifierConfig {
        embed_dim: 6,
        filters: 3,
        widths: vec![2, 3],
        ..Default::default()
    };
    let classifier = TextCnn::new(v, &ccfg, &mut rng_for(seed, "toy/classifier"));
    let lcfg = LmConfig {
        embed_dim: 6,
        hidden: 6,
        seed,
        ..Default::default()
    };
    let lms = (0..2u8)
        .map(|s| LmPair {
            forward: DirectionalLm::new(v, s, Direction::Forward, &lcfg),
            backward: DirectionalLm::new(v, s, Direction::Backward, &lcfg),
        })
        .collect();
    // A small threshold keeps soft relevance away from its kink.
    let lrp = LrpConfig {
        eta: 3.0,
        epsilon: 1e-3,
        ..Default::default()
    };
    let ctx = Stage2Context::new(classifier, lms, lrp)?;
    let src = vec![vec![4, 5, 6, 7], vec![7, 4, 6]];
    let lambda_x = vec![vec![0.1, 0.7, 0.0, 0.4], vec![0.9, 0.0, 0.3]];
    let cfg = Stage2Config {
        max_len: 5,
        ..Default::default()
    };
    let noise = step_noise(seed, 0, src.len(), v, cfg.max_len);
    Ok(Toy {
        model,
        ctx,
        src,
        lambda_x,
        noise,
        cfg,
    })
}

fn pick(loss: &str, toy: &Toy, model: &Seq2Seq, t: &mut Trace) -> Result<Var> {
    let missing = || CoreError::Invalid(format!("{loss} was not built"));
    match loss {
        "L_sr" | "L_xl" => {
            let refs: Vec<&[usize]> = toy.src.iter().map(Vec::as_slice).collect();
            let batch = Batch::new(&refs, &[0, 0], 16)?;
            let targets: Vec<&[f64]> = toy.lambda_x.iter().map(Vec::as_slice).collect();
            let terms = stage1_loss(model, t, &batch, &batch.src, &targets, true)?;
            Ok(if loss == "L_sr" { terms.sr } else { terms.xl })
        }
        _ => {
            let lx: Vec<&[f64]> = toy.lambda_x.iter().map(Vec::as_slice).collect();
            let terms = stage2_loss(model, &toy.ctx, t, &toy.src, &lx, 0, &toy.cfg, 0.5, Some(&toy.noise))?;
            if terms.skipped > 0 {
                return Err(CoreError::Invalid("toy soft sentence came out empty".into()));
            }
            match loss {
                "L_st" => terms.st.ok_or_else(missing),
                "L_yl" => terms.yl.ok_or_else(missing),
                "L_cp" => terms.cp.ok_or_else(missing),
                "L_lm" => terms.lm.ok_or_else(missing),
                "L2" => terms.total.ok_or_else(missing),
                _ => Err(CoreError::Invalid(format!("unknown loss {loss}"))),
            }
        }
    }
}

/// Checks `loss` (one of [`LOSSES`]) against finite differences.
pub fn check_loss(
    toy: &mut Toy,
    loss: &str,
    step: f64,
    stencil: Stencil,
    per_param_limit: Option<usize>,
) -> Result<LossCheck> {
    let mut store = std::mem::replace(&mut toy.model.store, ParamStore::new());
    let mut view = toy.model.clone();
    let toy_ref: &Toy = toy;
    let report = finite_difference_check_with(&mut store, step, stencil, per_param_limit, |s, t| {
        view.store = s.alias();
        pick(loss, toy_ref, &view, t).map_err(|e| wst_autograd::TensorError::InvalidArgument {
            op: "loss",
            detail: e.to_string(),
        })
    });
    toy.model.store = store;
    let report = report?;
    Ok(LossCheck {
        loss: loss.to_string(),
        max_relative_error: report.max_relative_error,
        coordinates: report.coordinates_checked,
        groups: GROUPS.iter().map(|g| (g.to_string(), report.group_max(g))).collect(),
        worst: report.worst,
    })
}

/// Every loss in [`LOSSES`].
pub fn run_suite(seed: u64, step: f64, stencil: Stencil, per_param_limit: Option<usize>) -> Result<Vec<LossCheck>> {
    let mut toy = toy(seed)?;
    LOSSES
        .iter()
        .map(|l| check_loss(&mut toy, l, step, stencil, per_param_limit))
        .collect()
}
