use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::TextCnn;
use crate::error::{CoreError, Result};
use crate::eval::{bleu, transfer_accuracy, MetricReport, Smoothing};
use crate::seed::rng_for;
use crate::seq2seq::{greedy, Gate, Mode, ModelConfig, Seq2Seq};
use crate::text::corpus::LabeledCorpus;
use crate::training::stage1::{train_stage1, RelevanceCache, Stage1Config, Stage1Report};
use crate::training::stage2::{train_stage2, Stage2Config, Stage2Context, Stage2Report, Switches};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoNsc,
    NscLambda,
    NoLxl,
    LcpPrime,
    NoLyl,
    NoLlm,
    FinetuningMinus,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoNsc,
        Variant::NscLambda,
        Variant::NoLxl,
        Variant::LcpPrime,
        Variant::NoLyl,
        Variant::NoLlm,
        Variant::FinetuningMinus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNsc => "-NSC",
            Variant::NscLambda => "NSC-lambda",
            Variant::NoLxl => "-Lxl",
            Variant::LcpPrime => "Lcp-prime",
            Variant::NoLyl => "-Lyl",
            Variant::NoLlm => "-Llm",
            Variant::FinetuningMinus => "Finetuning-",
        }
    }

    pub fn switches(self) -> Switches {
        let mut s = Switches::default();
        match self {
            Variant::Full => {}
            Variant::NoNsc => s.nsc_off = true,
            Variant::NscLambda => s.gate_off = true,
            Variant::NoLxl => s.lxl_off = true,
            Variant::LcpPrime => s.lcp_prime = true,
            Variant::NoLyl => s.lyl_off = true,
            Variant::NoLlm => s.llm_off = true,
            Variant::FinetuningMinus => s.freeze_stage1 = true,
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    /// Accepts the display names case-insensitively, with `−` or `-`, and
    /// the switch names (`nsc-off`, `gate-off`, ...).
    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().replace('−', "-").to_ascii_lowercase().replace('_', "-");
        let v = match k.as_str() {
            "full" => Variant::Full,
            "-nsc" | "nsc-off" => Variant::NoNsc,
            "nsc-lambda" | "nsc-lambda-y" | "gate-off" => Variant::NscLambda,
            "-lxl" | "-lxlambda" | "lxl-off" => Variant::NoLxl,
            "lcp-prime" | "lcp'" => Variant::LcpPrime,
            "-lyl" | "-lylambda" | "lyl-off" => Variant::NoLyl,
            "-llm" | "llm-off" => Variant::NoLlm,
            "finetuning-" | "freeze-stage1" => Variant::FinetuningMinus,
            _ => return Err(CoreError::UnknownVariant(s.to_string())),
        };
        Ok(v)
    }
}

/// Shared inputs of an ablation sweep. `base` is the Stage-1 model trained
/// with the default Stage-1 settings; only `-Lxl` retrains Stage 1.
pub struct AblationSetup<'a> {
    pub model_cfg: &'a ModelConfig,
    pub stage1: &'a Stage1Config,
    pub stage2: &'a Stage2Config,
    pub train: &'a LabeledCorpus,
    pub cache: &'a RelevanceCache,
    pub base: &'a Seq2Seq,
    pub test: &'a LabeledCorpus,
    /// Per test sentence.
    pub references: &'a [Vec<Vec<usize>>],
    pub smoothing: Smoothing,
}

pub struct AblationOutcome {
    pub variant: Variant,
    pub model: Seq2Seq,
    pub metrics: MetricReport,
    pub outputs: Vec<Vec<usize>>,
    pub stage1: Option<Stage1Report>,
    pub stage2: Stage2Report,
}

/// Greedy transfer of every test sentence toward the opposite style,
/// scored against `references`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_transfer(
    model: &Seq2Seq,
    classifier: &TextCnn,
    test: &LabeledCorpus,
    references: &[Vec<Vec<usize>>],
    mode: Mode,
    gate: Gate,
    max_len: usize,
    smoothing: Smoothing,
) -> Result<(MetricReport, Vec<Vec<usize>>)> {
    if test.is_empty() {
        return Err(CoreError::EmptyCorpus("transfer test set".into()));
    }
    let mut outputs = Vec::with_capacity(test.len());
    let targets: Vec<u8> = test.labels.iter().map(|l| 1 - l).collect();
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(64) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|&i| test.sentences[i].clone()).collect();
        let styles: Vec<usize> = chunk.iter().map(|&i| targets[i] as usize).collect();
        outputs.extend(greedy(model, &src, &styles, mode, gate, max_len)?.tokens);
    }
    let acc = transfer_accuracy(classifier, &outputs, &targets)?;
    let b = bleu(&outputs, references, smoothing)?;
    Ok((MetricReport::new(acc, b, outputs.len(), smoothing)?, outputs))
}

/// Trains (as needed) and evaluates one ablation variant.
pub fn run_ablation(variant: Variant, setup: &AblationSetup, ctx: &mut Stage2Context) -> Result<AblationOutcome> {
    let switches = variant.switches();
    let mut stage1 = None;
    let mut model = if switches.lxl_off {
        let mut rng = rng_for(setup.stage1.seed, "stage1/init");
        let mut m = Seq2Seq::new(setup.base.vocab_size, setup.model_cfg, &mut rng);
        let cfg = Stage1Config {
            without_relevance_loss: true,
            ..setup.stage1.clone()
        };
        stage1 = Some(train_stage1(&mut m, setup.train, setup.cache, &cfg)?);
        m
    } else {
        setup.base.clone()
    };
    let cfg = Stage2Config {
        switches,
        ..setup.stage2.clone()
    };
    let stage2 = train_stage2(&mut model, ctx, setup.train, setup.cache, &cfg)?;
    let mode = if switches.nsc_off { Mode::Basic } else { Mode::Styled };
    let (metrics, outputs) = evaluate_transfer(
        &model,
        &ctx.classifier,
        setup.test,
        setup.references,
        mode,
        cfg.gate(),
        cfg.max_len,
        setup.smoothing,
    )?;
    Ok(AblationOutcome {
        variant,
        model,
        metrics,
        outputs,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("NSC−lambda".parse::<Variant>().unwrap(), Variant::NscLambda);
        assert_eq!("gate_off".parse::<Variant>().unwrap(), Variant::NscLambda);
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(matches!("-everything".parse::<Variant>(), Err(CoreError::UnknownVariant(_))));
    }

    #[test]
    fn each_variant_sets_one_switch() {
        for v in Variant::ALL {
            let s = v.switches();
            let n = [s.nsc_off, s.gate_off, s.lxl_off, s.lcp_prime, s.lyl_off, s.llm_off, s.freeze_stage1]
                .iter()
                .filter(|b| **b)
                .count();
            assert_eq!(n, usize::from(v != Variant::Full), "{v}");
        }
    }
}
