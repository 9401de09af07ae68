use serde::{Deserialize, Serialize};
use wst_autograd::{Matrix, OptimizerState, Trace, UpdateRule, Var};

use crate::classifier::TextCnn;
use crate::error::{CoreError, Result};
use crate::lm::{fluency_loss, LmPair};
use crate::lrp::{relevance_from_forward, LrpConfig};
use crate::seed::{derive_seed, rng_for};
use crate::seq2seq::{gumbel_noise, pad_batch, sentence_rows, soft_decode, Gate, Mode, Seq2Seq};
use crate::text::batch::shuffled_order;
use crate::text::corpus::{LabeledCorpus, Style};
use crate::training::log::{LogRow, TrainLog};
use crate::training::stage1::{sum_all, RelevanceCache};
use crate::training::LossBreakdown;

/// Ablation switches for Stage 2 (and `lxl_off` for Stage 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    /// No Stage 2 at all.
    pub nsc_off: bool,
    /// Gate fixed at 1 in the hidden-state revision.
    pub gate_off: bool,
    pub lxl_off: bool,
    /// Unweighted embedding sums in the content term.
    pub lcp_prime: bool,
    pub lyl_off: bool,
    pub llm_off: bool,
    /// Only the style component trains.
    pub freeze_stage1: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub optimizer: String,
    pub tau_start: f64,
    pub tau_end: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub max_len: usize,
    /// +1 uses the cross-entropy form of the fluency term.
    pub lm_sign: f64,
    pub patience: usize,
    pub held_out: f64,
    pub seed: u64,
    pub switches: Switches,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            alpha: 1.0,
            beta: 2.0,
            gamma: 0.5,
            learning_rate: 1e-5,
            clip_norm: 1e-2,
            optimizer: "sgd".into(),
            tau_start: 0.5,
            tau_end: 0.1,
            epochs: 3,
            max_steps: None,
            batch_size: 32,
            max_len: 16,
            lm_sign: 1.0,
            patience: 3,
            held_out: 0.05,
            seed: 0,
            switches: Switches::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(CoreError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(CoreError::Config("gumbel temperatures must be positive".into()));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(CoreError::Config("stage2 batch_size and max_len must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(CoreError::Config("stage2 learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Weights actually applied after the ablation switches.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        let s = &self.switches;
        (
            if s.lyl_off { 0.0 } else { self.alpha },
            self.beta,
            if s.llm_off { 0.0 } else { self.gamma },
        )
    }

    pub fn gate(&self) -> Gate {
        if self.switches.gate_off {
            Gate::Fixed(1.0)
        } else {
            Gate::Predicted
        }
    }

    /// Linear anneal from `tau_start` at step 0 to `tau_end` at `total - 1`.
    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.tau_start;
        }
        let f = (step.min(total - 1)) as f64 / (total - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * f
    }
}

/// Frozen modules Stage 2 trains against.
#[derive(Clone, Debug)]
pub struct Stage2Context {
    pub classifier: TextCnn,
    /// Indexed by style.
    pub lms: Vec<LmPair>,
    pub lrp: LrpConfig,
}

impl Stage2Context {
    /// Freezes the classifier and every LM.
    pub fn new(mut classifier: TextCnn, mut lms: Vec<LmPair>, lrp: LrpConfig) -> Result<Self> {
        lrp.validate()?;
        if lms.len() != 2 || lms.iter().enumerate().any(|(s, p)| p.style() as usize != s) {
            return Err(CoreError::Mismatch("need one language model pair per style, in style order".into()));
        }
        classifier.store.freeze();
        for p in &mut lms {
            p.freeze();
        }
        Ok(Stage2Context { classifier, lms, lrp })
    }

    pub fn frozen_grads_zero(&self) -> bool {
        self.classifier.store.grads_all_zero()
            && self
                .lms
                .iter()
                .all(|p| p.forward.store.grads_all_zero() && p.backward.store.grads_all_zero())
    }
}

/// Loss nodes of one Stage-2 batch. Terms with zero effective weight are
/// not built and report 0.
#[derive(Clone, Debug)]
pub struct Stage2Terms {
    pub breakdown: LossBreakdown,
    pub total: Option<Var>,
    pub st: Option<Var>,
    pub yl: Option<Var>,
    pub cp: Option<Var>,
    pub lm: Option<Var>,
    /// Realized soft-sentence lengths.
    pub lengths: Vec<usize>,
    pub skipped: usize,
    /// Smallest and largest gate value over realized steps.
    pub gate_range: (f64, f64),
}

/// Builds the Stage-2 objective for sentences `src` of style `source`,
/// transferred toward `1 - source`. `lambda_x[b]` holds the relevance of
/// `src[b]` toward its own style.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    model: &Seq2Seq,
    ctx: &Stage2Context,
    t: &mut Trace,
    src: &[Vec<usize>],
    lambda_x: &[&[f64]],
    source: Style,
    cfg: &Stage2Config,
    tau: f64,
    noise: Option<&[Matrix]>,
) -> Result<Stage2Terms> {
    if source > 1 {
        return Err(CoreError::UnknownStyle(source as usize));
    }
    if lambda_x.len() != src.len() {
        return Err(CoreError::CountMismatch {
            what: "source relevance rows",
            expected: src.len(),
            got: lambda_x.len(),
        });
    }
    let target = 1 - source as usize;
    let (alpha, beta, gamma) = cfg.effective_weights();
    let (rows, lens) = pad_batch(src)?;
    let b = rows.len();
    let enc = model.encode(t, &rows, &lens)?;
    let styles = vec![target; b];
    let sb = soft_decode(model, t, &enc, &styles, Mode::Styled, cfg.gate(), cfg.max_len, tau, noise)?;
    let valid: Vec<usize> = (0..b).filter(|&i| sb.lengths[i] > 0).collect();
    let skipped = b - valid.len();
    let mut gate_range = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &valid {
        for g in &sb.gates[..sb.lengths[i]] {
            let v = t.value(*g).data[i];
            gate_range = (gate_range.0.min(v), gate_range.1.max(v));
        }
    }
    let mut out = Stage2Terms {
        breakdown: LossBreakdown::default(),
        total: None,
        st: None,
        yl: None,
        cp: None,
        lm: None,
        lengths: sb.lengths.clone(),
        skipped,
        gate_range,
    };
    if valid.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / valid.len() as f64;
    let emb = t.param(&model.store, model.emb);
    let (mut st, mut yl, mut cp) = (Vec::new(), Vec::new(), Vec::new());
    for &i in &valid {
        let len = sb.lengths[i];
        let y = sentence_rows(t, &sb.rows, i, len)?;
        let fwd = ctx.classifier.forward_soft(t, y)?;
        st.push(t.cross_entropy(fwd.logits, &[target], &[inv])?);
        let lam_y = sentence_rows(t, &sb.lambdas, i, len)?;
        if alpha > 0.0 {
            let lam_hat = relevance_from_forward(t, &ctx.classifier, &fwd, target, &ctx.lrp)?;
            let se = t.squared_error(lam_y, lam_hat)?;
            yl.push(t.scale(se, inv / len as f64));
        }
        if beta > 0.0 {
            let x = &src[i];
            if lambda_x[i].len() < x.len() {
                return Err(CoreError::CountMismatch {
                    what: "source relevance values",
                    expected: x.len(),
                    got: lambda_x[i].len(),
                });
            }
            let xe = t.gather_rows(emb, x)?;
            let ye = t.matmul(y, emb)?;
            let (xs, ys) = if cfg.switches.lcp_prime {
                (t.col_sums(xe), t.col_sums(ye))
            } else {
                let wx: Vec<f64> = lambda_x[i][..x.len()].iter().map(|l| 1.0 - l.abs()).collect();
                let wx = t.constant(Matrix::column_vector(wx));
                let xw = t.mul_col(xe, wx)?;
                let a = t.abs(lam_y);
                let wy = t.rsub_scalar(1.0, a);
                let yw = t.mul_col(ye, wy)?;
                (t.col_sums(xw), t.col_sums(yw))
            };
            let se = t.squared_error(xs, ys)?;
            cp.push(t.scale(se, inv));
        }
    }
    let st = sum_all(t, &st)?;
    let mut total = st;
    out.st = Some(st);
    out.breakdown.l_st = t.scalar(st);
    if !yl.is_empty() {
        let v = sum_all(t, &yl)?;
        out.yl = Some(v);
        out.breakdown.l_yl = t.scalar(v);
        let w = t.scale(v, alpha);
        total = t.add(total, w)?;
    }
    if !cp.is_empty() {
        let v = sum_all(t, &cp)?;
        out.cp = Some(v);
        out.breakdown.l_cp = t.scalar(v);
        let w = t.scale(v, beta);
        total = t.add(total, w)?;
    }
    if gamma > 0.0 {
        let probs: Vec<Var> = sb.logits.iter().map(|&l| t.softmax(l)).collect();
        let (f, _, _) = fluency_loss(&ctx.lms[target], t, &sb.rows, &probs, &sb.lengths, target as Style, cfg.lm_sign)?;
        let v = t.scale(f, inv);
        out.lm = Some(v);
        out.breakdown.l_lm = t.scalar(v);
        let w = t.scale(v, gamma);
        total = t.add(total, w)?;
    }
    out.breakdown.total = t.scalar(total);
    out.total = Some(total);
    Ok(out)
}

/// Outcome of one Stage-2 update.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Stage2Step {
    pub loss: LossBreakdown,
    pub skipped: usize,
    pub mean_length: f64,
    pub gate_min: f64,
    pub gate_max: f64,
    pub grad_norm: f64,
    pub tau: f64,
}

/// Gumbel draws for every step of one batch.
pub fn step_noise(seed: u64, step: usize, batch: usize, vocab: usize, max_len: usize) -> Vec<Matrix> {
    let mut rng = rng_for(seed, &format!("stage2/noise/{step}"));
    (0..max_len).map(|_| gumbel_noise(&mut rng, batch, vocab)).collect()
}

fn truncated(corpus: &LabeledCorpus, idx: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let s = &corpus.sentences[i];
            s[..s.len().min(max_len)].to_vec()
        })
        .collect()
}

/// One update on sentences `idx`, all of style `source`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    model: &mut Seq2Seq,
    opt: &mut OptimizerState,
    ctx: &mut Stage2Context,
    corpus: &LabeledCorpus,
    cache: &RelevanceCache,
    idx: &[usize],
    source: Style,
    cfg: &Stage2Config,
    step: usize,
    tau: f64,
) -> Result<Stage2Step> {
    if let Some(&i) = idx.iter().find(|&&i| corpus.labels[i] != source) {
        return Err(CoreError::Mismatch(format!("sentence {i} is not of source style {source}")));
    }
    let src = truncated(corpus, idx, cfg.max_len);
    let lx: Vec<&[f64]> = idx.iter().map(|&i| cache.lambda[i].as_slice()).collect();
    let noise = step_noise(cfg.seed, step, idx.len(), model.vocab_size, cfg.max_len);
    let mut t = Trace::new();
    let terms = stage2_loss(model, ctx, &mut t, &src, &lx, source, cfg, tau, Some(&noise))?;
    let mut rep = Stage2Step {
        loss: terms.breakdown,
        skipped: terms.skipped,
        mean_length: terms.lengths.iter().sum::<usize>() as f64 / terms.lengths.len() as f64,
        gate_min: terms.gate_range.0,
        gate_max: terms.gate_range.1,
        grad_norm: 0.0,
        tau,
    };
    let Some(total) = terms.total else {
        return Ok(rep);
    };
    if !terms.breakdown.total.is_finite() {
        return Err(CoreError::NonFinite("stage2 loss".into()));
    }
    {
        let Stage2Context { classifier, lms, .. } = ctx;
        let [a, b] = lms.as_mut_slice() else { unreachable!("two styles") };
        t.backward_into(
            total,
            &mut [
                &mut model.store,
                &mut classifier.store,
                &mut a.forward.store,
                &mut a.backward.store,
                &mut b.forward.store,
                &mut b.backward.store,
            ],
        )?;
    }
    rep.grad_norm = opt.step(&mut model.store).grad_norm;
    Ok(rep)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Stage2Report {
    pub steps: usize,
    pub epochs_run: usize,
    pub skipped_sentences: usize,
    pub held_out_loss: Vec<f64>,
    pub step_info: Vec<Stage2Step>,
    #[serde(skip)]
    pub log: TrainLog,
}

/// Batches of one epoch as `(source style, sentence indices)`, alternating
/// styles while both have batches left.
pub fn epoch_batches(pools: &[Vec<usize>; 2], batch_size: usize, seed: u64, epoch: usize) -> Vec<(Style, Vec<usize>)> {
    let chunks: Vec<Vec<Vec<usize>>> = (0..2)
        .map(|s| {
            let perm = shuffled_order(pools[s].len(), derive_seed(seed, &format!("stage2/batches/{s}")), epoch);
            perm.chunks(batch_size)
                .map(|c| c.iter().map(|&k| pools[s][k]).collect())
                .collect()
        })
        .collect();
    let n = chunks[0].len().max(chunks[1].len());
    let mut out = Vec::new();
    for k in 0..n {
        for s in 0..2 {
            if let Some(c) = chunks[s].get(k) {
                out.push((s as Style, c.clone()));
            }
        }
    }
    out
}

fn held_out_loss(model: &Seq2Seq, ctx: &Stage2Context, corpus: &LabeledCorpus, cache: &RelevanceCache, pools: &[Vec<usize>; 2], cfg: &Stage2Config) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0);
    for (k, (s, idx)) in epoch_batches(pools, cfg.batch_size, cfg.seed, 0).into_iter().enumerate() {
        let src = truncated(corpus, &idx, cfg.max_len);
        let lx: Vec<&[f64]> = idx.iter().map(|&i| cache.lambda[i].as_slice()).collect();
        let noise = step_noise(cfg.seed ^ 0x9e37_79b9, k, idx.len(), model.vocab_size, cfg.max_len);
        let mut t = Trace::new();
        let terms = stage2_loss(model, ctx, &mut t, &src, &lx, s, cfg, cfg.tau_end, Some(&noise))?;
        if terms.total.is_some() {
            sum += terms.breakdown.total;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::INFINITY } else { sum / n as f64 })
}

/// Fine-tunes a Stage-1 model in styled mode. The best held-out parameters
/// are kept when a held-out split exists.
pub fn train_stage2(
    model: &mut Seq2Seq,
    ctx: &mut Stage2Context,
    corpus: &LabeledCorpus,
    cache: &RelevanceCache,
    cfg: &Stage2Config,
) -> Result<Stage2Report> {
    cfg.validate()?;
    corpus.require_both_labels()?;
    if cache.lambda.len() != corpus.len() {
        return Err(CoreError::CountMismatch {
            what: "relevance targets",
            expected: corpus.len(),
            got: cache.lambda.len(),
        });
    }
    let mut report = Stage2Report::default();
    if cfg.switches.nsc_off {
        return Ok(report);
    }
    let rule = UpdateRule::parse(&cfg.optimizer)
        .ok_or_else(|| CoreError::Config(format!("unknown optimizer `{}`", cfg.optimizer)))?;
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.clip_norm, rule)?;
    if cfg.switches.freeze_stage1 {
        model.store.set_all_trainable(false);
        model.store.set_trainable_prefix("style.", true);
    } else {
        model.store.set_all_trainable(true);
    }

    let order = shuffled_order(corpus.len(), derive_seed(cfg.seed, "stage2/split"), 0);
    let n_held = ((corpus.len() as f64) * cfg.held_out) as usize;
    let (held, train) = order.split_at(n_held);
    let pool = |ids: &[usize]| -> [Vec<usize>; 2] {
        let mut p = [Vec::new(), Vec::new()];
        for &i in ids {
            if !corpus.sentences[i].is_empty() {
                p[corpus.labels[i] as usize].push(i);
            }
        }
        p
    };
    let train_pools = pool(train);
    let held_pools = pool(held);
    let per_epoch = epoch_batches(&train_pools, cfg.batch_size, cfg.seed, 0).len();
    let planned = (per_epoch * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));

    let use_held = !held_pools[0].is_empty() && !held_pools[1].is_empty();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut stale = 0;
    'outer: for epoch in 0..cfg.epochs {
        for (s, idx) in epoch_batches(&train_pools, cfg.batch_size, cfg.seed, epoch) {
            if report.steps >= planned {
                break 'outer;
            }
            let tau = cfg.tau_at(report.steps, planned);
            let r = stage2_step(model, &mut opt, ctx, corpus, cache, &idx, s, cfg, report.steps, tau)?;
            report.log.push(LogRow::new(report.steps, &r.loss, r.grad_norm));
            report.skipped_sentences += r.skipped;
            report.step_info.push(r);
            report.steps += 1;
        }
        report.epochs_run = epoch + 1;
        if use_held {
            let h = held_out_loss(model, ctx, corpus, cache, &held_pools, cfg)?;
            report.held_out_loss.push(h);
            if h < best.0 {
                best = (h, model.store.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if use_held && best.0 < report.held_out_loss.last().copied().unwrap_or(f64::INFINITY) {
        model.store.load_matching(&best.1);
    }
    model.store.set_all_trainable(true);
    Ok(report)
}
