use serde::{Deserialize, Serialize};
use wst_autograd::{Matrix, OptimizerState, StepReport, Trace, UpdateRule, Var};

use crate::classifier::TextCnn;
use crate::error::{CoreError, Result};
use crate::lrp::{calibrate_eta, map_relevance, sentence_relevance, LrpConfig};
use crate::seed::{derive_seed, rng_for};
use crate::seq2seq::{greedy, Gate, Mode, Seq2Seq};
use crate::text::batch::{shuffled_order, Batch};
use crate::text::corpus::LabeledCorpus;
use crate::text::corrupt::corrupt;
use crate::text::vocab::EOS;
use crate::training::log::{LogRow, TrainLog};
use crate::training::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub optimizer: String,
    pub replace_prob: f64,
    pub max_len: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub held_out: f64,
    /// Drops the relevance reprediction term.
    pub without_relevance_loss: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 10,
            max_steps: None,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            optimizer: "adam".into(),
            replace_prob: 0.15,
            max_len: 16,
            patience: 3,
            held_out: 0.05,
            without_relevance_loss: false,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(CoreError::Config("stage1 batch_size and max_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(CoreError::Config("replace_prob must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(CoreError::Config("stage1 learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sentence relevance targets toward each sentence's own label,
/// valid for one (classifier, eta, epsilon) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceCache {
    pub classifier_hash: String,
    pub eta: f64,
    pub epsilon: f64,
    pub raw: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl RelevanceCache {
    /// A calibrated cache matches any `eta`, since its own value was fitted.
    pub fn matches(&self, classifier: &TextCnn, lrp: &LrpConfig) -> bool {
        self.classifier_hash == classifier.store.content_hash()
            && self.epsilon == lrp.epsilon
            && (lrp.calibrate_to.is_some() || self.eta == lrp.eta)
    }

    /// The LRP settings the cached targets were built with.
    pub fn lrp_config(&self, base: &LrpConfig) -> LrpConfig {
        LrpConfig {
            eta: self.eta,
            epsilon: self.epsilon,
            calibrate_to: None,
            ..base.clone()
        }
    }
}

/// Reuses `cache` when it fits `classifier`, `lrp` and `corpus`; otherwise
/// recomputes the targets.
pub fn ensure_cache(
    cache: Option<RelevanceCache>,
    classifier: &TextCnn,
    corpus: &LabeledCorpus,
    lrp: &LrpConfig,
) -> Result<RelevanceCache> {
    match cache {
        Some(c) if c.lambda.len() == corpus.len() && c.matches(classifier, lrp) => Ok(c),
        _ => build_relevance_cache(classifier, corpus, lrp),
    }
}

/// Runs LRP on every sentence. When `lrp.calibrate_to` is set, `eta` is
/// fitted on these sentences first and the fitted value is stored.
pub fn build_relevance_cache(classifier: &TextCnn, corpus: &LabeledCorpus, lrp: &LrpConfig) -> Result<RelevanceCache> {
    lrp.validate()?;
    let mut raw = Vec::with_capacity(corpus.len());
    for (s, &l) in corpus.sentences.iter().zip(&corpus.labels) {
        raw.push(sentence_relevance(classifier, s, l as usize, lrp)?.raw);
    }
    let eta = match lrp.calibrate_to {
        Some(target) => calibrate_eta(&raw, target)?,
        None => lrp.eta,
    };
    let lambda = raw
        .iter()
        .map(|r| map_relevance(r, eta, lrp.epsilon))
        .collect::<Result<_>>()?;
    Ok(RelevanceCache {
        classifier_hash: classifier.store.content_hash(),
        eta,
        epsilon: lrp.epsilon,
        raw,
        lambda,
    })
}

/// Loss nodes of one Stage-1 batch.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub breakdown: LossBreakdown,
    pub sr: Var,
    pub xl: Var,
    pub total: Var,
}

/// Teacher-forced Stage-1 objective for one batch. `noisy` holds the
/// corrupted sources aligned with `batch.src`; `targets[b]` the relevance
/// targets of sentence `b`. With `with_relevance = false` the relevance
/// term is reported but not added to the total.
pub fn stage1_loss(
    model: &Seq2Seq,
    t: &mut Trace,
    batch: &Batch,
    noisy: &[Vec<usize>],
    targets: &[&[f64]],
    with_relevance: bool,
) -> Result<Stage1Terms> {
    let b = batch.size();
    let enc = model.encode(t, noisy, &batch.lengths)?;
    let mut h = enc.final_state;
    let inv_b = 1.0 / b as f64;
    let mut sr_terms = Vec::new();
    let mut xl_terms = Vec::new();
    for j in 0..=batch.width() {
        let e = model.embed_ids(t, &batch.dec_input_column(j))?;
        let step = model.decode_step(t, e, h, &enc, Mode::Basic, None, Gate::Predicted)?;
        let w: Vec<f64> = batch.target_mask(j).iter().map(|m| m * inv_b).collect();
        sr_terms.push(t.cross_entropy(step.logits, &batch.dec_target_column(j), &w)?);
        if j < batch.width() {
            let mut tgt = vec![0.0; b];
            let mut wt = vec![0.0; b];
            for i in 0..b {
                if j < batch.lengths[i] {
                    tgt[i] = targets[i][j];
                    wt[i] = inv_b / batch.lengths[i] as f64;
                }
            }
            let tv = t.constant(Matrix::column_vector(tgt));
            let d = t.sub(step.lambda, tv)?;
            let sq = t.mul(d, d)?;
            let wv = t.constant(Matrix::column_vector(wt));
            let weighted = t.mul(sq, wv)?;
            xl_terms.push(t.sum(weighted));
        }
        h = step.h_rev;
    }
    let sr = sum_all(t, &sr_terms)?;
    let xl = sum_all(t, &xl_terms)?;
    let total = if with_relevance { t.add(sr, xl)? } else { sr };
    let breakdown = LossBreakdown {
        l_sr: t.scalar(sr),
        l_xl: t.scalar(xl),
        total: t.scalar(total),
        ..Default::default()
    };
    Ok(Stage1Terms { breakdown, sr, xl, total })
}

pub(crate) fn sum_all(t: &mut Trace, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| CoreError::Invalid("no loss terms".into()))?;
    for &v in &terms[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(acc)
}

fn targets_for<'a>(cache: &'a RelevanceCache, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| cache.lambda[i].as_slice()).collect()
}

/// One optimizer update on the sentences `idx` of `corpus`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    model: &mut Seq2Seq,
    opt: &mut OptimizerState,
    corpus: &LabeledCorpus,
    cache: &RelevanceCache,
    idx: &[usize],
    cfg: &Stage1Config,
    step: usize,
) -> Result<(LossBreakdown, StepReport)> {
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| corpus.sentences[i].as_slice()).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| corpus.labels[i]).collect();
    let batch = Batch::new(&seqs, &labels, cfg.max_len)?;
    let mut rng = rng_for(cfg.seed, &format!("stage1/corrupt/{step}"));
    let noisy: Vec<Vec<usize>> = batch
        .src
        .iter()
        .map(|r| corrupt(r, model.vocab_size, cfg.replace_prob, &mut rng))
        .collect();
    let mut t = Trace::new();
    let terms = stage1_loss(model, &mut t, &batch, &noisy, &targets_for(cache, idx), !cfg.without_relevance_loss)?;
    let (l, total) = (terms.breakdown, terms.total);
    if !l.total.is_finite() {
        return Err(CoreError::NonFinite("stage1 loss".into()));
    }
    t.backward_into(total, &mut [&mut model.store])?;
    let report = opt.step(&mut model.store);
    Ok((l, report))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Stage1Eval {
    /// Position-wise accuracy of greedy reconstruction of clean inputs,
    /// over each sentence's tokens plus its EOS.
    pub token_accuracy: f64,
    /// Mean squared error of teacher-forced relevance predictions against
    /// the targets, over all tokens.
    pub relevance_mse: f64,
}

/// Held-out reconstruction and relevance quality.
pub fn evaluate_stage1(model: &Seq2Seq, corpus: &LabeledCorpus, cache: &RelevanceCache, max_len: usize) -> Result<Stage1Eval> {
    if corpus.is_empty() {
        return Err(CoreError::EmptyCorpus("stage1 evaluation".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    let (mut se, mut n) = (0.0, 0usize);
    let idx: Vec<usize> = (0..corpus.len()).collect();
    for chunk in idx.chunks(64) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus.sentences[i][..corpus.sentences[i].len().min(max_len)].to_vec()).collect();
        let styles: Vec<usize> = chunk.iter().map(|&i| corpus.labels[i] as usize).collect();
        let out = greedy(model, &src, &styles, Mode::Basic, Gate::Predicted, max_len + 1)?;
        for (s, o) in src.iter().zip(&out.tokens) {
            let mut target = s.clone();
            target.push(EOS);
            let mut produced = o.clone();
            produced.push(EOS);
            hits += target.iter().zip(&produced).filter(|(a, b)| a == b).count();
            total += target.len();
        }
        // Teacher-forced relevance predictions on clean input.
        let refs: Vec<&[usize]> = src.iter().map(Vec::as_slice).collect();
        let labels: Vec<u8> = chunk.iter().map(|&i| corpus.labels[i]).collect();
        let batch = Batch::new(&refs, &labels, max_len)?;
        let mut t = Trace::new();
        let enc = model.encode(&mut t, &batch.src, &batch.lengths)?;
        let mut h = enc.final_state;
        for j in 0..batch.width() {
            let e = model.embed_ids(&mut t, &batch.dec_input_column(j))?;
            let step = model.decode_step(&mut t, e, h, &enc, Mode::Basic, None, Gate::Predicted)?;
            let lam = t.value(step.lambda).data.clone();
            for (bi, &i) in chunk.iter().enumerate() {
                if j < batch.lengths[bi] {
                    let d = lam[bi] - cache.lambda[i][j];
                    se += d * d;
                    n += 1;
                }
            }
            h = step.h_rev;
        }
    }
    Ok(Stage1Eval {
        token_accuracy: hits as f64 / total as f64,
        relevance_mse: se / n.max(1) as f64,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Stage1Report {
    pub steps: usize,
    pub epochs_run: usize,
    pub held_out_loss: Vec<f64>,
    #[serde(skip)]
    pub log: TrainLog,
}

fn held_out_loss(model: &Seq2Seq, corpus: &LabeledCorpus, cache: &RelevanceCache, idx: &[usize], cfg: &Stage1Config) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0;
    for (k, chunk) in idx.chunks(cfg.batch_size).enumerate() {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| corpus.sentences[i].as_slice()).collect();
        let labels: Vec<u8> = chunk.iter().map(|&i| corpus.labels[i]).collect();
        let batch = Batch::new(&seqs, &labels, cfg.max_len)?;
        let mut rng = rng_for(cfg.seed, &format!("stage1/heldout/{k}"));
        let noisy: Vec<Vec<usize>> = batch
            .src
            .iter()
            .map(|r| corrupt(r, model.vocab_size, cfg.replace_prob, &mut rng))
            .collect();
        let mut t = Trace::new();
        let terms = stage1_loss(model, &mut t, &batch, &noisy, &targets_for(cache, chunk), !cfg.without_relevance_loss)?;
        total += terms.breakdown.total;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Trains the basic model. Epochs run until `epochs`, `max_steps`, or
/// `patience` epochs without held-out improvement. The best held-out
/// parameters are kept.
pub fn train_stage1(model: &mut Seq2Seq, corpus: &LabeledCorpus, cache: &RelevanceCache, cfg: &Stage1Config) -> Result<Stage1Report> {
    cfg.validate()?;
    if cache.lambda.len() != corpus.len() {
        return Err(CoreError::CountMismatch {
            what: "relevance targets",
            expected: corpus.len(),
            got: cache.lambda.len(),
        });
    }
    let rule = UpdateRule::parse(&cfg.optimizer)
        .ok_or_else(|| CoreError::Config(format!("unknown optimizer `{}`", cfg.optimizer)))?;
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.clip_norm, rule)?;
    let order = shuffled_order(corpus.len(), derive_seed(cfg.seed, "stage1/split"), 0);
    let n_held = ((corpus.len() as f64) * cfg.held_out) as usize;
    let (held, train) = order.split_at(n_held);
    let mut report = Stage1Report::default();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut stale = 0;
    'outer: for epoch in 0..cfg.epochs {
        let perm = shuffled_order(train.len(), derive_seed(cfg.seed, "stage1/batches"), epoch);
        for chunk in perm.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'outer;
            }
            let idx: Vec<usize> = chunk.iter().map(|&k| train[k]).collect();
            let (l, r) = stage1_step(model, &mut opt, corpus, cache, &idx, cfg, report.steps)?;
            report.log.push(LogRow::new(report.steps, &l, r.grad_norm));
            report.steps += 1;
        }
        report.epochs_run = epoch + 1;
        if !held.is_empty() {
            let h = held_out_loss(model, corpus, cache, held, cfg)?;
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
    if !held.is_empty() && best.0.is_finite() {
        let last = report.held_out_loss.last().copied().unwrap_or(f64::INFINITY);
        if best.0 < last {
            model.store.load_matching(&best.1);
        }
    }
    Ok(report)
}
