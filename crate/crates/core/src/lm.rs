//! Directional GRU language models and the fluency loss over soft
//! sentences.

use serde::{Deserialize, Serialize};
use wst_autograd::{
    Checkpoint, CheckpointHeader, Init, Matrix, OptimizerState, ParamId, ParamStore, Trace, UpdateRule, Var,
};

use crate::error::{CoreError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::seq2seq::gru::GruParams;
use crate::text::batch::{shuffled_order, Batch};
use crate::text::corpus::{LabeledCorpus, Style};
use crate::text::vocab::{Vocabulary, BOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub optimizer: String,
    pub held_out: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 64,
            hidden: 64,
            epochs: 3,
            batch_size: 32,
            learning_rate: 3e-3,
            clip_norm: 5.0,
            optimizer: "adam".into(),
            held_out: 0.1,
            max_len: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DirectionalLm {
    pub store: ParamStore,
    pub direction: Direction,
    pub style: Style,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub emb: ParamId,
    pub gru: GruParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LmReport {
    /// Mean per-token cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    pub held_out_perplexity: f64,
}

/// Forward and backward models of one style.
#[derive(Clone, Debug)]
pub struct LmPair {
    pub forward: DirectionalLm,
    pub backward: DirectionalLm,
}

impl LmPair {
    pub fn style(&self) -> Style {
        self.forward.style
    }

    pub fn freeze(&mut self) {
        self.forward.store.freeze();
        self.backward.store.freeze();
    }
}

impl DirectionalLm {
    pub fn new(vocab_size: usize, style: Style, direction: Direction, cfg: &LmConfig) -> Self {
        // Initialization ignores the direction so that a backward model is
        // exactly a forward model trained on reversed text.
        let mut rng = rng_for(cfg.seed, &format!("lm/init/{style}"));
        let mut store = ParamStore::new();
        let emb = store.add_init("lm.emb", vocab_size, cfg.embed_dim, Init::Uniform(0.5), &mut rng);
        store.pin_row(emb, PAD);
        let gru = GruParams::new(&mut store, "lm.gru", cfg.embed_dim, cfg.hidden, &mut rng);
        let out_w = store.add_init("lm.out.w", cfg.hidden, vocab_size, Init::Glorot, &mut rng);
        let out_b = store.add_init("lm.out.b", 1, vocab_size, Init::Zeros, &mut rng);
        DirectionalLm {
            store,
            direction,
            style,
            vocab_size,
            embed_dim: cfg.embed_dim,
            hidden: cfg.hidden,
            emb,
            gru,
            out_w,
            out_b,
        }
    }

    /// Runs the LM over per-step inputs (`[B x E]` each) and returns the
    /// next-token logits after each input.
    pub fn run(&self, t: &mut Trace, inputs: &[Var]) -> Result<Vec<Var>> {
        let b = t.shape(inputs[0]).rows;
        let mut h = t.constant(Matrix::zeros(b, self.hidden));
        let ow = t.param(&self.store, self.out_w);
        let ob = t.param(&self.store, self.out_b);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.gru.step(t, &self.store, x, h)?;
            out.push(t.linear(h, ow, ob)?);
        }
        Ok(out)
    }

    /// Sum of token cross-entropies of a teacher-forced batch, and the
    /// number of scored tokens. Sentences are taken in the order given; the
    /// caller reverses them for a backward model.
    pub fn batch_loss(&self, t: &mut Trace, batch: &Batch) -> Result<(Var, usize)> {
        let e = t.param(&self.store, self.emb);
        let steps = batch.width() + 1;
        let inputs: Vec<Var> = (0..steps)
            .map(|j| t.gather_rows(e, &batch.dec_input_column(j)))
            .collect::<std::result::Result<_, _>>()?;
        let logits = self.run(t, &inputs)?;
        let mut total: Option<Var> = None;
        let mut count = 0;
        for (j, &l) in logits.iter().enumerate() {
            let mask = batch.target_mask(j);
            count += mask.iter().filter(|m| **m > 0.0).count();
            let ce = t.cross_entropy(l, &batch.dec_target_column(j), &mask)?;
            total = Some(match total {
                None => ce,
                Some(acc) => t.add(acc, ce)?,
            });
        }
        Ok((total.unwrap(), count))
    }

    fn oriented(&self, s: &[usize]) -> Vec<usize> {
        match self.direction {
            Direction::Forward => s.to_vec(),
            Direction::Backward => s.iter().rev().copied().collect(),
        }
    }

    /// Per-token perplexity over a corpus.
    pub fn perplexity(&self, sentences: &[Vec<usize>], max_len: usize) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for chunk in sentences.chunks(64) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|s| self.oriented(s)).collect();
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            let labels = vec![self.style; refs.len()];
            let batch = Batch::new(&refs, &labels, max_len)?;
            let mut t = Trace::new();
            let (loss, n) = self.batch_loss(&mut t, &batch)?;
            nll += t.scalar(loss);
            count += n;
        }
        if count == 0 {
            return Err(CoreError::EmptyCorpus("perplexity of nothing".into()));
        }
        Ok((nll / count as f64).exp())
    }

    pub fn checkpoint(&self, vocab: &Vocabulary, config_hash: &str, seed: u64) -> Checkpoint {
        let header = CheckpointHeader::new("lm", config_hash, seed)
            .with_tag("vocab", vocab.hash())
            .with_tag("style", self.style)
            .with_tag("direction", self.direction.name())
            .with_tag("embed_dim", self.embed_dim)
            .with_tag("hidden", self.hidden);
        Checkpoint::from_store(header, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocabulary) -> Result<Self> {
        if ck.header.kind != "lm" {
            return Err(CoreError::Mismatch(format!("expected lm, found {}", ck.header.kind)));
        }
        if ck.header.tag("vocab") != Some(vocab.hash().as_str()) {
            return Err(CoreError::Mismatch("LM was trained on a different vocabulary".into()));
        }
        let tag = |k: &str| -> Result<&str> {
            ck.header
                .tag(k)
                .ok_or_else(|| CoreError::Mismatch(format!("LM checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> { tag(k)?.parse().map_err(|_| CoreError::Mismatch(format!("bad `{k}`"))) };
        let style: Style = tag("style")?.parse().map_err(|_| CoreError::Mismatch("bad style tag".into()))?;
        let direction = match tag("direction")? {
            "fwd" => Direction::Forward,
            "bwd" => Direction::Backward,
            d => return Err(CoreError::Mismatch(format!("bad direction `{d}`"))),
        };
        let cfg = LmConfig {
            embed_dim: num("embed_dim")?,
            hidden: num("hidden")?,
            ..Default::default()
        };
        let mut m = DirectionalLm::new(vocab.len(), style, direction, &cfg);
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }
}

/// Trains one directional LM on the sentences of `style`.
pub fn train_lm(corpus: &LabeledCorpus, vocab_size: usize, style: Style, direction: Direction, cfg: &LmConfig) -> Result<(DirectionalLm, LmReport)> {
    let own = corpus.filter_style(style).non_empty();
    if own.is_empty() {
        return Err(CoreError::EmptyCorpus(format!("no sentences of style {style}")));
    }
    let mut model = DirectionalLm::new(vocab_size, style, direction, cfg);
    let seqs: Vec<Vec<usize>> = own.sentences.iter().map(|s| model.oriented(s)).collect();
    let order = shuffled_order(seqs.len(), derive_seed(cfg.seed, "lm/split"), 0);
    let n_held = ((seqs.len() as f64) * cfg.held_out) as usize;
    let (held_idx, train_idx) = order.split_at(n_held);
    let rule = UpdateRule::parse(&cfg.optimizer)
        .ok_or_else(|| CoreError::Config(format!("unknown optimizer `{}`", cfg.optimizer)))?;
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.clip_norm, rule)?;
    let mut report = LmReport::default();
    for epoch in 0..cfg.epochs {
        let perm = shuffled_order(train_idx.len(), derive_seed(cfg.seed, "lm/batches"), epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in perm.chunks(cfg.batch_size) {
            let refs: Vec<&[usize]> = chunk.iter().map(|&i| seqs[train_idx[i]].as_slice()).collect();
            let batch = Batch::new(&refs, &vec![style; refs.len()], cfg.max_len)?;
            let mut t = Trace::new();
            let (loss, count) = model.batch_loss(&mut t, &batch)?;
            let mean = t.scale(loss, 1.0 / count as f64);
            let v = t.scalar(mean);
            if !v.is_finite() {
                return Err(CoreError::NonFinite("language model loss".into()));
            }
            sum += t.scalar(loss);
            n += count;
            t.backward_into(mean, &mut [&mut model.store])?;
            opt.step(&mut model.store);
        }
        report.epoch_loss.push(sum / n.max(1) as f64);
    }
    let held: Vec<Vec<usize>> = held_idx.iter().map(|&i| own.sentences[i].clone()).collect();
    report.held_out_perplexity = if held.is_empty() {
        f64::NAN
    } else {
        model.perplexity(&held, cfg.max_len)?
    };
    Ok((model, report))
}

/// Summed cross-entropy `-sum_j P_model_j . log P_lm_j` of one LM over a
/// batch of soft sentences. `rows[j]` and `probs[j]` are `[B x V]`: the
/// gumbel rows fed to the LM and the model's distribution at step `j`.
/// Only the first `lengths[b]` steps of sentence `b` count; a backward
/// model reads each sentence from its last realized step.
pub fn lm_cross_entropy(lm: &DirectionalLm, t: &mut Trace, rows: &[Var], probs: &[Var], lengths: &[usize]) -> Result<Var> {
    let b = lengths.len();
    let steps = *lengths.iter().max().unwrap_or(&0);
    if steps == 0 {
        return Err(CoreError::Invalid("no realized soft steps".into()));
    }
    if rows.len() < steps || probs.len() < steps {
        return Err(CoreError::Invalid("fewer soft steps than realized lengths".into()));
    }
    let all_rows = t.concat_rows(&rows[..steps])?;
    let all_probs = t.concat_rows(&probs[..steps])?;
    // position of sentence `i`'s k-th word in LM reading order
    let source = |i: usize, k: usize| -> Option<usize> {
        let len = lengths[i];
        if k >= len {
            return None;
        }
        let j = match lm.direction {
            Direction::Forward => k,
            Direction::Backward => len - 1 - k,
        };
        Some(j * b + i)
    };
    let select = |k: usize| -> Matrix {
        let mut s = Matrix::zeros(b, steps * b);
        for i in 0..b {
            if let Some(p) = source(i, k) {
                s.set(i, p, 1.0);
            }
        }
        s
    };
    let emb = t.param(&lm.store, lm.emb);
    let bos = t.gather_rows(emb, &vec![BOS; b])?;
    let mut inputs = vec![bos];
    for k in 1..steps {
        let s = t.constant(select(k - 1));
        let r = t.matmul(s, all_rows)?;
        inputs.push(t.matmul(r, emb)?);
    }
    let logits = lm.run(t, &inputs)?;
    let mut total: Option<Var> = None;
    for (k, &l) in logits.iter().enumerate() {
        let s = t.constant(select(k));
        let target = t.matmul(s, all_probs)?;
        let ce = t.cross_entropy_dist(target, l)?;
        total = Some(match total {
            None => ce,
            Some(acc) => t.add(acc, ce)?,
        });
    }
    Ok(total.unwrap())
}

/// `L_lm` summed over the batch: the average of the forward and backward
/// cross-entropies, multiplied by `sign` (+1 is the cross-entropy form).
#[allow(clippy::too_many_arguments)]
pub fn fluency_loss(
    lms: &LmPair,
    t: &mut Trace,
    rows: &[Var],
    probs: &[Var],
    lengths: &[usize],
    target_style: Style,
    sign: f64,
) -> Result<(Var, Var, Var)> {
    if lms.style() != target_style || lms.backward.style != target_style {
        return Err(CoreError::Mismatch(format!(
            "language models are for style {}, soft sentences target style {target_style}",
            lms.style()
        )));
    }
    if lms.forward.direction != Direction::Forward || lms.backward.direction != Direction::Backward {
        return Err(CoreError::Mismatch("language model pair has wrong directions".into()));
    }
    let f = lm_cross_entropy(&lms.forward, t, rows, probs, lengths)?;
    let b = lm_cross_entropy(&lms.backward, t, rows, probs, lengths)?;
    let s = t.add(f, b)?;
    let total = t.scale(s, 0.5 * sign);
    Ok((total, f, b))
}

/// [`fluency_loss`] for a single soft sentence given as plain matrices.
pub fn fluency_loss_value(lms: &LmPair, rows: &Matrix, probs: &Matrix, target_style: Style) -> Result<f64> {
    let mut t = Trace::new();
    let n = rows.rows();
    let rv: Vec<Var> = (0..n).map(|j| t.constant(Matrix::row_vector(rows.row(j).to_vec()))).collect();
    let pv: Vec<Var> = (0..n).map(|j| t.constant(Matrix::row_vector(probs.row(j).to_vec()))).collect();
    let (loss, _, _) = fluency_loss(lms, &mut t, &rv, &pv, &[n], target_style, 1.0)?;
    Ok(t.scalar(loss))
}
