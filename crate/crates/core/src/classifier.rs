//! TextCNN style classifier: embedding, parallel convolution banks with
//! tanh and max-over-time pooling, then an affine map to two logits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wst_autograd::{
    softmax_rows, Checkpoint, CheckpointHeader, Init, Matrix, OptimizerState, ParamId, ParamStore, Trace,
    UpdateRule, Var,
};

use crate::error::{CoreError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::text::batch::shuffled_order;
use crate::text::corpus::{LabeledCorpus, Style};
use crate::text::vocab::{is_reserved, Vocabulary, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub filters: usize,
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub optimizer: String,
    /// Fraction of the training corpus held out for the accuracy report.
    pub held_out: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 64,
            filters: 32,
            widths: vec![2, 3, 4],
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            optimizer: "adam".into(),
            held_out: 0.1,
            max_len: 16,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0 || w > self.max_len) {
            return Err(CoreError::Config(format!(
                "filter widths {:?} must lie in 1..={}",
                self.widths, self.max_len
            )));
        }
        if self.embed_dim == 0 || self.filters == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("classifier sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.held_out) {
            return Err(CoreError::Config("held_out must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TextCnn {
    pub store: ParamStore,
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub filters: usize,
    pub vocab_size: usize,
    pub emb: ParamId,
    /// `(kernel [w*E x F], bias [1 x F])` per width.
    pub banks: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Trace handles of one classifier forward pass.
#[derive(Clone, Debug)]
pub struct CnnForward {
    /// Embedded input, PAD-extended to the largest width `[T' x E]`.
    pub input: Var,
    pub n_tokens: usize,
    pub branches: Vec<BranchVars>,
    /// Concatenated pooled features `[1 x F*widths]`.
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub width: usize,
    pub unfolded: Var,
    /// Window-kernel products before the bias, `[P x F]`.
    pub pre_bias: Var,
    pub pooled: Var,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ClassifierReport {
    pub held_out_accuracy: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub diverged: bool,
    pub skipped_steps: u64,
}

/// Reserved ids other than UNK are not words.
pub fn content_ids(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| !is_reserved(i) || i == UNK).collect()
}

impl TextCnn {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, cfg: &ClassifierConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let e = cfg.embed_dim;
        let emb = store.add_init("clf.emb", vocab_size, e, Init::Uniform(0.5), rng);
        store.pin_row(emb, PAD);
        let banks = cfg
            .widths
            .iter()
            .map(|&w| {
                let k = store.add_init(&format!("clf.conv{w}.k"), w * e, cfg.filters, Init::Glorot, rng);
                let b = store.add_init(&format!("clf.conv{w}.b"), 1, cfg.filters, Init::Zeros, rng);
                (k, b)
            })
            .collect();
        let out_w = store.add_init("clf.out.w", cfg.filters * cfg.widths.len(), 2, Init::Glorot, rng);
        let out_b = store.add_init("clf.out.b", 1, 2, Init::Zeros, rng);
        TextCnn {
            store,
            widths: cfg.widths.clone(),
            embed_dim: e,
            filters: cfg.filters,
            vocab_size,
            emb,
            banks,
            out_w,
            out_b,
        }
    }

    pub fn max_width(&self) -> usize {
        *self.widths.iter().max().unwrap()
    }

    /// Forward from an embedded sentence `[T x E]`.
    pub fn forward_embedded(&self, t: &mut Trace, x: Var) -> Result<CnnForward> {
        let n_tokens = t.shape(x).rows;
        if n_tokens == 0 {
            return Err(CoreError::Invalid("classifier input is empty".into()));
        }
        let input = if n_tokens < self.max_width() {
            let pad = t.constant(Matrix::zeros(self.max_width() - n_tokens, self.embed_dim));
            t.concat_rows(&[x, pad])?
        } else {
            x
        };
        let mut branches = Vec::with_capacity(self.widths.len());
        let mut pooled = Vec::with_capacity(self.widths.len());
        for (&w, &(k, b)) in self.widths.iter().zip(&self.banks) {
            let unfolded = t.unfold(input, w)?;
            let kv = t.param(&self.store, k);
            let bv = t.param(&self.store, b);
            let pre_bias = t.matmul(unfolded, kv)?;
            let a = t.add_row(pre_bias, bv)?;
            let h = t.tanh(a);
            let p = t.max_cols(h);
            branches.push(BranchVars {
                width: w,
                unfolded,
                pre_bias,
                pooled: p,
            });
            pooled.push(p);
        }
        let features = t.concat_cols(&pooled)?;
        let ow = t.param(&self.store, self.out_w);
        let ob = t.param(&self.store, self.out_b);
        let logits = t.linear(features, ow, ob)?;
        Ok(CnnForward {
            input,
            n_tokens,
            branches,
            features,
            logits,
        })
    }

    /// Hard input; PAD, BOS and EOS ids are stripped first.
    pub fn forward_ids(&self, t: &mut Trace, ids: &[usize]) -> Result<CnnForward> {
        let ids = content_ids(ids);
        if ids.is_empty() {
            return Err(CoreError::Invalid("classifier input has no tokens".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(CoreError::Invalid(format!("token id {bad} outside vocabulary")));
        }
        let e = t.param(&self.store, self.emb);
        let x = t.gather_rows(e, &ids)?;
        self.forward_embedded(t, x)
    }

    /// Soft input: each row of `rows` is a distribution over the vocabulary
    /// and the network consumes `rows @ E`.
    pub fn forward_soft(&self, t: &mut Trace, rows: Var) -> Result<CnnForward> {
        let e = t.param(&self.store, self.emb);
        let x = t.matmul(rows, e)?;
        self.forward_embedded(t, x)
    }

    /// `(probabilities, logits)` for a hard sentence.
    pub fn classify(&self, ids: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Trace::new();
        let f = self.forward_ids(&mut t, ids)?;
        Ok(probs_and_logits(t.value(f.logits)))
    }

    pub fn classify_soft(&self, rows: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if rows.cols() != self.vocab_size {
            return Err(CoreError::Invalid(format!(
                "soft rows have {} columns, vocabulary has {}",
                rows.cols(),
                self.vocab_size
            )));
        }
        let mut t = Trace::new();
        let r = t.constant(rows.clone());
        let f = self.forward_soft(&mut t, r)?;
        Ok(probs_and_logits(t.value(f.logits)))
    }

    pub fn predict(&self, ids: &[usize]) -> Result<Style> {
        let (p, _) = self.classify(ids)?;
        Ok((p[1] > p[0]) as Style)
    }

    /// Fraction of sentences whose predicted style equals the label.
    pub fn accuracy(&self, corpus: &LabeledCorpus) -> Result<f64> {
        if corpus.is_empty() {
            return Err(CoreError::EmptyCorpus("accuracy on empty corpus".into()));
        }
        let mut hits = 0usize;
        for (s, l) in corpus.sentences.iter().zip(&corpus.labels) {
            hits += (self.predict(s)? == *l) as usize;
        }
        Ok(hits as f64 / corpus.len() as f64)
    }

    pub fn checkpoint(&self, vocab: &Vocabulary, config_hash: &str, seed: u64) -> Checkpoint {
        let header = CheckpointHeader::new("classifier", config_hash, seed)
            .with_tag("vocab", vocab.hash())
            .with_tag("widths", format!("{:?}", self.widths))
            .with_tag("filters", self.filters)
            .with_tag("embed_dim", self.embed_dim);
        Checkpoint::from_store(header, &self.store)
    }

    /// Rebuilds a model from a checkpoint, checking the vocabulary tag.
    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocabulary) -> Result<Self> {
        if ck.header.kind != "classifier" {
            return Err(CoreError::Mismatch(format!("expected classifier, found {}", ck.header.kind)));
        }
        if ck.header.tag("vocab") != Some(vocab.hash().as_str()) {
            return Err(CoreError::Mismatch("classifier was trained on a different vocabulary".into()));
        }
        let tag = |k: &str| {
            ck.header
                .tag(k)
                .ok_or_else(|| CoreError::Mismatch(format!("classifier checkpoint lacks `{k}`")))
        };
        let widths: Vec<usize> = serde_json::from_str(tag("widths")?)
            .map_err(|e| CoreError::Mismatch(format!("widths tag: {e}")))?;
        let parse = |k: &str| -> Result<usize> {
            tag(k)?
                .parse()
                .map_err(|_| CoreError::Mismatch(format!("bad `{k}` tag")))
        };
        let cfg = ClassifierConfig {
            embed_dim: parse("embed_dim")?,
            filters: parse("filters")?,
            widths,
            ..Default::default()
        };
        let mut m = TextCnn::new(vocab.len(), &cfg, &mut rng_for(0, "checkpoint"));
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }
}

fn probs_and_logits(logits: &Matrix) -> (Vec<f64>, Vec<f64>) {
    (softmax_rows(logits).data, logits.data.clone())
}

/// Trains with mean cross-entropy over mini-batches. A slice of the corpus
/// is held out for the reported accuracy. On a non-finite loss training
/// stops and the parameters from the last finite epoch are restored.
pub fn train_classifier(corpus: &LabeledCorpus, vocab_size: usize, cfg: &ClassifierConfig) -> Result<(TextCnn, ClassifierReport)> {
    cfg.validate()?;
    let corpus = corpus.non_empty();
    corpus.require_both_labels()?;
    let mut rng = rng_for(cfg.seed, "classifier/init");
    let mut model = TextCnn::new(vocab_size, cfg, &mut rng);
    let order = shuffled_order(corpus.len(), derive_seed(cfg.seed, "classifier/split"), 0);
    let n_held = ((corpus.len() as f64) * cfg.held_out) as usize;
    let (held_idx, train_idx) = order.split_at(n_held);
    let train = corpus.subset(train_idx);
    let held = corpus.subset(held_idx);
    train.require_both_labels()?;

    let rule = UpdateRule::parse(&cfg.optimizer)
        .ok_or_else(|| CoreError::Config(format!("unknown optimizer `{}`", cfg.optimizer)))?;
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.clip_norm, rule)?;
    let mut report = ClassifierReport::default();
    let mut last_good = model.store.clone();
    'epochs: for epoch in 0..cfg.epochs {
        let perm = shuffled_order(train.len(), derive_seed(cfg.seed, "classifier/batches"), epoch);
        for chunk in perm.chunks(cfg.batch_size) {
            let mut t = Trace::new();
            let mut logits = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train.sentences[i];
                let s = if s.len() > cfg.max_len { &s[..cfg.max_len] } else { &s[..] };
                logits.push(model.forward_ids(&mut t, s)?.logits);
                targets.push(train.labels[i] as usize);
            }
            let all = t.concat_rows(&logits)?;
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let loss = t.cross_entropy(all, &targets, &w)?;
            let lv = t.scalar(loss);
            if !lv.is_finite() {
                model.store = last_good;
                report.diverged = true;
                break 'epochs;
            }
            report.final_loss = lv;
            t.backward_into(loss, &mut [&mut model.store])?;
            opt.step(&mut model.store);
        }
        report.epochs_run = epoch + 1;
        last_good = model.store.clone();
    }
    report.skipped_steps = opt.skipped_steps;
    report.held_out_accuracy = if held.is_empty() { f64::NAN } else { model.accuracy(&held)? };
    Ok((model, report))
}
