use rand::Rng;
use serde::{Deserialize, Serialize};
use wst_autograd::{Checkpoint, CheckpointHeader, Init, Matrix, ParamId, ParamStore, Trace, Var};

use crate::error::{CoreError, Result};
use crate::seed::rng_for;
use crate::seq2seq::gru::GruParams;
use crate::text::vocab::{Vocabulary, PAD};

/// Additive attention score for padded encoder positions.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub style_dim: usize,
    pub style_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden: 64,
            attn_dim: 64,
            style_dim: 16,
            style_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.embed_dim, self.hidden, self.attn_dim, self.style_dim, self.style_hidden].contains(&0) {
            return Err(CoreError::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Decoder operating mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Plain attentional decoder; the relevance head is evaluated but the
    /// hidden state is not revised.
    Basic,
    /// Hidden state revised by the gated style component.
    Styled,
}

/// Source of the gate value in styled mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    Predicted,
    Fixed(f64),
}

/// Attentional GRU encoder-decoder with relevance head and style component.
///
/// Parameter groups by name prefix: `s2s.` (embedding, encoder, decoder,
/// attention, output), `lambda.` (relevance head) and `style.` (style
/// component).
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub emb: ParamId,
    pub enc: GruParams,
    pub dec: GruParams,
    pub att_we: ParamId,
    pub att_wd: ParamId,
    pub att_v: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub lam_w: ParamId,
    pub lam_b: ParamId,
    pub lam_v: ParamId,
    pub lam_c: ParamId,
    pub style_emb: ParamId,
    pub style_w1: ParamId,
    pub style_b1: ParamId,
    pub style_w2: ParamId,
    pub style_b2: ParamId,
}

/// Encoder outputs for one batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `h^e_i` per source position, each `[B x H]`.
    pub states: Vec<Var>,
    /// `h^e_i W_e`, precomputed for attention.
    pub keys: Vec<Var>,
    /// `[B x T]` additive score mask.
    pub mask: Var,
    pub final_state: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOut {
    pub h_raw: Var,
    pub h_rev: Var,
    pub context: Var,
    pub weights: Var,
    pub logits: Var,
    /// Relevance head output from the previous state, `[B x 1]`.
    pub lambda: Var,
    /// Gate actually applied (equals `lambda` unless fixed), `[B x 1]`.
    pub gate: Var,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (e, h, a) = (cfg.embed_dim, cfg.hidden, cfg.attn_dim);
        let mut store = ParamStore::new();
        let emb = store.add_init("s2s.emb", vocab_size, e, Init::Uniform(0.5), rng);
        store.pin_row(emb, PAD);
        let enc = GruParams::new(&mut store, "s2s.enc", e, h, rng);
        let dec = GruParams::new(&mut store, "s2s.dec", e + h, h, rng);
        let att_we = store.add_init("s2s.att.w_e", h, a, Init::Glorot, rng);
        let att_wd = store.add_init("s2s.att.w_d", h, a, Init::Glorot, rng);
        let att_v = store.add_init("s2s.att.v", a, 1, Init::Glorot, rng);
        let out_w = store.add_init("s2s.out.w", h, vocab_size, Init::Glorot, rng);
        let out_b = store.add_init("s2s.out.b", 1, vocab_size, Init::Zeros, rng);
        let lam_w = store.add_init("lambda.w", h, h, Init::Glorot, rng);
        let lam_b = store.add_init("lambda.b", 1, h, Init::Zeros, rng);
        let lam_v = store.add_init("lambda.v", h, 1, Init::Glorot, rng);
        let lam_c = store.add_init("lambda.c", 1, 1, Init::Zeros, rng);
        let style_emb = store.add_init("style.emb", 2, cfg.style_dim, Init::Uniform(0.5), rng);
        let style_w1 = store.add_init("style.w1", e + h + cfg.style_dim, cfg.style_hidden, Init::Glorot, rng);
        let style_b1 = store.add_init("style.b1", 1, cfg.style_hidden, Init::Zeros, rng);
        // Zero output layer: the style component starts as a no-op.
        let style_w2 = store.add_init("style.w2", cfg.style_hidden, h, Init::Zeros, rng);
        let style_b2 = store.add_init("style.b2", 1, h, Init::Zeros, rng);
        Seq2Seq {
            store,
            cfg: cfg.clone(),
            vocab_size,
            emb,
            enc,
            dec,
            att_we,
            att_wd,
            att_v,
            out_w,
            out_b,
            lam_w,
            lam_b,
            lam_v,
            lam_c,
            style_emb,
            style_w1,
            style_b1,
            style_w2,
            style_b2,
        }
    }

    /// Re-zeroes the style component's output layer.
    pub fn reset_style_output(&mut self) {
        for id in [self.style_w2, self.style_b2] {
            self.store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn embed_ids(&self, t: &mut Trace, ids: &[usize]) -> Result<Var> {
        let e = t.param(&self.store, self.emb);
        Ok(t.gather_rows(e, ids)?)
    }

    /// Expected embeddings `rows @ E` of soft words.
    pub fn embed_soft(&self, t: &mut Trace, rows: Var) -> Result<Var> {
        let e = t.param(&self.store, self.emb);
        Ok(t.matmul(rows, e)?)
    }

    /// Runs the encoder over right-padded rows. Padded steps leave the
    /// state unchanged, so `final_state` is the state after each row's last
    /// real token.
    pub fn encode(&self, t: &mut Trace, src: &[Vec<usize>], lengths: &[usize]) -> Result<Encoded> {
        let b = src.len();
        if b == 0 || lengths.iter().any(|&l| l == 0) {
            return Err(CoreError::Invalid("encoder input must be non-empty".into()));
        }
        let width = src[0].len();
        let mut h = t.constant(Matrix::zeros(b, self.cfg.hidden));
        let we = t.param(&self.store, self.att_we);
        let mut states = Vec::with_capacity(width);
        let mut keys = Vec::with_capacity(width);
        let mut mask = Matrix::zeros(b, width);
        for step in 0..width {
            let ids: Vec<usize> = src.iter().map(|r| r[step]).collect();
            let x = self.embed_ids(t, &ids)?;
            let h_new = self.enc.step(t, &self.store, x, h)?;
            let m: Vec<f64> = lengths.iter().map(|&l| (step < l) as u8 as f64).collect();
            h = if m.iter().all(|v| *v == 1.0) {
                h_new
            } else {
                let mv = t.constant(Matrix::column_vector(m.clone()));
                let d = t.sub(h_new, h)?;
                let md = t.mul_col(d, mv)?;
                t.add(h, md)?
            };
            for (i, mi) in m.iter().enumerate() {
                if *mi == 0.0 {
                    mask.set(i, step, MASKED_SCORE);
                }
            }
            states.push(h);
            keys.push(t.matmul(h, we)?);
        }
        let mask = t.constant(mask);
        Ok(Encoded {
            states,
            keys,
            mask,
            final_state: h,
        })
    }

    /// Additive attention: `e_i = v^T tanh(h^e_i W_e + q W_d)`, softmax over
    /// unmasked positions, context `sum_i a_i h^e_i`.
    pub fn attend(&self, t: &mut Trace, query: Var, enc: &Encoded) -> Result<(Var, Var)> {
        let wd = t.param(&self.store, self.att_wd);
        let v = t.param(&self.store, self.att_v);
        let q = t.matmul(query, wd)?;
        let mut scores = Vec::with_capacity(enc.keys.len());
        for &k in &enc.keys {
            let s = t.add(k, q)?;
            let s = t.tanh(s);
            scores.push(t.matmul(s, v)?);
        }
        let scores = t.concat_cols(&scores)?;
        let scores = t.add(scores, enc.mask)?;
        let weights = t.softmax(scores);
        let mut ctx: Option<Var> = None;
        for (i, &h) in enc.states.iter().enumerate() {
            let a = t.slice_cols(weights, i, 1)?;
            let part = t.mul_col(h, a)?;
            ctx = Some(match ctx {
                None => part,
                Some(c) => t.add(c, part)?,
            });
        }
        Ok((ctx.unwrap(), weights))
    }

    /// `sigmoid(tanh(h W_λ + b) v_λ + c)`, `[B x 1]`.
    pub fn predict_relevance(&self, t: &mut Trace, h: Var) -> Result<Var> {
        let w = t.param(&self.store, self.lam_w);
        let b = t.param(&self.store, self.lam_b);
        let v = t.param(&self.store, self.lam_v);
        let c = t.param(&self.store, self.lam_c);
        let a = t.linear(h, w, b)?;
        let a = t.tanh(a);
        let s = t.matmul(a, v)?;
        let s = t.add_row(s, c)?;
        Ok(t.sigmoid(s))
    }

    /// Style component revision `Δh = MLP(e(y_{j-1}), h̃_{j-1}, s')`.
    pub fn style_delta(&self, t: &mut Trace, prev_emb: Var, prev_h: Var, styles: &[usize]) -> Result<Var> {
        if let Some(&bad) = styles.iter().find(|&&s| s > 1) {
            return Err(CoreError::UnknownStyle(bad));
        }
        let se = t.param(&self.store, self.style_emb);
        let s = t.gather_rows(se, styles)?;
        let x = t.concat_cols(&[prev_emb, prev_h, s])?;
        let w1 = t.param(&self.store, self.style_w1);
        let b1 = t.param(&self.store, self.style_b1);
        let w2 = t.param(&self.store, self.style_w2);
        let b2 = t.param(&self.store, self.style_b2);
        let a = t.linear(x, w1, b1)?;
        let a = t.tanh(a);
        Ok(t.linear(a, w2, b2)?)
    }

    /// One decoder step from the previous word embedding and the previous
    /// (revised) state. `styles` is required in styled mode.
    pub fn decode_step(
        &self,
        t: &mut Trace,
        prev_emb: Var,
        prev_h: Var,
        enc: &Encoded,
        mode: Mode,
        styles: Option<&[usize]>,
        gate: Gate,
    ) -> Result<StepOut> {
        let (context, weights) = self.attend(t, prev_h, enc)?;
        let input = t.concat_cols(&[prev_emb, context])?;
        let h_raw = self.dec.step(t, &self.store, input, prev_h)?;
        let lambda = self.predict_relevance(t, prev_h)?;
        let (h_rev, gate_var) = match mode {
            Mode::Basic => (h_raw, lambda),
            Mode::Styled => {
                let styles = styles.ok_or_else(|| CoreError::Invalid("styled decoding needs target styles".into()))?;
                let delta = self.style_delta(t, prev_emb, prev_h, styles)?;
                let g = match gate {
                    Gate::Predicted => lambda,
                    Gate::Fixed(v) => t.constant(Matrix::filled(t.shape(prev_h).rows, 1, v)),
                };
                let gd = t.mul_col(delta, g)?;
                (t.add(h_raw, gd)?, g)
            }
        };
        let ow = t.param(&self.store, self.out_w);
        let ob = t.param(&self.store, self.out_b);
        let logits = t.linear(h_rev, ow, ob)?;
        Ok(StepOut {
            h_raw,
            h_rev,
            context,
            weights,
            logits,
            lambda,
            gate: gate_var,
        })
    }

    pub fn checkpoint(&self, vocab: &Vocabulary, stage: &str, config_hash: &str, seed: u64) -> Checkpoint {
        let header = CheckpointHeader::new("seq2seq", config_hash, seed)
            .with_tag("vocab", vocab.hash())
            .with_tag("stage", stage)
            .with_tag("model", serde_json::to_string(&self.cfg).expect("config serializes"));
        Checkpoint::from_store(header, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocabulary) -> Result<Self> {
        if ck.header.kind != "seq2seq" {
            return Err(CoreError::Mismatch(format!("expected seq2seq, found {}", ck.header.kind)));
        }
        if ck.header.tag("vocab") != Some(vocab.hash().as_str()) {
            return Err(CoreError::Mismatch("seq2seq checkpoint uses a different vocabulary".into()));
        }
        let cfg: ModelConfig = serde_json::from_str(ck.header.tag("model").unwrap_or("{}"))
            .map_err(|e| CoreError::Mismatch(format!("model tag: {e}")))?;
        let mut m = Seq2Seq::new(vocab.len(), &cfg, &mut rng_for(0, "checkpoint"));
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }
}
