use rand::Rng;
use wst_autograd::{argmax, Matrix, Trace, Var};

use crate::error::{CoreError, Result};
use crate::seq2seq::model::{Encoded, Gate, Mode, Seq2Seq};
use crate::text::vocab::{BOS, EOS, PAD};

/// A generated soft sentence outside any trace: one vocabulary
/// distribution per realized step.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSentence {
    pub rows: Matrix,
}

impl SoftSentence {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    /// Expected embeddings under `table` (`[V x E]`).
    pub fn expected_embeddings(&self, table: &Matrix) -> Result<Matrix> {
        Ok(self.rows.matmul(table)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GreedyOutput {
    /// Emitted tokens per sentence, EOS excluded.
    pub tokens: Vec<Vec<usize>>,
    /// Gate value applied at each emitted token.
    pub gates: Vec<Vec<f64>>,
    /// Relevance head output at each emitted token.
    pub lambdas: Vec<Vec<f64>>,
}

/// Soft decoding of a batch inside a trace.
#[derive(Clone, Debug)]
pub struct SoftBatch {
    /// Gumbel-softmax rows per step, `[B x V]`.
    pub rows: Vec<Var>,
    /// Decoder logits per step, `[B x V]`.
    pub logits: Vec<Var>,
    pub gates: Vec<Var>,
    pub lambdas: Vec<Var>,
    /// Realized length `|Y|` per sentence: steps before the first step whose
    /// row argmax is EOS.
    pub lengths: Vec<usize>,
}

/// Pads sentences right with PAD; returns rows and lengths.
pub fn pad_batch(src: &[Vec<usize>]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if src.is_empty() || src.iter().any(|s| s.is_empty()) {
        return Err(CoreError::Invalid("cannot decode an empty source sentence".into()));
    }
    let width = src.iter().map(Vec::len).max().unwrap();
    let rows = src
        .iter()
        .map(|s| {
            let mut r = s.clone();
            r.resize(width, PAD);
            r
        })
        .collect();
    Ok((rows, src.iter().map(Vec::len).collect()))
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

/// `softmax((logits + g) / tau)`; `noise = None` disables the draws.
pub fn gumbel_softmax(t: &mut Trace, logits: Var, noise: Option<&Matrix>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(CoreError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let x = match noise {
        Some(g) => {
            let g = t.constant(g.clone());
            t.add(logits, g)?
        }
        None => logits,
    };
    let x = t.scale(x, 1.0 / tau);
    Ok(t.softmax(x))
}

fn check_styles(styles: &[usize], b: usize) -> Result<()> {
    if styles.len() != b {
        return Err(CoreError::CountMismatch {
            what: "target styles",
            expected: b,
            got: styles.len(),
        });
    }
    if let Some(&s) = styles.iter().find(|&&s| s > 1) {
        return Err(CoreError::UnknownStyle(s));
    }
    Ok(())
}

/// Greedy decoding: the argmax token is fed back until EOS or `max_len`.
pub fn greedy(model: &Seq2Seq, src: &[Vec<usize>], styles: &[usize], mode: Mode, gate: Gate, max_len: usize) -> Result<GreedyOutput> {
    if max_len < 1 {
        return Err(CoreError::Invalid("max_len must be at least 1".into()));
    }
    check_styles(styles, src.len())?;
    let (rows, lengths) = pad_batch(src)?;
    let b = rows.len();
    let mut t = Trace::new();
    let enc = model.encode(&mut t, &rows, &lengths)?;
    let mut h = enc.final_state;
    let mut prev = vec![BOS; b];
    let mut out = GreedyOutput {
        tokens: vec![Vec::new(); b],
        gates: vec![Vec::new(); b],
        lambdas: vec![Vec::new(); b],
    };
    let mut done = vec![false; b];
    for _ in 0..max_len {
        let e = model.embed_ids(&mut t, &prev)?;
        let step = model.decode_step(&mut t, e, h, &enc, mode, Some(styles), gate)?;
        let logits = t.value(step.logits).clone();
        for i in 0..b {
            let tok = argmax(logits.row(i));
            prev[i] = tok;
            if done[i] {
                continue;
            }
            if tok == EOS {
                done[i] = true;
                continue;
            }
            out.tokens[i].push(tok);
            out.gates[i].push(t.value(step.gate).data[i]);
            out.lambdas[i].push(t.value(step.lambda).data[i]);
        }
        if done.iter().all(|d| *d) {
            break;
        }
        h = step.h_rev;
    }
    Ok(out)
}

/// Soft decoding inside `t`. Each step emits a gumbel-softmax row whose
/// expected embedding is the next input. `noise[j]` (if given) holds the
/// draws for step `j`. Decoding stops once every sentence has produced an
/// EOS-argmax row or after `max_len` steps.
#[allow(clippy::too_many_arguments)]
pub fn soft_decode(
    model: &Seq2Seq,
    t: &mut Trace,
    enc: &Encoded,
    styles: &[usize],
    mode: Mode,
    gate: Gate,
    max_len: usize,
    tau: f64,
    noise: Option<&[Matrix]>,
) -> Result<SoftBatch> {
    if max_len < 1 {
        return Err(CoreError::Invalid("max_len must be at least 1".into()));
    }
    let b = t.shape(enc.final_state).rows;
    check_styles(styles, b)?;
    if let Some(n) = noise {
        if n.len() < max_len {
            return Err(CoreError::Invalid("fewer noise draws than steps".into()));
        }
    }
    let mut h = enc.final_state;
    let mut input = model.embed_ids(t, &vec![BOS; b])?;
    let mut out = SoftBatch {
        rows: Vec::new(),
        logits: Vec::new(),
        gates: Vec::new(),
        lambdas: Vec::new(),
        lengths: vec![max_len; b],
    };
    let mut done = vec![false; b];
    for j in 0..max_len {
        let step = model.decode_step(t, input, h, enc, mode, Some(styles), gate)?;
        let row = gumbel_softmax(t, step.logits, noise.map(|n| &n[j]), tau)?;
        let vals = t.value(row);
        for i in 0..b {
            if !done[i] && argmax(vals.row(i)) == EOS {
                done[i] = true;
                out.lengths[i] = j;
            }
        }
        out.rows.push(row);
        out.logits.push(step.logits);
        out.gates.push(step.gate);
        out.lambdas.push(step.lambda);
        if done.iter().all(|d| *d) {
            break;
        }
        input = model.embed_soft(t, row)?;
        h = step.h_rev;
    }
    Ok(out)
}

/// Rows `0..len` of sentence `b` stacked into `[len x C]`.
pub fn sentence_rows(t: &mut Trace, steps: &[Var], b: usize, len: usize) -> Result<Var> {
    if len == 0 || len > steps.len() {
        return Err(CoreError::Invalid(format!("cannot take {len} rows from {} steps", steps.len())));
    }
    let parts: Vec<Var> = steps[..len]
        .iter()
        .map(|&s| t.slice_rows(s, b, 1))
        .collect::<std::result::Result<_, _>>()?;
    Ok(t.concat_rows(&parts)?)
}

/// Soft generation for one sentence outside training.
pub fn generate_soft(model: &Seq2Seq, x: &[usize], style: usize, max_len: usize, tau: f64, noise: Option<&[Matrix]>) -> Result<SoftSentence> {
    let mut t = Trace::new();
    let (rows, lengths) = pad_batch(&[x.to_vec()])?;
    let enc = model.encode(&mut t, &rows, &lengths)?;
    let sb = soft_decode(model, &mut t, &enc, &[style], Mode::Styled, Gate::Predicted, max_len, tau, noise)?;
    let len = sb.lengths[0];
    if len == 0 {
        return Ok(SoftSentence {
            rows: Matrix::zeros(0, model.vocab_size),
        });
    }
    let r = sentence_rows(&mut t, &sb.rows, 0, len)?;
    Ok(SoftSentence { rows: t.value(r).clone() })
}
