//! Layer-wise relevance propagation with the z-rule.
//!
//! Two routes compute the same quantities. [`propagate`] walks a recorded
//! [`ForwardTrace`] with plain arithmetic and is used for the Stage-1
//! targets and for inspection. [`soft_word_relevance`] builds the same
//! computation out of trace ops so that relevance of a soft sentence can be
//! differentiated with respect to its rows.

use serde::{Deserialize, Serialize};
use wst_autograd::{Matrix, Trace, Var};

use crate::classifier::{content_ids, TextCnn};
use crate::error::{CoreError, Result};

pub const DEFAULT_STABILIZER: f64 = 1e-9;

/// Largest `f64` below one; relevance is kept strictly under 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrpConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub stabilizer: f64,
    /// When set, `eta` is re-fitted on the training corpus so the median
    /// sentence's strongest token maps to this value.
    pub calibrate_to: Option<f64>,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            eta: 1.0,
            epsilon: 0.3,
            stabilizer: DEFAULT_STABILIZER,
            calibrate_to: None,
        }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        check_mapping(self.eta, self.epsilon)?;
        if !(self.stabilizer >= 0.0) {
            return Err(CoreError::Config("stabilizer must be >= 0".into()));
        }
        if let Some(c) = self.calibrate_to {
            if !(0.0 < c && c < 1.0) {
                return Err(CoreError::Config("calibrate_to must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

fn check_mapping(eta: f64, epsilon: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(CoreError::Invalid(format!("eta must be positive, got {eta}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(CoreError::Invalid(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    Ok(())
}

/// One recorded layer. Inputs and outputs are flat vectors.
#[derive(Clone, Debug)]
pub enum Layer {
    /// `out = input @ weight (+ bias)`; the bias takes no relevance.
    Dense { input: Vec<f64>, weight: Matrix },
    /// Elementwise nonlinearity; relevance passes through unchanged.
    Activation,
    /// Valid 1-d convolution over a `[T x E]` input with a `[w*E x F]`
    /// kernel. Output is the `[P x F]` map flattened row-major.
    Conv { input: Matrix, kernel: Matrix, width: usize },
    /// Max over `positions` rows of a flattened `[P x F]` map.
    MaxPool { argmax: Vec<usize>, positions: usize },
    /// Parallel sub-networks reading the same input; their outputs are
    /// concatenated in order.
    Branches { branches: Vec<Vec<Layer>>, out_lens: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<Layer>,
    pub input_len: usize,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    /// `layers[0]` is input relevance, the last entry is the top vector.
    pub layers: Vec<Vec<f64>>,
    pub target: usize,
    pub stabilizer: f64,
    /// Columns whose stabilized denominator was exactly zero.
    pub degenerate_columns: usize,
}

impl RelevanceMap {
    pub fn input(&self) -> &[f64] {
        &self.layers[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WordRelevance {
    pub lambda: Vec<f64>,
    /// Signed per-token relevance before mapping.
    pub raw: Vec<f64>,
    pub eta: f64,
    pub epsilon: f64,
}

fn stabilize(den: f64, delta: f64) -> f64 {
    if den >= 0.0 {
        den + delta
    } else {
        den - delta
    }
}

/// Redistributes relevance of one output column over `n` inputs.
/// `z(k)` is the contribution of input `k`.
fn split_column(n: usize, r_out: f64, delta: f64, z: impl Fn(usize) -> f64, mut add: impl FnMut(usize, f64), degenerate: &mut usize) {
    if r_out == 0.0 {
        return;
    }
    let den: f64 = (0..n).map(&z).sum();
    let den = stabilize(den, delta);
    if den == 0.0 {
        *degenerate += 1;
        for k in 0..n {
            add(k, r_out / n as f64);
        }
        return;
    }
    let g = r_out / den;
    for k in 0..n {
        add(k, z(k) * g);
    }
}

fn layer_output_len(layer: &Layer, in_len: usize) -> usize {
    match layer {
        Layer::Dense { weight, .. } => weight.cols(),
        Layer::Activation => in_len,
        Layer::Conv { input, kernel, width } => (input.rows() + 1 - width) * kernel.cols(),
        Layer::MaxPool { argmax, .. } => argmax.len(),
        Layer::Branches { out_lens, .. } => out_lens.iter().sum(),
    }
}

fn back_layer(layer: &Layer, r_out: &[f64], in_len: usize, delta: f64, degenerate: &mut usize) -> Result<Vec<f64>> {
    let mut r_in = vec![0.0; in_len];
    match layer {
        Layer::Dense { input, weight } => {
            if input.len() != weight.rows() || r_out.len() != weight.cols() {
                return Err(CoreError::Invalid("dense layer shape mismatch".into()));
            }
            for (j, &r) in r_out.iter().enumerate() {
                split_column(
                    input.len(),
                    r,
                    delta,
                    |k| input[k] * weight.get(k, j),
                    |k, v| r_in[k] += v,
                    degenerate,
                );
            }
        }
        Layer::Activation => r_in.copy_from_slice(r_out),
        Layer::Conv { input, kernel, width } => {
            let (e, f) = (input.cols(), kernel.cols());
            let positions = input.rows() + 1 - width;
            let span = width * e;
            for p in 0..positions {
                let window = &input.data[p * e..p * e + span];
                for j in 0..f {
                    split_column(
                        span,
                        r_out[p * f + j],
                        delta,
                        |i| window[i] * kernel.get(i, j),
                        |i, v| r_in[p * e + i] += v,
                        degenerate,
                    );
                }
            }
        }
        Layer::MaxPool { argmax, .. } => {
            let f = argmax.len();
            for (j, &pos) in argmax.iter().enumerate() {
                r_in[pos * f + j] += r_out[j];
            }
        }
        Layer::Branches { branches, out_lens } => {
            let mut off = 0;
            for (b, &len) in branches.iter().zip(out_lens) {
                let part = &r_out[off..off + len];
                off += len;
                let sub = propagate_layers(b, in_len, part, delta, degenerate)?;
                for (a, v) in r_in.iter_mut().zip(&sub[0]) {
                    *a += v;
                }
            }
        }
    }
    Ok(r_in)
}

/// Returns relevance at the input of every layer plus the top vector.
fn propagate_layers(layers: &[Layer], input_len: usize, top: &[f64], delta: f64, degenerate: &mut usize) -> Result<Vec<Vec<f64>>> {
    let mut lens = vec![input_len];
    for l in layers {
        let last = *lens.last().unwrap();
        lens.push(layer_output_len(l, last));
    }
    if *lens.last().unwrap() != top.len() {
        return Err(CoreError::Invalid(format!(
            "top relevance has {} entries, network output has {}",
            top.len(),
            lens.last().unwrap()
        )));
    }
    let mut out = vec![top.to_vec()];
    for (i, l) in layers.iter().enumerate().rev() {
        let r = back_layer(l, out.last().unwrap(), lens[i], delta, degenerate)?;
        out.push(r);
    }
    out.reverse();
    Ok(out)
}

/// Propagates the target output's value down to the input.
pub fn propagate(trace: &ForwardTrace, target: usize, stabilizer: f64) -> Result<RelevanceMap> {
    if target >= trace.output.len() {
        return Err(CoreError::Invalid(format!("target {target} out of range")));
    }
    let mut top = vec![0.0; trace.output.len()];
    top[target] = trace.output[target];
    let mut degenerate = 0;
    let layers = propagate_layers(&trace.layers, trace.input_len, &top, stabilizer, &mut degenerate)?;
    Ok(RelevanceMap {
        layers,
        target,
        stabilizer,
        degenerate_columns: degenerate,
    })
}

/// `tanh(eta * |r|)`, then zero below `epsilon`.
pub fn map_relevance(raw: &[f64], eta: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_mapping(eta, epsilon)?;
    Ok(raw.iter().map(|r| map_one(*r, eta, epsilon)).collect())
}

fn map_one(r: f64, eta: f64, epsilon: f64) -> f64 {
    let l = (eta * r.abs()).tanh().min(BELOW_ONE);
    if l < epsilon {
        0.0
    } else {
        l
    }
}

/// Sums input relevance over each token's embedding coordinates (signed),
/// then maps. Only the first `n_tokens` rows are words.
pub fn word_relevance(map: &RelevanceMap, embed_dim: usize, n_tokens: usize, eta: f64, epsilon: f64) -> Result<WordRelevance> {
    let input = map.input();
    if n_tokens * embed_dim > input.len() {
        return Err(CoreError::Invalid("more tokens than input relevance rows".into()));
    }
    let raw: Vec<f64> = (0..n_tokens)
        .map(|i| input[i * embed_dim..(i + 1) * embed_dim].iter().sum())
        .collect();
    let lambda = map_relevance(&raw, eta, epsilon)?;
    Ok(WordRelevance {
        lambda,
        raw,
        eta,
        epsilon,
    })
}

fn tanh_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

/// Records the classifier forward pass on an embedded input `[T x E]`.
pub fn textcnn_trace(model: &TextCnn, embedded: &Matrix) -> Result<ForwardTrace> {
    let e = model.embed_dim;
    if embedded.cols() != e || embedded.rows() == 0 {
        return Err(CoreError::Invalid("embedded input has wrong shape".into()));
    }
    let mut input = embedded.clone();
    if input.rows() < model.max_width() {
        input.data.resize(model.max_width() * e, 0.0);
        input.shape.rows = model.max_width();
    }
    let store = &model.store;
    let mut branches = Vec::new();
    let mut out_lens = Vec::new();
    let mut features = Vec::new();
    for (&w, &(k, b)) in model.widths.iter().zip(&model.banks) {
        let kernel = store.value(k).clone();
        let bias = &store.value(b).data;
        let positions = input.rows() + 1 - w;
        let f = kernel.cols();
        let mut act = vec![0.0; positions * f];
        for p in 0..positions {
            let window = &input.data[p * e..(p + w) * e];
            for j in 0..f {
                let z: f64 = window.iter().enumerate().map(|(i, x)| x * kernel.get(i, j)).sum();
                act[p * f + j] = z + bias[j];
            }
        }
        let act = tanh_vec(&act);
        let mut argmax = vec![0usize; f];
        for j in 0..f {
            for p in 1..positions {
                if act[p * f + j] > act[argmax[j] * f + j] {
                    argmax[j] = p;
                }
            }
            features.push(act[argmax[j] * f + j]);
        }
        out_lens.push(f);
        branches.push(vec![
            Layer::Conv {
                input: input.clone(),
                kernel,
                width: w,
            },
            Layer::Activation,
            Layer::MaxPool { argmax, positions },
        ]);
    }
    let ow = store.value(model.out_w).clone();
    let ob = &store.value(model.out_b).data;
    let output: Vec<f64> = (0..2)
        .map(|c| features.iter().enumerate().map(|(k, v)| v * ow.get(k, c)).sum::<f64>() + ob[c])
        .collect();
    Ok(ForwardTrace {
        input_len: input.data.len(),
        layers: vec![
            Layer::Branches { branches, out_lens },
            Layer::Dense {
                input: features,
                weight: ow,
            },
        ],
        output,
    })
}

/// Word relevance of a hard sentence toward `target`.
pub fn sentence_relevance(model: &TextCnn, ids: &[usize], target: usize, cfg: &LrpConfig) -> Result<WordRelevance> {
    let ids = content_ids(ids);
    if ids.is_empty() {
        return Err(CoreError::Invalid("relevance of an empty sentence".into()));
    }
    let table = model.store.value(model.emb);
    let mut x = Matrix::zeros(ids.len(), model.embed_dim);
    for (i, &id) in ids.iter().enumerate() {
        x.row_mut(i).copy_from_slice(table.row(id));
    }
    let trace = textcnn_trace(model, &x)?;
    let map = propagate(&trace, target, cfg.stabilizer)?;
    word_relevance(&map, model.embed_dim, ids.len(), cfg.eta, cfg.epsilon)
}

/// Picks `eta` so that the median over sentences of the strongest token's
/// `|r|` maps to `target_lambda`.
pub fn calibrate_eta(raw: &[Vec<f64>], target_lambda: f64) -> Result<f64> {
    let mut peaks: Vec<f64> = raw
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    if peaks.is_empty() {
        return Err(CoreError::EmptyCorpus("no relevance to calibrate on".into()));
    }
    peaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = peaks[peaks.len() / 2];
    if !(median > 0.0) {
        return Err(CoreError::Invalid("median peak relevance is zero".into()));
    }
    Ok(target_lambda.atanh() / median)
}

/// Differentiable word relevance of a soft sentence `rows [T x V]` toward
/// `target`, as a `[T x 1]` node. Same rules as [`propagate`]; the pooling
/// winners are treated as constants.
pub fn soft_word_relevance(t: &mut Trace, model: &TextCnn, rows: Var, target: usize, cfg: &LrpConfig) -> Result<Var> {
    let fwd = model.forward_soft(t, rows)?;
    relevance_from_forward(t, model, &fwd, target, cfg)
}

/// Relevance head on an existing classifier forward pass.
pub fn relevance_from_forward(
    t: &mut Trace,
    model: &TextCnn,
    fwd: &crate::classifier::CnnForward,
    target: usize,
    cfg: &LrpConfig,
) -> Result<Var> {
    check_mapping(cfg.eta, cfg.epsilon)?;
    if target > 1 {
        return Err(CoreError::UnknownStyle(target));
    }
    let delta = cfg.stabilizer;
    let top = t.slice_cols(fwd.logits, target, 1)?;
    let ow = t.param(&model.store, model.out_w);
    let w_col = t.slice_cols(ow, target, 1)?;
    let w_row = t.transpose(w_col);
    let z = t.mul(fwd.features, w_row)?;
    let den = t.sum(z);
    let den = t.stabilize(den, delta);
    let g = t.div(top, den)?;
    let r_features = t.mul_col(z, g)?;

    let f = model.filters;
    let mut r_input: Option<Var> = None;
    for (bi, br) in fwd.branches.iter().enumerate() {
        let r_f = t.slice_cols(r_features, bi * f, f)?;
        let argmax = t
            .argmax_of(br.pooled)
            .ok_or_else(|| CoreError::Invalid("branch is not max-pooled".into()))?
            .to_vec();
        let positions = t.shape(br.pre_bias).rows;
        let mut sel = Matrix::zeros(positions, f);
        for (j, &p) in argmax.iter().enumerate() {
            sel.set(p, j, 1.0);
        }
        let sel = t.constant(sel);
        let picked = t.mul(sel, br.pre_bias)?;
        let den = t.col_sums(picked);
        let den = t.stabilize(den, delta);
        let g = t.div(r_f, den)?;
        let routed = t.mul_row(sel, g)?;
        let kernel = t.param(&model.store, model.banks[bi].0);
        let kt = t.transpose(kernel);
        let back = t.matmul(routed, kt)?;
        let r_u = t.mul(br.unfolded, back)?;
        let r_x = t.fold(r_u, br.width)?;
        r_input = Some(match r_input {
            None => r_x,
            Some(acc) => t.add(acc, r_x)?,
        });
    }
    let r_input = r_input.ok_or_else(|| CoreError::Invalid("classifier has no branches".into()))?;
    let r_words = t.slice_rows(r_input, 0, fwd.n_tokens)?;
    let r = t.row_sums(r_words);
    let r = t.abs(r);
    let r = t.scale(r, cfg.eta);
    let l = t.tanh(r);
    Ok(t.threshold(l, cfg.epsilon))
}
