use rand::Rng;
use wst_autograd::{Init, ParamId, ParamStore, Result, Trace, Var};

/// GRU cell with gate weights packed as `[r | z | n]` column blocks.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_i: ParamId,
    pub w_h: ParamId,
    pub b_i: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        GruParams {
            w_i: store.add_init(&format!("{prefix}.w_i"), input, 3 * hidden, Init::Uniform(k), rng),
            w_h: store.add_init(&format!("{prefix}.w_h"), hidden, 3 * hidden, Init::Uniform(k), rng),
            b_i: store.add_init(&format!("{prefix}.b_i"), 1, 3 * hidden, Init::Uniform(k), rng),
            b_h: store.add_init(&format!("{prefix}.b_h"), 1, 3 * hidden, Init::Uniform(k), rng),
            hidden,
        }
    }

    /// `r = σ(x W_ir + h W_hr)`, `z = σ(x W_iz + h W_hz)`,
    /// `n = tanh(x W_in + r ⊙ (h W_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`
    /// (biases included in each product).
    pub fn step(&self, t: &mut Trace, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let wi = t.param(store, self.w_i);
        let wh = t.param(store, self.w_h);
        let bi = t.param(store, self.b_i);
        let bh = t.param(store, self.b_h);
        let gi = t.linear(x, wi, bi)?;
        let gh = t.linear(h, wh, bh)?;
        let rz_i = t.slice_cols(gi, 0, 2 * hd)?;
        let rz_h = t.slice_cols(gh, 0, 2 * hd)?;
        let rz = t.add(rz_i, rz_h)?;
        let rz = t.sigmoid(rz);
        let r = t.slice_cols(rz, 0, hd)?;
        let z = t.slice_cols(rz, hd, hd)?;
        let n_i = t.slice_cols(gi, 2 * hd, hd)?;
        let n_h = t.slice_cols(gh, 2 * hd, hd)?;
        let rn = t.mul(r, n_h)?;
        let n = t.add(n_i, rn)?;
        let n = t.tanh(n);
        // h' = n + z ⊙ (h - n)
        let d = t.sub(h, n)?;
        let zd = t.mul(z, d)?;
        t.add(n, zd)
    }
}
