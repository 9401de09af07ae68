use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wst_autograd::{
    check_input_gradient, finite_difference_check, Init, Matrix, ParamStore, Result, Trace, Var,
};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Projects an arbitrary node onto a scalar with fixed pseudo-random weights.
fn project(t: &mut Trace, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = t.shape(v);
    let w = t.constant(random_matrix(&mut rng, s.rows, s.cols));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_matrix(&mut rng, 3, 4);
    let mut t = Trace::new();
    let i = t.constant(Matrix::identity(3));
    let av = t.constant(a.clone());
    let out = t.matmul(i, av).unwrap();
    assert_eq!(t.value(out), &a);
}

#[test]
fn tanh_of_zero_is_zero() {
    let mut t = Trace::new();
    let z = t.constant(Matrix::zeros(1, 5));
    let y = t.tanh(z);
    assert!(t.value(y).data.iter().all(|v| *v == 0.0));
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut t = Trace::new();
    let c = t.constant(Matrix::row_vector(vec![2.5; 3]));
    let y = t.softmax(c);
    for v in &t.value(y).data {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn gradient_of_square_sum() {
    let mut t = Trace::new();
    let x = t.variable(Matrix::row_vector(vec![3.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
}

#[test]
fn mean_scales_gradient_by_batch() {
    let mut t = Trace::new();
    let x = t.variable(Matrix::column_vector(vec![1.0, -2.0, 0.5, 4.0]));
    let loss = t.mean(x);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn unreachable_parameters_keep_their_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", Matrix::row_vector(vec![2.0]));
    let unused = store.add("unused", Matrix::row_vector(vec![5.0]));
    store.param_mut(unused).tensor.grad[0] = 0.75;
    let mut t = Trace::new();
    let w = t.param(&store, used);
    let loss = t.sum(w);
    t.backward(loss).unwrap();
    t.accumulate_into(&mut store);
    assert_eq!(store.grad(used), &[1.0]);
    assert_eq!(store.grad(unused), &[0.75]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Trace::new();
    let x = t.variable(Matrix::zeros(2, 2));
    assert!(t.backward(x).is_err());
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Trace::new();
    let a = t.constant(Matrix::zeros(2, 3));
    let b = t.constant(Matrix::zeros(3, 2));
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2x3]") && msg.contains("[3x2]"), "{msg}");
}

#[test]
fn frozen_store_receives_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Matrix::row_vector(vec![1.0, 2.0]));
    store.freeze();
    let mut t = Trace::new();
    let x = t.variable(Matrix::row_vector(vec![0.5, 0.5]));
    let wv = t.param(&store, w);
    let p = t.mul(x, wv).unwrap();
    let loss = t.sum(p);
    t.backward(loss).unwrap();
    t.accumulate_into(&mut store);
    assert!(store.grads_all_zero());
    assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
}

fn two_layer_net(store: &ParamStore, t: &mut Trace, x: &Matrix) -> Result<Var> {
    let xv = t.constant(x.clone());
    let w1 = t.param(store, store.lookup("w1")?);
    let b1 = t.param(store, store.lookup("b1")?);
    let w2 = t.param(store, store.lookup("w2")?);
    let b2 = t.param(store, store.lookup("b2")?);
    let h = t.linear(xv, w1, b1)?;
    let h = t.tanh(h);
    let o = t.linear(h, w2, b2)?;
    let o = t.tanh(o);
    let sq = t.square(o)?;
    Ok(t.sum(sq))
}

#[test]
fn two_layer_tanh_net_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.add_init("w1", 4, 6, Init::Uniform(1.0), &mut rng);
    store.add_init("b1", 1, 6, Init::Uniform(1.0), &mut rng);
    store.add_init("w2", 6, 3, Init::Uniform(1.0), &mut rng);
    store.add_init("b2", 1, 3, Init::Uniform(1.0), &mut rng);
    let x = random_matrix(&mut rng, 5, 4);
    let report = finite_difference_check(&mut store, 1e-5, None, |s, t| two_layer_net(s, t, &x)).unwrap();
    assert_eq!(report.coordinates_checked, 24 + 6 + 18 + 3);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn linear_least_squares_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add_init("w", 3, 1, Init::Uniform(1.0), &mut rng);
    let x = random_matrix(&mut rng, 8, 3);
    let y = random_matrix(&mut rng, 8, 1);
    // closed form: d/dw sum (xw - y)^2 = 2 x^T (xw - y)
    let resid: Vec<f64> = (0..8)
        .map(|i| (0..3).map(|k| x.get(i, k) * store.value(w).data[k]).sum::<f64>() - y.data[i])
        .collect();
    let closed: Vec<f64> = (0..3)
        .map(|k| 2.0 * (0..8).map(|i| x.get(i, k) * resid[i]).sum::<f64>())
        .collect();
    let mut t = Trace::new();
    let wv = t.param(&store, w);
    let xv = t.constant(x.clone());
    let yv = t.constant(y.clone());
    let pred = t.matmul(xv, wv).unwrap();
    let loss = t.squared_error(pred, yv).unwrap();
    t.backward_into(loss, &mut [&mut store]).unwrap();
    for (a, c) in store.grad(w).iter().zip(&closed) {
        assert!(wst_autograd::relative_error(*a, *c) < 1e-12);
    }
    store.zero_grad();
    let report = finite_difference_check(&mut store, 1e-5, None, |s, t| {
        let wv = t.param(s, w);
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let pred = t.matmul(xv, wv)?;
        t.squared_error(pred, yv)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-7, "{report:?}");
}

#[test]
fn gru_cell_step_matches_central_differences() {
    let (e, h) = (4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    store.add_init("w_i", e, 3 * h, Init::Uniform(0.8), &mut rng);
    store.add_init("w_h", h, 3 * h, Init::Uniform(0.8), &mut rng);
    store.add_init("b_i", 1, 3 * h, Init::Uniform(0.8), &mut rng);
    store.add_init("b_h", 1, 3 * h, Init::Uniform(0.8), &mut rng);
    let x = random_matrix(&mut rng, 2, e);
    let h0 = random_matrix(&mut rng, 2, h);
    let report = finite_difference_check(&mut store, 1e-5, None, |s, t| {
        let xv = t.constant(x.clone());
        let hv = t.constant(h0.clone());
        let wi = t.param(s, s.lookup("w_i")?);
        let wh = t.param(s, s.lookup("w_h")?);
        let bi = t.param(s, s.lookup("b_i")?);
        let bh = t.param(s, s.lookup("b_h")?);
        let gi = t.linear(xv, wi, bi)?;
        let gh = t.linear(hv, wh, bh)?;
        let (ir, iz, inn) = (t.slice_cols(gi, 0, h)?, t.slice_cols(gi, h, h)?, t.slice_cols(gi, 2 * h, h)?);
        let (hr, hz, hn) = (t.slice_cols(gh, 0, h)?, t.slice_cols(gh, h, h)?, t.slice_cols(gh, 2 * h, h)?);
        let r = t.add(ir, hr)?;
        let r = t.sigmoid(r);
        let z = t.add(iz, hz)?;
        let z = t.sigmoid(z);
        let rn = t.mul(r, hn)?;
        let n = t.add(inn, rn)?;
        let n = t.tanh(n);
        let one_minus_z = t.rsub_scalar(1.0, z);
        let a = t.mul(one_minus_z, n)?;
        let b = t.mul(z, hv)?;
        let out = t.add(a, b)?;
        project(t, out, 99)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn constant_loss_has_zero_error() {
    let mut store = ParamStore::new();
    store.add("w", Matrix::row_vector(vec![0.3, -0.2]));
    let report = finite_difference_check(&mut store, 1e-5, None, |_, t| {
        Ok(t.constant(Matrix::scalar(4.0)))
    })
    .unwrap();
    assert_eq!(report.max_relative_error, 0.0);
}

#[test]
fn gradcheck_rejects_non_finite_loss() {
    let mut store = ParamStore::new();
    store.add("w", Matrix::row_vector(vec![0.0]));
    let r = finite_difference_check(&mut store, 1e-5, None, |s, t| {
        let w = t.param(s, s.lookup("w")?);
        Ok(t.log(w))
    });
    assert!(r.is_err());
}

#[test]
fn identical_inputs_give_bitwise_identical_loss() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add_init("w1", 4, 6, Init::Glorot, &mut rng);
        store.add_init("b1", 1, 6, Init::Zeros, &mut rng);
        store.add_init("w2", 6, 3, Init::Glorot, &mut rng);
        store.add_init("b2", 1, 3, Init::Zeros, &mut rng);
        let x = random_matrix(&mut rng, 5, 4);
        let mut t = Trace::new();
        let l = two_layer_net(&store, &mut t, &x).unwrap();
        t.scalar(l).to_bits()
    };
    assert_eq!(run(), run());
}

/// Every primitive op against central differences on inputs in [-1, 1].
fn op_case(op: usize, t: &mut Trace, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let s = t.shape(x);
    let out = match op {
        0 => {
            let w = t.constant(random_matrix(&mut rng, s.cols, 3));
            t.matmul(x, w)?
        }
        1 => {
            let w = t.constant(random_matrix(&mut rng, 2, s.rows));
            t.matmul(w, x)?
        }
        2 => t.transpose(x),
        3 => t.mul(x, x)?,
        4 => {
            // denominator kept away from zero
            let sq = t.mul(x, x)?;
            let d = t.add_scalar(sq, 0.5);
            t.div(x, d)?
        }
        5 => {
            let r = t.slice_rows(x, 0, 1)?;
            t.add_row(x, r)?
        }
        6 => {
            let r = t.slice_rows(x, 0, 1)?;
            t.mul_row(x, r)?
        }
        7 => {
            let c = t.slice_cols(x, 0, 1)?;
            t.mul_col(x, c)?
        }
        8 => t.tanh(x),
        9 => t.sigmoid(x),
        10 => t.exp(x),
        11 => {
            let sq = t.mul(x, x)?;
            let p = t.add_scalar(sq, 0.1);
            t.log(p)
        }
        12 => t.softmax(x),
        13 => t.log_softmax(x),
        14 => {
            let a = t.tanh(x);
            t.concat_cols(&[x, a, x])?
        }
        15 => {
            let a = t.sigmoid(x);
            t.concat_rows(&[a, x])?
        }
        16 => t.gather_rows(x, &[s.rows - 1, 0, 0])?,
        17 => t.row_sums(x),
        18 => t.col_sums(x),
        19 => t.max_cols(x),
        20 => {
            let targets: Vec<usize> = (0..s.rows).map(|i| i % s.cols).collect();
            let weights: Vec<f64> = (0..s.rows).map(|i| 0.5 + i as f64).collect();
            t.cross_entropy(x, &targets, &weights)?
        }
        21 => {
            let p = t.softmax(x);
            let y = t.tanh(x);
            t.cross_entropy_dist(p, y)?
        }
        22 => {
            let u = t.unfold(x, 2.min(s.rows))?;
            let u2 = t.mul(u, u)?;
            t.fold(u2, 2.min(s.rows))?
        }
        23 => {
            let sq = t.mul(x, x)?;
            let p = t.add_scalar(sq, 0.2);
            let st = t.stabilize(p, 1e-3);
            t.div(x, st)?
        }
        _ => unreachable!(),
    };
    project(t, out, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn primitive_ops_match_finite_differences(op in 0usize..24, rows in 2usize..5, cols in 2usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols);
        let err = check_input_gradient(&x, 1e-5, |t, v| op_case(op, t, v, seed)).unwrap();
        prop_assert!(err < 1e-4, "op {} err {}", op, err);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols);
        let mut t = Trace::new();
        let v = t.constant(x);
        let scaled = t.scale(v, 30.0);
        let p = t.softmax(scaled);
        for r in 0..rows {
            let s: f64 = t.value(p).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        let q = t.softmax(v);
        let ce = t.cross_entropy_dist(q, scaled).unwrap();
        prop_assert!(t.scalar(ce) >= 0.0);
    }
}

#[test]
fn abs_and_threshold_gradients_away_from_kinks() {
    let x = Matrix::row_vector(vec![-0.7, 0.4, 0.9, -0.2, 0.35]);
    let err = check_input_gradient(&x, 1e-6, |t, v| {
        let a = t.abs(v);
        let th = t.threshold(a, 0.3);
        project(t, th, 4)
    })
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn five_point_stencil_is_exact_on_quartics() {
    // f(w) = sum w^4 has a nonzero third derivative, so central differences
    // carry an h^2 term while the five-point quotient is exact up to roundoff.
    let mut store = ParamStore::new();
    let w = store.add("w", Matrix::row_vector(vec![0.7, -1.3, 0.2]));
    let quartic = |s: &ParamStore, t: &mut Trace| {
        let v = t.param(s, w);
        let sq = t.mul(v, v)?;
        let q = t.mul(sq, sq)?;
        Ok(t.sum(q))
    };
    let central = finite_difference_check(&mut store, 1e-2, None, quartic).unwrap();
    let five = wst_autograd::finite_difference_check_with(
        &mut store,
        1e-2,
        wst_autograd::Stencil::FivePoint,
        None,
        quartic,
    )
    .unwrap();
    assert!(central.max_relative_error > 1e-5, "{central:?}");
    assert!(five.max_relative_error < 1e-10, "{five:?}");
}
