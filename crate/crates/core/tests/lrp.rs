use proptest::prelude::*;
use rand::Rng;
use wst_autograd::{finite_difference_check, Matrix, ParamStore, Trace};
use wst_core::classifier::{ClassifierConfig, TextCnn};
use wst_core::lrp::{map_relevance, propagate, sentence_relevance, soft_word_relevance, textcnn_trace, LrpConfig};
use wst_core::seed::rng_for;

fn random_cnn(seed: u64, vocab: usize) -> TextCnn {
    let cfg = ClassifierConfig {
        embed_dim: 5,
        filters: 4,
        widths: vec![1, 2, 3],
        ..Default::default()
    };
    let mut m = TextCnn::new(vocab, &cfg, &mut rng_for(seed, "lrp-cnn"));
    // nonzero biases so they are exercised too
    let mut rng = rng_for(seed, "lrp-bias");
    let ids: Vec<_> = m.banks.iter().map(|b| b.1).chain([m.out_b]).collect();
    for id in ids {
        for v in m.store.value_mut(id).data.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    m
}

proptest! {
    #[test]
    fn mapping_ignores_sign(r in -50.0f64..50.0, eta in 0.01f64..5.0, eps in 0.0f64..0.99) {
        prop_assert_eq!(map_relevance(&[r], eta, eps).unwrap(), map_relevance(&[-r], eta, eps).unwrap());
    }

    #[test]
    fn mapping_is_monotone_in_magnitude(a in 0.0f64..20.0, b in 0.0f64..20.0, eta in 0.01f64..5.0, eps in 0.0f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l = map_relevance(&[lo, hi], eta, eps).unwrap();
        prop_assert!(l[0] <= l[1]);
    }

    #[test]
    fn mapping_range_and_idempotent_threshold(r in -1e6f64..1e6, eta in 0.01f64..5.0, eps in 0.0f64..0.99) {
        let l = map_relevance(&[r], eta, eps).unwrap()[0];
        prop_assert!((0.0..1.0).contains(&l));
        prop_assert!(l == 0.0 || l >= eps);
        let mut t = Trace::new();
        let v = t.constant(Matrix::scalar(l));
        let again = t.threshold(v, eps);
        prop_assert_eq!(t.scalar(again), l);
    }

    #[test]
    fn relevance_is_conserved_through_the_classifier(seed in 0u64..200, len in 1usize..7, target in 0usize..2) {
        let m = random_cnn(seed, 12);
        let mut rng = rng_for(seed, "lrp-ids");
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(4..12)).collect();
        let table = m.store.value(m.emb);
        let mut x = Matrix::zeros(len, m.embed_dim);
        for (i, &id) in ids.iter().enumerate() {
            x.row_mut(i).copy_from_slice(table.row(id));
        }
        let trace = textcnn_trace(&m, &x).unwrap();
        let map = propagate(&trace, target, 0.0).unwrap();
        prop_assume!(map.degenerate_columns == 0);
        let top = trace.output[target];
        let bottom: f64 = map.input().iter().sum();
        let scale: f64 = map.input().iter().map(|v| v.abs()).sum::<f64>().max(top.abs());
        prop_assert!((bottom - top).abs() <= 1e-9 * scale.max(1.0), "{} vs {}", bottom, top);
    }
}

#[test]
fn cancelling_markers_under_uniform_rows_get_no_relevance() {
    // One-dimensional embeddings: token 4 is +1, token 5 is -1.
    let cfg = ClassifierConfig {
        embed_dim: 1,
        filters: 1,
        widths: vec![1],
        ..Default::default()
    };
    let mut m = TextCnn::new(6, &cfg, &mut rng_for(0, "cancel"));
    m.store.value_mut(m.emb).data = vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0];
    m.store.value_mut(m.banks[0].0).data = vec![1.0];
    m.store.value_mut(m.banks[0].1).data = vec![0.0];
    m.store.value_mut(m.out_w).data = vec![-2.0, 2.0];
    let lrp = LrpConfig { epsilon: 0.0, ..Default::default() };
    // hard markers are relevant
    let hard = sentence_relevance(&m, &[4, 5], 1, &lrp).unwrap();
    assert!(hard.lambda.iter().any(|l| *l > 0.1), "{hard:?}");
    let mut row = vec![0.0; 6];
    row[4] = 0.5;
    row[5] = 0.5;
    let mut t = Trace::new();
    let rows = t.constant(Matrix::from_vec(2, 6, row.repeat(2)).unwrap());
    let l = soft_word_relevance(&mut t, &m, rows, 1, &lrp).unwrap();
    for v in &t.value(l).data {
        assert!(v.abs() < 1e-6, "{v}");
    }
}

#[test]
fn soft_relevance_gradient_matches_finite_differences() {
    let m = random_cnn(7, 12);
    let lrp = LrpConfig {
        eta: 0.5,
        epsilon: 0.0,
        ..Default::default()
    };
    let mut rng = rng_for(7, "soft-rows");
    let n = 4;
    let mut store = ParamStore::new();
    let logits: Vec<f64> = (0..n * 12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let id = store.add("rows", Matrix::from_vec(n, 12, logits).unwrap());
    // a fixed weighting of the token relevances as the scalar to check
    let w = Matrix::column_vector(vec![0.7, -1.1, 0.4, 1.3]);
    let report = finite_difference_check(&mut store, 1e-6, None, |s, t| {
        let p = t.param(s, id);
        let rows = t.softmax(p);
        let l = soft_word_relevance(t, &m, rows, 1, &lrp).map_err(|e| wst_autograd::TensorError::InvalidArgument {
            op: "lrp",
            detail: e.to_string(),
        })?;
        let wv = t.constant(w.clone());
        let prod = t.mul(l, wv)?;
        Ok(t.sum(prod))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-3, "{report:?}");

    // one-hot rows agree with the hard route
    let ids = [4usize, 9, 6, 11];
    let mut onehot = Matrix::zeros(n, 12);
    for (i, &k) in ids.iter().enumerate() {
        onehot.set(i, k, 1.0);
    }
    let mut t = Trace::new();
    let rows = t.constant(onehot);
    let soft = soft_word_relevance(&mut t, &m, rows, 1, &lrp).unwrap();
    let hard = sentence_relevance(&m, &ids, 1, &lrp).unwrap();
    for (a, b) in t.value(soft).data.iter().zip(&hard.lambda) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}
