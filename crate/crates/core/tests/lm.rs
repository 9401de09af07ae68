use proptest::prelude::*;
use rand::Rng;
use wst_autograd::{finite_difference_check, softmax_rows, Matrix, ParamStore, Trace, Var};
use wst_core::lm::{fluency_loss, fluency_loss_value, lm_cross_entropy, train_lm, Direction, DirectionalLm, LmConfig, LmPair};
use wst_core::seed::rng_for;
use wst_core::text::corpus::LabeledCorpus;

const V: usize = 10;

fn cfg() -> LmConfig {
    LmConfig {
        embed_dim: 8,
        hidden: 16,
        epochs: 4,
        batch_size: 16,
        learning_rate: 1e-2,
        max_len: 40,
        ..Default::default()
    }
}

#[test]
fn deterministic_grammar_is_learned_almost_perfectly() {
    // BOS -> 4 -> 5 -> ... -> 9 -> EOS: every symbol fixes the next one.
    let sent: Vec<usize> = (4..10).collect();
    let corpus = LabeledCorpus::new(vec![sent; 400], vec![0; 400]).unwrap();
    for dir in [Direction::Forward, Direction::Backward] {
        let (_, r) = train_lm(&corpus, V, 0, dir, &cfg()).unwrap();
        assert!(r.held_out_perplexity < 1.05, "{dir:?}: {}", r.held_out_perplexity);
    }
}

#[test]
fn uniform_source_has_perplexity_near_eight() {
    // Seven words and EOS, each emitted with probability 1/8 after the
    // first word (a sentence cannot be empty).
    let mut rng = rng_for(4, "uniform-lm");
    let mut sents = Vec::new();
    while sents.len() < 3000 {
        let mut s = vec![rng.random_range(3..10)];
        while s.len() < 40 {
            let k = rng.random_range(2..10);
            if k == 2 {
                break;
            }
            s.push(k);
        }
        if s.len() < 40 {
            sents.push(s);
        }
    }
    // exact entropy per predicted symbol of this source
    let (mut nats, mut n) = (0.0, 0.0);
    for s in &sents {
        nats += (7.0f64).ln() + (s.len() as f64) * (8.0f64).ln();
        n += s.len() as f64 + 1.0;
    }
    let oracle = (nats / n).exp();
    assert!((oracle - 8.0).abs() < 0.5);
    let labels = vec![1; sents.len()];
    let corpus = LabeledCorpus::new(sents, labels).unwrap();
    let c = LmConfig { epochs: 2, ..cfg() };
    let (_, r) = train_lm(&corpus, V, 1, Direction::Forward, &c).unwrap();
    assert!((r.held_out_perplexity - 8.0).abs() < 0.5, "{}", r.held_out_perplexity);
    assert!((r.held_out_perplexity - oracle).abs() < 0.3, "{} vs {oracle}", r.held_out_perplexity);
}

/// An LM pair whose next-token distribution is `softmax(bias)` whatever
/// it reads.
fn constant_pair(bias: &[f64]) -> LmPair {
    let c = LmConfig { embed_dim: 4, hidden: 4, ..cfg() };
    let make = |dir| {
        let mut lm = DirectionalLm::new(V, 1, dir, &c);
        lm.store.value_mut(lm.out_w).data.iter_mut().for_each(|w| *w = 0.0);
        lm.store.value_mut(lm.out_b).data.copy_from_slice(bias);
        lm
    };
    LmPair {
        forward: make(Direction::Forward),
        backward: make(Direction::Backward),
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn random_rows(seed: u64, n: usize) -> Matrix {
    let mut rng = rng_for(seed, "rows");
    let logits: Vec<f64> = (0..n * V).map(|_| rng.random_range(-2.0..2.0)).collect();
    softmax_rows(&Matrix::from_vec(n, V, logits).unwrap())
}

#[test]
fn matching_distributions_give_the_entropy() {
    let bias: Vec<f64> = (0..V).map(|k| (k as f64 * 0.9).sin()).collect();
    let lms = constant_pair(&bias);
    let p = softmax_rows(&Matrix::row_vector(bias.clone()));
    let n = 5;
    let probs = Matrix::from_vec(n, V, p.data.repeat(n)).unwrap();
    let rows = random_rows(1, n);
    let loss = fluency_loss_value(&lms, &rows, &probs, 1).unwrap();
    let want = n as f64 * entropy(&p.data);
    assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
}

#[test]
fn near_zero_lm_probability_blows_up() {
    // log-odds giving token 6 probability 1e-9 against nine equal others
    let mut bias = vec![0.0; V];
    bias[6] = (1e-9f64 * 9.0 / (1.0 - 1e-9)).ln();
    let lms = constant_pair(&bias);
    let p6 = softmax_rows(&Matrix::row_vector(bias)).data[6];
    assert!((p6 - 1e-9).abs() < 1e-15);
    let mut probs = Matrix::zeros(1, V);
    probs.set(0, 6, 1.0);
    let loss = fluency_loss_value(&lms, &probs, &probs, 1).unwrap();
    assert!(loss > 20.0, "{loss}");
    assert!((loss - 1e9f64.ln()).abs() < 1e-6);
}

fn trained_pair() -> LmPair {
    let mut rng = rng_for(9, "pair-corpus");
    let sents: Vec<Vec<usize>> = (0..60)
        .map(|_| (0..rng.random_range(2..7)).map(|_| rng.random_range(4..V)).collect())
        .collect();
    let corpus = LabeledCorpus::new(sents, vec![1; 60]).unwrap();
    let c = LmConfig { epochs: 1, ..cfg() };
    let mut pair = LmPair {
        forward: train_lm(&corpus, V, 1, Direction::Forward, &c).unwrap().0,
        backward: train_lm(&corpus, V, 1, Direction::Backward, &c).unwrap().0,
    };
    pair.freeze();
    pair
}

fn constants(t: &mut Trace, m: &Matrix) -> Vec<Var> {
    (0..m.rows()).map(|j| t.constant(Matrix::row_vector(m.row(j).to_vec()))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn each_direction_is_nonnegative_and_the_loss_is_their_mean(seed in 0u64..1000, n in 1usize..6) {
        let lms = trained_pair();
        let rows = random_rows(seed, n);
        let probs = random_rows(seed + 1, n);
        let mut t = Trace::new();
        let (r, p) = (constants(&mut t, &rows), constants(&mut t, &probs));
        let (total, f, b) = fluency_loss(&lms, &mut t, &r, &p, &[n], 1, 1.0).unwrap();
        let (total, f, b) = (t.scalar(total), t.scalar(f), t.scalar(b));
        prop_assert!(f >= 0.0 && b >= 0.0);
        prop_assert_eq!(total, 0.5 * (f + b));
        // cross-entropy never undercuts the model's own entropy
        let h: f64 = (0..n).map(|j| entropy(probs.row(j))).sum();
        prop_assert!(f >= h - 1e-9 && b >= h - 1e-9);
    }
}

#[test]
fn batch_loss_is_the_sum_of_sentence_losses() {
    let lms = trained_pair();
    let lengths = [4, 2, 3];
    let steps = 4;
    let rows: Vec<Matrix> = (0..steps).map(|j| random_rows(10 + j as u64, 3)).collect();
    let probs: Vec<Matrix> = (0..steps).map(|j| random_rows(20 + j as u64, 3)).collect();
    for lm in [&lms.forward, &lms.backward] {
        let mut t = Trace::new();
        let r: Vec<Var> = rows.iter().map(|m| t.constant(m.clone())).collect();
        let p: Vec<Var> = probs.iter().map(|m| t.constant(m.clone())).collect();
        let batch = lm_cross_entropy(lm, &mut t, &r, &p, &lengths).unwrap();
        let batch = t.scalar(batch);
        let mut sum = 0.0;
        for (i, &len) in lengths.iter().enumerate() {
            let mut t = Trace::new();
            let r: Vec<Var> = rows[..len].iter().map(|m| t.constant(Matrix::row_vector(m.row(i).to_vec()))).collect();
            let p: Vec<Var> = probs[..len].iter().map(|m| t.constant(Matrix::row_vector(m.row(i).to_vec()))).collect();
            let v = lm_cross_entropy(lm, &mut t, &r, &p, &[len]).unwrap();
            sum += t.scalar(v);
        }
        assert!((batch - sum).abs() < 1e-10, "{:?}: {batch} vs {sum}", lm.direction);
    }
}

#[test]
fn soft_row_gradients_match_finite_differences_and_spare_the_lms() {
    let mut lms = trained_pair();
    let n = 4;
    let mut store = ParamStore::new();
    let mut rng = rng_for(3, "soft-logits");
    let mut init = |name: &str, store: &mut ParamStore| {
        let v: Vec<f64> = (0..n * V).map(|_| rng.random_range(-1.5..1.5)).collect();
        store.add(name, Matrix::from_vec(n, V, v).unwrap())
    };
    let row_logits = init("rows", &mut store);
    let prob_logits = init("probs", &mut store);
    let loss = |s: &ParamStore, t: &mut Trace, lms: &LmPair| {
        let rl = t.param(s, row_logits);
        let pl = t.param(s, prob_logits);
        let rows = t.softmax(rl);
        let probs = t.softmax(pl);
        let (mut r, mut p) = (Vec::new(), Vec::new());
        for j in 0..n {
            r.push(t.slice_rows(rows, j, 1)?);
            p.push(t.slice_rows(probs, j, 1)?);
        }
        let (total, _, _) = fluency_loss(lms, t, &r, &p, &[n], 1, 1.0).map_err(|e| wst_autograd::TensorError::InvalidArgument {
            op: "fluency",
            detail: e.to_string(),
        })?;
        Ok(total)
    };
    let report = finite_difference_check(&mut store, 1e-5, None, |s, t| loss(s, t, &lms)).unwrap();
    assert!(report.max_relative_error < 1e-3, "{report:?}");

    let mut t = Trace::new();
    let l = loss(&store, &mut t, &lms).unwrap();
    t.backward_into(l, &mut [&mut store, &mut lms.forward.store, &mut lms.backward.store]).unwrap();
    assert!(store.grad_norm() > 0.0);
    assert!(lms.forward.store.grads_all_zero());
    assert!(lms.backward.store.grads_all_zero());
}
