use wst_autograd::{OptimizerState, Trace, UpdateRule};
use wst_core::classifier::{ClassifierConfig, TextCnn};
use wst_core::lm::{DirectionalLm, Direction, LmConfig, LmPair};
use wst_core::lrp::LrpConfig;
use wst_core::seed::rng_for;
use wst_core::seq2seq::{greedy, Gate, Mode, ModelConfig, Seq2Seq};
use wst_core::synthetic::{SyntheticConfig, SyntheticCorpus};
use wst_core::text::batch::Batch;
use wst_core::text::corpus::LabeledCorpus;
use wst_core::text::vocab::{Vocabulary, EOS};
use wst_core::training::*;

struct Fixture {
    corpus: LabeledCorpus,
    model: Seq2Seq,
    ctx: Stage2Context,
    cache: RelevanceCache,
}

fn fixture() -> Fixture {
    let data = SyntheticCorpus::generate(&SyntheticConfig {
        sentences: 40,
        seed: 3,
        ..Default::default()
    });
    let vocab = Vocabulary::build(data.corpus.lines.iter().map(String::as_str), 1).unwrap();
    let corpus = data.corpus.encode(&vocab);
    let ccfg = ClassifierConfig {
        embed_dim: 6,
        filters: 4,
        widths: vec![2, 3],
        ..Default::default()
    };
    let classifier = TextCnn::new(vocab.len(), &ccfg, &mut rng_for(1, "clf"));
    let lcfg = LmConfig {
        embed_dim: 6,
        hidden: 6,
        ..Default::default()
    };
    let lms = (0..2u8)
        .map(|s| LmPair {
            forward: DirectionalLm::new(vocab.len(), s, Direction::Forward, &lcfg),
            backward: DirectionalLm::new(vocab.len(), s, Direction::Backward, &lcfg),
        })
        .collect();
    let lrp = LrpConfig {
        eta: 2.0,
        epsilon: 0.05,
        ..Default::default()
    };
    let cache = build_relevance_cache(&classifier, &corpus, &lrp).unwrap();
    let mcfg = ModelConfig {
        embed_dim: 8,
        hidden: 8,
        attn_dim: 8,
        style_dim: 4,
        style_hidden: 8,
    };
    let model = Seq2Seq::new(vocab.len(), &mcfg, &mut rng_for(2, "model"));
    let ctx = Stage2Context::new(classifier, lms, lrp).unwrap();
    Fixture {
        corpus,
        model,
        ctx,
        cache,
    }
}

fn randomize_style_output(model: &mut Seq2Seq) {
    let mut rng = rng_for(9, "style-out");
    for id in [model.style_w2, model.style_b2] {
        let v = model.store.value_mut(id);
        for x in v.data.iter_mut() {
            *x = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
    }
}

fn style_batch(f: &Fixture, style: u8, n: usize) -> Vec<usize> {
    (0..f.corpus.len()).filter(|&i| f.corpus.labels[i] == style).take(n).collect()
}

fn stage1_batch(f: &Fixture, idx: &[usize]) -> Batch {
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| f.corpus.sentences[i].as_slice()).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| f.corpus.labels[i]).collect();
    Batch::new(&seqs, &labels, 16).unwrap()
}

#[test]
fn stage1_total_is_sum_of_terms() {
    let f = fixture();
    let idx = [0, 1, 2, 3];
    let batch = stage1_batch(&f, &idx);
    let targets: Vec<&[f64]> = idx.iter().map(|&i| f.cache.lambda[i].as_slice()).collect();
    let mut t = Trace::new();
    let terms = stage1_loss(&f.model, &mut t, &batch, &batch.src, &targets, true).unwrap();
    let (l, total) = (terms.breakdown, terms.total);
    assert!((l.total - l.stage1_total()).abs() < 1e-12);
    assert_eq!(t.scalar(total), l.total);
    assert!(l.l_sr > 0.0 && l.l_xl > 0.0);
}

#[test]
fn oracle_relevance_targets_give_zero_relevance_loss() {
    let f = fixture();
    let idx = [4, 5, 6];
    let batch = stage1_batch(&f, &idx);
    // Read the head's own predictions under teacher forcing.
    let mut t = Trace::new();
    let enc = f.model.encode(&mut t, &batch.src, &batch.lengths).unwrap();
    let mut h = enc.final_state;
    let mut pred = vec![Vec::new(); idx.len()];
    for j in 0..batch.width() {
        let e = f.model.embed_ids(&mut t, &batch.dec_input_column(j)).unwrap();
        let s = f.model.decode_step(&mut t, e, h, &enc, Mode::Basic, None, Gate::Predicted).unwrap();
        for (b, p) in pred.iter_mut().enumerate() {
            p.push(t.value(s.lambda).data[b]);
        }
        h = s.h_rev;
    }
    let targets: Vec<&[f64]> = pred.iter().map(Vec::as_slice).collect();
    let mut t = Trace::new();
    let terms = stage1_loss(&f.model, &mut t, &batch, &batch.src, &targets, true).unwrap();
    assert_eq!(terms.breakdown.l_xl, 0.0);
}

#[test]
fn relevance_head_gradient_comes_only_from_relevance_term() {
    let mut f = fixture();
    let idx = [0, 1];
    let batch = stage1_batch(&f, &idx);
    let targets: Vec<&[f64]> = idx.iter().map(|&i| f.cache.lambda[i].as_slice()).collect();
    for with in [false, true] {
        f.model.store.zero_grad();
        let mut t = Trace::new();
        let terms = stage1_loss(&f.model, &mut t, &batch, &batch.src, &targets, with).unwrap();
        t.backward_into(terms.total, &mut [&mut f.model.store]).unwrap();
        let head_zero = [f.model.lam_w, f.model.lam_b, f.model.lam_v, f.model.lam_c]
            .iter()
            .all(|&id| f.model.store.grad(id).iter().all(|g| *g == 0.0));
        assert_eq!(head_zero, !with);
    }
}

#[test]
fn stage1_training_lowers_loss() {
    let mut f = fixture();
    let cfg = Stage1Config {
        epochs: 4,
        batch_size: 8,
        learning_rate: 1e-2,
        held_out: 0.0,
        ..Default::default()
    };
    let report = train_stage1(&mut f.model, &f.corpus, &f.cache, &cfg).unwrap();
    let first = report.log.rows.first().unwrap().total;
    let last = report.log.rows.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(report.log.rows.len(), report.steps);
}

#[test]
fn missing_cache_is_rebuilt() {
    let f = fixture();
    let c = ensure_cache(None, &f.ctx.classifier, &f.corpus, &f.ctx.lrp).unwrap();
    assert_eq!(c, f.cache);
    let stale = RelevanceCache {
        classifier_hash: "other".into(),
        ..f.cache.clone()
    };
    let c = ensure_cache(Some(stale), &f.ctx.classifier, &f.corpus, &f.ctx.lrp).unwrap();
    assert_eq!(c.classifier_hash, f.cache.classifier_hash);
}

fn one_step(f: &mut Fixture, cfg: &Stage2Config, source: u8) -> Stage2Step {
    let idx = style_batch(f, source, 3);
    let mut opt = OptimizerState::new(1e-3, 1.0, UpdateRule::adam()).unwrap();
    stage2_step(&mut f.model, &mut opt, &mut f.ctx, &f.corpus, &f.cache, &idx, source, cfg, 0, 0.5).unwrap()
}

#[test]
fn stage2_total_reproduces_weighted_sum() {
    let mut f = fixture();
    randomize_style_output(&mut f.model);
    for (alpha, beta, gamma) in [(1.0, 2.0, 0.5), (0.3, 0.0, 1.7)] {
        let cfg = Stage2Config {
            alpha,
            beta,
            gamma,
            ..Default::default()
        };
        let s = one_step(&mut f, &cfg, 0);
        assert!(s.skipped < 3);
        let l = s.loss;
        assert!((l.total - l.stage2_total(alpha, beta, gamma)).abs() < 1e-12, "{l:?}");
    }
}

#[test]
fn frozen_modules_receive_no_gradient() {
    let mut f = fixture();
    randomize_style_output(&mut f.model);
    let before = f.ctx.classifier.store.content_hash();
    for source in [0, 1] {
        one_step(&mut f, &Stage2Config::default(), source);
        assert!(f.ctx.frozen_grads_zero());
    }
    assert_eq!(f.ctx.classifier.store.content_hash(), before);
}

#[test]
fn fixed_gate_is_logged_as_one() {
    let mut f = fixture();
    let cfg = Stage2Config {
        switches: Switches {
            gate_off: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let s = one_step(&mut f, &cfg, 1);
    assert_eq!((s.gate_min, s.gate_max), (1.0, 1.0));
}

#[test]
fn zero_relevance_makes_content_terms_agree() {
    let mut f = fixture();
    randomize_style_output(&mut f.model);
    // sigmoid saturates to exactly 0
    f.model.store.value_mut(f.model.lam_c).data[0] = -1e4;
    let idx = style_batch(&f, 0, 3);
    let src: Vec<Vec<usize>> = idx.iter().map(|&i| f.corpus.sentences[i].clone()).collect();
    let zeros: Vec<Vec<f64>> = src.iter().map(|s| vec![0.0; s.len()]).collect();
    let lx: Vec<&[f64]> = zeros.iter().map(Vec::as_slice).collect();
    let noise = step_noise(5, 0, src.len(), f.model.vocab_size, 16);
    let mut cps = Vec::new();
    for prime in [false, true] {
        let cfg = Stage2Config {
            switches: Switches {
                lcp_prime: prime,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut t = Trace::new();
        let terms = stage2_loss(&f.model, &f.ctx, &mut t, &src, &lx, 0, &cfg, 0.5, Some(&noise)).unwrap();
        cps.push(terms.breakdown.l_cp);
    }
    assert!((cps[0] - cps[1]).abs() <= 1e-12 * cps[1].abs().max(1.0), "{cps:?}");
}

#[test]
fn sentences_without_words_are_skipped() {
    let mut f = fixture();
    let eos_bias = &mut f.model.store.value_mut(f.model.out_b).data;
    eos_bias[EOS] = 1e3;
    let before = f.model.store.content_hash();
    let s = one_step(&mut f, &Stage2Config::default(), 0);
    assert_eq!(s.skipped, 3);
    assert_eq!(s.loss.total, 0.0);
    assert_eq!(f.model.store.content_hash(), before);
}

#[test]
fn stage2_starts_at_stage1_decoding() {
    let mut f = fixture();
    let cfg = Stage1Config {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-2,
        held_out: 0.0,
        ..Default::default()
    };
    train_stage1(&mut f.model, &f.corpus, &f.cache, &cfg).unwrap();
    let src: Vec<Vec<usize>> = f.corpus.sentences[..10].to_vec();
    let styles: Vec<usize> = f.corpus.labels[..10].iter().map(|l| 1 - *l as usize).collect();
    let basic = greedy(&f.model, &src, &styles, Mode::Basic, Gate::Predicted, 16).unwrap();
    let styled = greedy(&f.model, &src, &styles, Mode::Styled, Gate::Predicted, 16).unwrap();
    assert_eq!(basic.tokens, styled.tokens);
    // Forcing the gate to zero recovers basic decoding for any style component.
    randomize_style_output(&mut f.model);
    let gated = greedy(&f.model, &src, &styles, Mode::Styled, Gate::Fixed(0.0), 16).unwrap();
    assert_eq!(basic.tokens, gated.tokens);
}

#[test]
fn stage2_is_deterministic() {
    let run = || {
        let mut f = fixture();
        randomize_style_output(&mut f.model);
        let cfg = Stage2Config {
            epochs: 1,
            max_steps: Some(3),
            batch_size: 4,
            optimizer: "adam".into(),
            learning_rate: 1e-3,
            held_out: 0.0,
            ..Default::default()
        };
        let r = train_stage2(&mut f.model, &mut f.ctx, &f.corpus, &f.cache, &cfg).unwrap();
        (r.log, f.model.store.content_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn finetuning_minus_only_moves_style_component() {
    let mut f = fixture();
    let snapshot = f.model.store.clone();
    let cfg = Stage2Config {
        epochs: 1,
        max_steps: Some(2),
        batch_size: 4,
        optimizer: "adam".into(),
        learning_rate: 1e-2,
        held_out: 0.0,
        switches: Switches {
            freeze_stage1: true,
            ..Default::default()
        },
        ..Default::default()
    };
    train_stage2(&mut f.model, &mut f.ctx, &f.corpus, &f.cache, &cfg).unwrap();
    let mut moved_style = false;
    for (id, p) in f.model.store.iter() {
        let same = p.tensor.values == snapshot.param(id).tensor.values;
        if p.name.starts_with("style.") {
            moved_style |= !same;
        } else {
            assert!(same, "{} changed", p.name);
        }
    }
    assert!(moved_style);
}

#[test]
fn batches_alternate_source_styles() {
    let pools = [vec![0, 2, 4, 6, 8], vec![1, 3, 5]];
    let b = epoch_batches(&pools, 2, 1, 0);
    let styles: Vec<u8> = b.iter().map(|(s, _)| *s).collect();
    assert_eq!(styles, vec![0, 1, 0, 1, 0]);
    let mut seen: Vec<usize> = b.iter().flat_map(|(_, i)| i.clone()).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3, 4, 5, 6, 8]);
}

#[test]
fn temperature_anneals_linearly() {
    let cfg = Stage2Config::default();
    assert_eq!(cfg.tau_at(0, 5), 0.5);
    assert!((cfg.tau_at(2, 5) - 0.3).abs() < 1e-12);
    assert!((cfg.tau_at(4, 5) - 0.1).abs() < 1e-12);
}

#[test]
fn negative_weights_rejected() {
    let cfg = Stage2Config {
        gamma: -0.1,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}
