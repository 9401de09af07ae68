use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use wst_autograd::{Checkpoint, Stencil};
use wst_core::classifier::{train_classifier, TextCnn};
use wst_core::config::RunConfig;
use wst_core::eval::{bleu, transfer_accuracy, MetricReport};
use wst_core::gradsuite::{self, LOSSES};
use wst_core::lm::{train_lm, Direction, DirectionalLm, LmPair};
use wst_core::lrp::{sentence_relevance, LrpConfig};
use wst_core::seed::rng_for;
use wst_core::seq2seq::{greedy, Gate, Mode, Seq2Seq};
use wst_core::synthetic::{reference_path, SyntheticCorpus};
use wst_core::text::corpus::{read_lines, split_path, LabeledCorpus, RawCorpus, Style};
use wst_core::text::vocab::{Vocabulary, BOS, PAD};
use wst_core::training::{
    build_relevance_cache, evaluate_stage1, evaluate_transfer, run_ablation, train_stage1, train_stage2,
    AblationSetup, Stage1Config, Stage2Config, Stage2Context, Variant,
};

use crate::run::*;

pub const GRADCHECK_TOL: f64 = 1e-3;

pub struct Common<'a> {
    pub run: &'a Path,
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
}

impl Common<'_> {
    fn open(&self) -> anyhow::Result<(RunDir, RunConfig)> {
        let run = RunDir::open(self.run)?;
        let cfg = run.config(self.config, self.seed)?;
        Ok((run, cfg))
    }
}

// ---- loading --------------------------------------------------------------

fn load_vocab(run: &RunDir) -> anyhow::Result<Vocabulary> {
    Ok(Vocabulary::load(&run.require(VOCAB, "train-classifier")?)?)
}

fn load_classifier(run: &RunDir, vocab: &Vocabulary) -> anyhow::Result<TextCnn> {
    let ck = Checkpoint::read(&run.require(CLASSIFIER, "train-classifier")?)?;
    Ok(TextCnn::from_checkpoint(&ck, vocab)?)
}

fn load_lms(run: &RunDir, vocab: &Vocabulary) -> anyhow::Result<Vec<LmPair>> {
    let mut out = Vec::new();
    for style in [0u8, 1] {
        let load = |dir| -> anyhow::Result<DirectionalLm> {
            let ck = Checkpoint::read(&run.require(&lm_file(style, dir), "train-lm")?)?;
            Ok(DirectionalLm::from_checkpoint(&ck, vocab)?)
        };
        out.push(LmPair {
            forward: load(Direction::Forward)?,
            backward: load(Direction::Backward)?,
        });
    }
    Ok(out)
}

fn load_model(run: &RunDir, name: &str, producer: &str, vocab: &Vocabulary) -> anyhow::Result<Seq2Seq> {
    let ck = Checkpoint::read(&run.require(name, producer)?)?;
    Ok(Seq2Seq::from_checkpoint(&ck, vocab)?)
}

fn load_split(data: &Path, split: &str) -> anyhow::Result<RawCorpus> {
    for style in [0, 1] {
        let p = split_path(data, split, style);
        if !p.exists() {
            return Err(Failure::new("missing-data", format!("{} not found", p.display())).into());
        }
    }
    Ok(RawCorpus::load_split(data, split, false)?)
}

/// References aligned with [`load_split`] order: every file
/// `<split>.style{s}.ref{k}.txt` that exists, for k = 0, 1, ...
fn load_references(data: &Path, split: &str, corpus: &RawCorpus) -> anyhow::Result<Vec<Vec<String>>> {
    let mut refs: Vec<Vec<String>> = vec![Vec::new(); corpus.len()];
    for style in [0u8, 1] {
        let rows: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.labels[i] == style).collect();
        for k in 0.. {
            let p = reference_path(data, split, style, k);
            if !p.exists() {
                break;
            }
            let lines = read_lines(&p, false)?;
            if lines.len() != rows.len() {
                return Err(Failure::new(
                    "count-mismatch",
                    format!("{} has {} lines, expected {}", p.display(), lines.len(), rows.len()),
                )
                .into());
            }
            for (&i, l) in rows.iter().zip(lines) {
                refs[i].push(l);
            }
        }
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Failure::new(
            "missing-data",
            format!("no `{split}.style{{s}}.ref{{k}}.txt` references in {}", data.display()),
        )
        .into());
    }
    Ok(refs)
}

fn encode_refs(vocab: &Vocabulary, refs: &[Vec<String>]) -> Vec<Vec<Vec<usize>>> {
    refs.iter().map(|r| r.iter().map(|s| vocab.encode(s)).collect()).collect()
}

fn read_input(input: Option<&Path>) -> anyhow::Result<Vec<String>> {
    match input {
        Some(p) => Ok(read_lines(p, false)?),
        None => Ok(std::io::stdin()
            .lock()
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
            .collect()),
    }
}

fn max_len(cfg: &RunConfig) -> usize {
    cfg.eval.max_len.unwrap_or(cfg.stage2.max_len)
}

fn relevance_config(run: &RunDir, cfg: &RunConfig) -> LrpConfig {
    run.manifest.lrp.clone().unwrap_or_else(|| cfg.lrp.clone())
}

fn write_checkpoint(run: &mut RunDir, name: &str, ck: &Checkpoint) -> anyhow::Result<()> {
    ck.write(&run.path(name))?;
    run.record_checkpoint(name)
}

fn record_corpus(run: &mut RunDir, data: &Path, split: &str, c: &RawCorpus) {
    run.manifest
        .corpora
        .insert(format!("{}/{split}", data.display()), c.hash());
}

// ---- subcommands ------------------------------------------------------------

pub fn synth(out: &Path, config: Option<&Path>, seed: Option<u64>, test_size: usize) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let data = SyntheticCorpus::generate(&cfg.synthetic);
    if test_size >= data.len() {
        return Err(Failure::new("invalid", format!("test size {test_size} leaves no training data")).into());
    }
    std::fs::create_dir_all(out)?;
    let cut = data.len() - test_size;
    data.slice(0, cut).write_split(out, "train")?;
    data.slice(cut, data.len()).write_split(out, "test")?;
    println!("wrote {cut} training and {test_size} test sentences to {}", out.display());
    Ok(())
}

pub fn train_classifier_cmd(c: &Common, data: &Path, min_freq: usize) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let raw = load_split(data, "train")?;
    let vocab = Vocabulary::build(raw.lines.iter().map(String::as_str), min_freq)?;
    vocab.save(&run.path(VOCAB))?;
    let train = raw.encode(&vocab);
    let (model, report) = train_classifier(&train, vocab.len(), &cfg.classifier)?;
    run.record_config(&cfg)?;
    record_corpus(&mut run, data, "train", &raw);
    run.record_artifact(VOCAB)?;
    write_checkpoint(&mut run, CLASSIFIER, &model.checkpoint(&vocab, &cfg.hash(), cfg.classifier.seed))?;
    println!("vocabulary {} tokens; held-out accuracy {:.4}", vocab.len(), report.held_out_accuracy);
    if let Ok(test) = load_split(data, "test") {
        let acc = model.accuracy(&test.encode(&vocab))?;
        record_corpus(&mut run, data, "test", &test);
        println!("test accuracy {acc:.4}");
    }
    run.save()
}

pub fn train_lm_cmd(c: &Common, data: &Path) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let vocab = load_vocab(&run)?;
    let raw = load_split(data, "train")?;
    let train = raw.encode(&vocab);
    run.record_config(&cfg)?;
    record_corpus(&mut run, data, "train", &raw);
    for style in [0u8, 1] {
        for dir in [Direction::Forward, Direction::Backward] {
            let (lm, report) = train_lm(&train, vocab.len(), style, dir, &cfg.lm)?;
            let name = lm_file(style, dir);
            write_checkpoint(&mut run, &name, &lm.checkpoint(&vocab, &cfg.hash(), cfg.lm.seed))?;
            println!("{name}: held-out perplexity {:.3}", report.held_out_perplexity);
        }
    }
    run.save()
}

fn stage1_from_scratch(
    vocab: &Vocabulary,
    train: &LabeledCorpus,
    cache: &wst_core::training::RelevanceCache,
    cfg: &RunConfig,
    stage1: &Stage1Config,
) -> anyhow::Result<(Seq2Seq, wst_core::training::Stage1Report)> {
    let mut m = Seq2Seq::new(vocab.len(), &cfg.model, &mut rng_for(stage1.seed, "stage1/init"));
    let report = train_stage1(&mut m, train, cache, stage1)?;
    Ok((m, report))
}

fn write_log(run: &mut RunDir, name: &str, log: &wst_core::training::TrainLog) -> anyhow::Result<()> {
    log.write_csv(std::fs::File::create(run.path(name))?)?;
    run.record_artifact(name)
}

pub fn train_stage1_cmd(c: &Common, data: &Path) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let vocab = load_vocab(&run)?;
    let classifier = load_classifier(&run, &vocab)?;
    let raw = load_split(data, "train")?;
    let train = raw.encode(&vocab);
    let cache = build_relevance_cache(&classifier, &train, &cfg.lrp)?;
    let (model, report) = stage1_from_scratch(&vocab, &train, &cache, &cfg, &cfg.stage1)?;
    run.record_config(&cfg)?;
    record_corpus(&mut run, data, "train", &raw);
    run.manifest.lrp = Some(cache.lrp_config(&cfg.lrp));
    write_checkpoint(&mut run, STAGE1, &model.checkpoint(&vocab, "stage1", &cfg.hash(), cfg.stage1.seed))?;
    write_log(&mut run, "stage1.log.csv", &report.log)?;
    println!(
        "stage 1: {} steps over {} epochs; relevance eta {:.4}",
        report.steps, report.epochs_run, cache.eta
    );
    if let Ok(test_raw) = load_split(data, "test") {
        let test = test_raw.encode(&vocab);
        let test_cache = build_relevance_cache(&classifier, &test, &cache.lrp_config(&cfg.lrp))?;
        let e = evaluate_stage1(&model, &test, &test_cache, cfg.stage1.max_len)?;
        record_corpus(&mut run, data, "test", &test_raw);
        println!(
            "test reconstruction token accuracy {:.4}; relevance mse {:.4}",
            e.token_accuracy, e.relevance_mse
        );
    }
    run.save()
}

fn stage2_context(run: &RunDir, vocab: &Vocabulary, classifier: &TextCnn, lrp: LrpConfig) -> anyhow::Result<Stage2Context> {
    Ok(Stage2Context::new(classifier.clone(), load_lms(run, vocab)?, lrp)?)
}

fn write_outputs(run: &mut RunDir, vocab: &Vocabulary, outputs: &[Vec<usize>]) -> anyhow::Result<()> {
    let mut text = String::new();
    for o in outputs {
        text.push_str(&vocab.decode(o));
        text.push('\n');
    }
    std::fs::write(run.path(OUTPUTS), text)?;
    run.record_artifact(OUTPUTS)
}

fn write_metrics(run: &mut RunDir, m: &MetricReport) -> anyhow::Result<()> {
    std::fs::write(run.path(METRICS), m.to_json() + "\n")?;
    run.record_artifact(METRICS)?;
    run.manifest.metrics = Some(m.clone());
    Ok(())
}

pub fn train_stage2_cmd(c: &Common, data: &Path, variant: Variant) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let vocab = load_vocab(&run)?;
    let classifier = load_classifier(&run, &vocab)?;
    let raw = load_split(data, "train")?;
    let train = raw.encode(&vocab);
    let cache = build_relevance_cache(&classifier, &train, &cfg.lrp)?;
    let mut ctx = stage2_context(&run, &vocab, &classifier, cache.lrp_config(&cfg.lrp))?;
    let switches = variant.switches();
    let mut model = if switches.lxl_off {
        let s1 = Stage1Config {
            without_relevance_loss: true,
            ..cfg.stage1.clone()
        };
        stage1_from_scratch(&vocab, &train, &cache, &cfg, &s1)?.0
    } else {
        load_model(&run, STAGE1, "train-stage1", &vocab)?
    };
    let s2 = Stage2Config {
        switches,
        ..cfg.stage2.clone()
    };
    let report = train_stage2(&mut model, &mut ctx, &train, &cache, &s2)?;
    run.record_config(&cfg)?;
    record_corpus(&mut run, data, "train", &raw);
    run.manifest.lrp = Some(cache.lrp_config(&cfg.lrp));
    run.manifest.variant = Some(variant.name().to_string());
    write_checkpoint(&mut run, STAGE2, &model.checkpoint(&vocab, "stage2", &cfg.hash(), cfg.stage2.seed))?;
    write_log(&mut run, "stage2.log.csv", &report.log)?;
    println!(
        "stage 2 ({variant}): {} steps over {} epochs; {} empty outputs skipped",
        report.steps, report.epochs_run, report.skipped_sentences
    );
    if let Ok(test_raw) = load_split(data, "test") {
        if let Ok(refs) = load_references(data, "test", &test_raw) {
            let test = test_raw.encode(&vocab);
            let mode = if switches.nsc_off { Mode::Basic } else { Mode::Styled };
            let (m, outputs) = evaluate_transfer(
                &model,
                &classifier,
                &test,
                &encode_refs(&vocab, &refs),
                mode,
                s2.gate(),
                max_len(&cfg),
                cfg.eval.smoothing,
            )?;
            record_corpus(&mut run, data, "test", &test_raw);
            write_outputs(&mut run, &vocab, &outputs)?;
            write_metrics(&mut run, &m)?;
            println!("{m}");
        }
    }
    run.save()
}

pub fn transfer(
    c: &Common,
    input: Option<&Path>,
    target_style: Style,
    dump_relevance: bool,
    stage1_only: bool,
) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let vocab = load_vocab(&run)?;
    let (model, mode, gate) = if stage1_only {
        (load_model(&run, STAGE1, "train-stage1", &vocab)?, Mode::Basic, Gate::Predicted)
    } else {
        (load_model(&run, STAGE2, "train-stage2", &vocab)?, Mode::Styled, cfg.stage2.gate())
    };
    let lines = read_input(input)?;
    let mut out = std::io::stdout().lock();
    let mut text = String::new();
    for line in &lines {
        let src = vocab.encode(line);
        let (tokens, lambdas) = if src.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let g = greedy(&model, &[src], &[target_style as usize], mode, gate, max_len(&cfg))?;
            // Same tokens `decode` keeps, so dump rows line up with the sentence.
            g.tokens[0]
                .iter()
                .zip(&g.lambdas[0])
                .filter(|(&t, _)| t != PAD && t != BOS)
                .map(|(&t, &l)| (t, l))
                .unzip()
        };
        let sentence = vocab.decode(&tokens);
        if dump_relevance {
            writeln!(out, "# {sentence}")?;
            for (&t, l) in tokens.iter().zip(&lambdas) {
                writeln!(out, "{}\t{l:.4}", vocab.token(t))?;
            }
            writeln!(out)?;
        } else {
            writeln!(out, "{sentence}")?;
        }
        text.push_str(&sentence);
        text.push('\n');
    }
    std::fs::write(run.path(OUTPUTS), text)?;
    run.record_artifact(OUTPUTS)?;
    run.save()
}

pub fn evaluate(
    outputs: &Path,
    refs: &[PathBuf],
    classifier: &Path,
    vocab: Option<&Path>,
    target_style: Style,
    json: Option<&Path>,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => classifier.with_file_name(VOCAB),
    };
    let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("vocabulary {}", vocab_path.display()))?;
    let model = TextCnn::from_checkpoint(&Checkpoint::read(classifier)?, &vocab)?;
    // Blank output lines are kept: an empty transfer still counts.
    let hyp: Vec<String> = std::fs::read_to_string(outputs)?
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    let mut references: Vec<Vec<Vec<String>>> = vec![Vec::new(); hyp.len()];
    for r in refs {
        let text = std::fs::read_to_string(r)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != hyp.len() {
            return Err(Failure::new(
                "count-mismatch",
                format!("{} has {} lines, outputs have {}", r.display(), lines.len(), hyp.len()),
            )
            .into());
        }
        for (slot, l) in references.iter_mut().zip(lines) {
            slot.push(l.split_whitespace().map(String::from).collect());
        }
    }
    let hyp_tokens: Vec<Vec<String>> = hyp
        .iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    let encoded: Vec<Vec<usize>> = hyp.iter().map(|l| vocab.encode(l)).collect();
    let acc = transfer_accuracy(&model, &encoded, &vec![target_style; hyp.len()])?;
    let b = bleu(&hyp_tokens, &references, cfg.eval.smoothing)?;
    let report = MetricReport::new(acc, b, hyp.len(), cfg.eval.smoothing)?;
    println!("{report}");
    println!("{}", report.to_json());
    if let Some(p) = json {
        std::fs::write(p, report.to_json() + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RelevanceRecord<'a> {
    sentence: &'a str,
    target_style: Style,
    tokens: Vec<&'a str>,
    lambda: &'a [f64],
    raw: &'a [f64],
    eta: f64,
    epsilon: f64,
}

pub fn lrp_inspect(c: &Common, input: Option<&Path>, target_style: Option<Style>) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let vocab = load_vocab(&run)?;
    let classifier = load_classifier(&run, &vocab)?;
    let lrp = relevance_config(&run, &cfg);
    let lines = read_input(input)?;
    let mut out = std::io::stdout().lock();
    let mut jsonl = String::new();
    for line in lines.iter().filter(|l| !l.is_empty()) {
        let ids = vocab.encode(line);
        let target = match target_style {
            Some(s) => s,
            None => classifier.predict(&ids)?,
        };
        let w = sentence_relevance(&classifier, &ids, target as usize, &lrp)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        for ((t, l), r) in tokens.iter().zip(&w.lambda).zip(&w.raw) {
            writeln!(out, "{t}\t{l:.4}\t{r:.6}")?;
        }
        writeln!(out)?;
        let rec = RelevanceRecord {
            sentence: line,
            target_style: target,
            tokens,
            lambda: &w.lambda,
            raw: &w.raw,
            eta: w.eta,
            epsilon: w.epsilon,
        };
        jsonl.push_str(&serde_json::to_string(&rec)?);
        jsonl.push('\n');
    }
    std::fs::write(run.path(RELEVANCE), jsonl)?;
    run.record_artifact(RELEVANCE)?;
    run.save()
}

/// Returns whether every checked loss is within tolerance.
pub fn gradcheck(seed: u64, step: f64, central: bool, loss: Option<&str>, limit: Option<usize>) -> anyhow::Result<bool> {
    let stencil = if central { Stencil::Central } else { Stencil::FivePoint };
    let losses: Vec<&str> = match loss {
        Some(l) if LOSSES.contains(&l) => vec![l],
        Some(l) => {
            return Err(Failure::new("invalid", format!("unknown loss `{l}`; expected one of {}", LOSSES.join(", "))).into())
        }
        None => LOSSES.to_vec(),
    };
    let mut toy = gradsuite::toy(seed)?;
    let mut ok = true;
    for l in losses {
        let r = gradsuite::check_loss(&mut toy, l, step, stencil, limit)?;
        let pass = r.max_relative_error < GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{:<5} max relative error {:.3e} over {} coordinates {}",
            r.loss,
            r.max_relative_error,
            r.coordinates,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

pub fn ablate(c: &Common, data: &Path, variants: &[Variant]) -> anyhow::Result<()> {
    let (mut run, cfg) = c.open()?;
    let vocab = load_vocab(&run)?;
    let classifier = load_classifier(&run, &vocab)?;
    let base = load_model(&run, STAGE1, "train-stage1", &vocab)?;
    let raw = load_split(data, "train")?;
    let test_raw = load_split(data, "test")?;
    let refs = encode_refs(&vocab, &load_references(data, "test", &test_raw)?);
    let (train, test) = (raw.encode(&vocab), test_raw.encode(&vocab));
    let cache = build_relevance_cache(&classifier, &train, &cfg.lrp)?;
    let setup = AblationSetup {
        model_cfg: &cfg.model,
        stage1: &cfg.stage1,
        stage2: &cfg.stage2,
        train: &train,
        cache: &cache,
        base: &base,
        test: &test,
        references: &refs,
        smoothing: cfg.eval.smoothing,
    };
    let csv_path = run.path(ABLATION);
    let fresh = !csv_path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(&csv_path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(["variant", "acc", "bleu", "g2", "h2", "n", "stage2_steps", "config_hash"])?;
    }
    for &v in variants {
        let mut ctx = stage2_context(&run, &vocab, &classifier, cache.lrp_config(&cfg.lrp))?;
        let o = run_ablation(v, &setup, &mut ctx)?;
        let m = &o.metrics;
        w.write_record([
            v.name().to_string(),
            format!("{:.2}", m.acc),
            format!("{:.2}", m.bleu),
            format!("{:.2}", m.g2),
            format!("{:.2}", m.h2),
            m.n_sentences.to_string(),
            o.stage2.steps.to_string(),
            cfg.hash(),
        ])?;
        w.flush()?;
        println!("{v}\n{m}");
    }
    run.record_config(&cfg)?;
    record_corpus(&mut run, data, "train", &raw);
    record_corpus(&mut run, data, "test", &test_raw);
    run.record_artifact(ABLATION)?;
    run.save()
}
