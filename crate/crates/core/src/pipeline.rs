//! End-to-end preparation on a generated marker corpus: vocabulary,
//! classifier, relevance targets, language models and the Stage-1 model.

use std::time::{Duration, Instant};

use crate::classifier::{train_classifier, ClassifierReport, TextCnn};
use crate::config::RunConfig;
use crate::error::Result;
use crate::lm::{train_lm, Direction, LmPair, LmReport};
use crate::seed::rng_for;
use crate::seq2seq::Seq2Seq;
use crate::synthetic::SyntheticCorpus;
use crate::text::corpus::LabeledCorpus;
use crate::text::vocab::Vocabulary;
use crate::training::{
    build_relevance_cache, evaluate_stage1, train_stage1, RelevanceCache, Stage1Eval, Stage1Report, Stage2Context,
};

pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: LabeledCorpus,
    pub test: LabeledCorpus,
    /// Encoded references per test sentence.
    pub references: Vec<Vec<Vec<usize>>>,
    pub classifier: TextCnn,
    pub classifier_report: ClassifierReport,
    pub classifier_test_accuracy: f64,
    pub cache: RelevanceCache,
    pub test_cache: RelevanceCache,
    pub lms: Vec<LmPair>,
    pub lm_reports: Vec<LmReport>,
    pub stage1: Seq2Seq,
    pub stage1_report: Stage1Report,
    pub stage1_eval: Stage1Eval,
    pub timings: Vec<(&'static str, Duration)>,
}

impl Prepared {
    pub fn context(&self, cfg: &RunConfig) -> Result<Stage2Context> {
        let lrp = self.cache.lrp_config(&cfg.lrp);
        Stage2Context::new(self.classifier.clone(), self.lms.clone(), lrp)
    }

    pub fn elapsed(&self) -> Duration {
        self.timings.iter().map(|(_, d)| *d).sum()
    }
}

/// Splits the generated corpus into the last `test_size` sentences for
/// testing and the rest for training, then trains every frozen module and
/// the Stage-1 model. A given `stage1` model is evaluated instead of trained.
pub fn prepare_synthetic(cfg: &RunConfig, test_size: usize, stage1: Option<Seq2Seq>) -> Result<Prepared> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, Duration)>| {
        timings.push((name, clock.elapsed()));
        clock = Instant::now();
    };

    let data = SyntheticCorpus::generate(&cfg.synthetic);
    let n = data.len();
    let cut = n.saturating_sub(test_size);
    let (train_raw, test_raw) = (data.slice(0, cut), data.slice(cut, n));
    let vocab = Vocabulary::build(train_raw.corpus.lines.iter().map(String::as_str), 1)?;
    let train = train_raw.corpus.encode(&vocab);
    let test = test_raw.corpus.encode(&vocab);
    let references = test_raw
        .references
        .iter()
        .map(|refs| refs.iter().map(|r| vocab.encode(r)).collect())
        .collect();
    lap("data", &mut timings);

    let (classifier, classifier_report) = train_classifier(&train, vocab.len(), &cfg.classifier)?;
    let classifier_test_accuracy = classifier.accuracy(&test)?;
    lap("classifier", &mut timings);

    let cache = build_relevance_cache(&classifier, &train, &cfg.lrp)?;
    let test_cache = build_relevance_cache(&classifier, &test, &cache.lrp_config(&cfg.lrp))?;
    lap("relevance", &mut timings);

    let mut lms = Vec::new();
    let mut lm_reports = Vec::new();
    for style in [0u8, 1] {
        let (forward, rf) = train_lm(&train, vocab.len(), style, Direction::Forward, &cfg.lm)?;
        let (backward, rb) = train_lm(&train, vocab.len(), style, Direction::Backward, &cfg.lm)?;
        lms.push(LmPair { forward, backward });
        lm_reports.push(rf);
        lm_reports.push(rb);
    }
    lap("language models", &mut timings);

    let (stage1, stage1_report) = match stage1 {
        Some(m) => (m, Stage1Report::default()),
        None => {
            let mut rng = rng_for(cfg.stage1.seed, "stage1/init");
            let mut m = Seq2Seq::new(vocab.len(), &cfg.model, &mut rng);
            let r = train_stage1(&mut m, &train, &cache, &cfg.stage1)?;
            (m, r)
        }
    };
    let stage1_eval = evaluate_stage1(&stage1, &test, &test_cache, cfg.stage1.max_len)?;
    lap("stage1", &mut timings);

    Ok(Prepared {
        vocab,
        train,
        test,
        references,
        classifier,
        classifier_report,
        classifier_test_accuracy,
        cache,
        test_cache,
        lms,
        lm_reports,
        stage1,
        stage1_report,
        stage1_eval,
        timings,
    })
}
