//! Run directory layout and the manifest that ties its artifacts together.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wst_core::config::RunConfig;
use wst_core::eval::MetricReport;
use wst_core::lm::Direction;
use wst_core::lrp::LrpConfig;
use wst_core::text::corpus::Style;

pub const VOCAB: &str = "vocab.txt";
pub const CONFIG: &str = "config.toml";
pub const CLASSIFIER: &str = "classifier.ckpt";
pub const STAGE1: &str = "stage1.ckpt";
pub const STAGE2: &str = "stage2.ckpt";
pub const OUTPUTS: &str = "outputs.txt";
pub const RELEVANCE: &str = "relevance.jsonl";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";
pub const ABLATION: &str = "ablation.csv";

pub fn lm_file(style: Style, dir: Direction) -> String {
    format!("lm.{style}.{}.ckpt", dir.name())
}

/// A failure with a stable kind, printed as one `error: <kind>: <detail>` line.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub detail: String,
}

impl Failure {
    pub fn new(kind: &'static str, detail: impl Into<String>) -> Self {
        Failure {
            kind,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

impl std::error::Error for Failure {}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Config snapshot used by the most recent subcommand.
    pub config: String,
    pub config_hash: String,
    pub root_seed: u64,
    /// Seed of every component, as used.
    pub seeds: BTreeMap<String, u64>,
    /// Checkpoint file name to SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
    /// Other artifacts (vocabulary, logs, outputs) by file name.
    pub artifacts: BTreeMap<String, String>,
    /// Corpus split (`<dir>/<split>`) to content hash.
    pub corpora: BTreeMap<String, String>,
    /// Relevance settings after calibration, set by `train-stage1`.
    pub lrp: Option<LrpConfig>,
    pub metrics: Option<MetricReport>,
    pub variant: Option<String>,
}

pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn open(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| Failure::new("manifest", format!("{}: {e}", path.display())))?
        } else {
            RunManifest::default()
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an artifact an earlier subcommand must have produced.
    pub fn require(&self, name: &str, producer: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Failure::new(
                "missing-dependency",
                format!("{name} not found in {}; run `wst {producer}` first", self.root.display()),
            )
            .into())
        }
    }

    /// Resolves the config: an explicit file wins, then the run's snapshot,
    /// then the defaults. A seed override applies to every component.
    pub fn config(&self, explicit: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
        let snapshot = self.path(CONFIG);
        let source = explicit.or(snapshot.exists().then_some(snapshot.as_path()));
        let cfg = RunConfig::load_or_default(source)?;
        Ok(match seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }

    pub fn record_config(&mut self, cfg: &RunConfig) -> anyhow::Result<()> {
        std::fs::write(self.path(CONFIG), cfg.to_toml())?;
        self.manifest.config = cfg.to_toml();
        self.manifest.config_hash = cfg.hash();
        self.manifest.root_seed = cfg.stage1.seed;
        for (k, v) in [
            ("synthetic", cfg.synthetic.seed),
            ("classifier", cfg.classifier.seed),
            ("lm", cfg.lm.seed),
            ("stage1", cfg.stage1.seed),
            ("stage2", cfg.stage2.seed),
        ] {
            self.manifest.seeds.insert(k.into(), v);
        }
        Ok(())
    }

    pub fn record_checkpoint(&mut self, name: &str) -> anyhow::Result<()> {
        let h = sha256_file(&self.path(name))?;
        self.manifest.checkpoints.insert(name.into(), h);
        Ok(())
    }

    pub fn record_artifact(&mut self, name: &str) -> anyhow::Result<()> {
        let h = sha256_file(&self.path(name))?;
        self.manifest.artifacts.insert(name.into(), h);
        Ok(())
    }

    /// Writes the manifest after checking that every artifact it names is
    /// on disk with the recorded hash.
    pub fn save(&mut self) -> anyhow::Result<()> {
        let m = &self.manifest;
        for (name, hash) in m.checkpoints.iter().chain(&m.artifacts) {
            let p = self.root.join(name);
            let actual = sha256_file(&p)
                .map_err(|_| Failure::new("manifest", format!("{name} is referenced but missing")))?;
            if &actual != hash {
                return Err(Failure::new("manifest", format!("{name} changed on disk since it was recorded")).into());
            }
        }
        let text = serde_json::to_string_pretty(m)?;
        std::fs::write(self.path(MANIFEST), text + "\n")?;
        Ok(())
    }
}
