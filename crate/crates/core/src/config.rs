//! Run configuration: a TOML file with an explicit schema version.
//!
//! ```toml
//! schema_version = 1
//! run_name = "demo"
//! seed = 0
//!
//! [data]
//! platforms = ["platform0", "platform1", "platform2"]
//!
//! [detector.encoder]
//! n_layers = 2
//! d_model = 32
//! ```
//!
//! Every section and key is optional except `schema_version`; unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cue::{SelectorMode, DEFAULT_SELECTOR_HIDDEN};
use crate::data::{CsvColumns, Format, SplitSpec};
use crate::detector::CueVariant;
use crate::encoder::EncoderConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::{ErrorDimension, ErrorScope};
use crate::schedule::TrainSchedule;
use crate::synth::{HateSpec, LexiconSpec, SplitSizes};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the directory that run directories live in.
pub const OUTPUT_ROOT_ENV: &str = "CUEGUARD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default = "default_run_name")]
    pub run_name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub cue: CueSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_run_name() -> String {
    "run".into()
}

/// Where corpora live inside the run directory and how raw files are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Platform corpora are read from `<dir>/<platform>/{train,val,test}.jsonl`.
    pub dir: String,
    pub platforms: Vec<String>,
    /// Single corpus with `hate_target` metadata, for cross-target runs.
    pub target_corpus: String,
    pub targets: Vec<String>,
    /// Raw input format for `ingest`.
    pub format: Format,
    pub csv: CsvColumns,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    /// Upper bound on vocabulary size (specials included) when building one
    /// from corpora.
    pub vocab_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let split = SplitSpec::default();
        DataSection {
            dir: "data".into(),
            platforms: (0..3).map(crate::synth::platform_name).collect(),
            target_corpus: "data/targets.jsonl".into(),
            targets: vec!["migrants".into(), "lgbtq".into()],
            format: Format::Jsonl,
            csv: CsvColumns::default(),
            split_train: split.ratios.0,
            split_val: split.ratios.1,
            split_test: split.ratios.2,
            vocab_size: 30_000,
        }
    }
}

/// Sizes and knobs for `gen-synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub lexicon: LexiconSpec,
    pub hate: HateSpec,
    pub sizes: SplitSizes,
    pub sentiment_train: usize,
    pub sentiment_val: usize,
    pub aggression_train: usize,
    pub aggression_val: usize,
    pub per_target: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            lexicon: LexiconSpec::default(),
            hate: HateSpec::shifted(),
            sizes: SplitSizes::default(),
            sentiment_train: 3000,
            sentiment_val: 300,
            aggression_train: 2000,
            aggression_val: 300,
            per_target: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CueSection {
    pub encoder: EncoderConfig,
    pub schedule: TrainSchedule,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    PerPosition,
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub encoder: EncoderConfig,
    pub selector: SelectorKind,
    pub selector_hidden: usize,
    pub variant: CueVariant,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            encoder: EncoderConfig::desk(),
            selector: SelectorKind::PerPosition,
            selector_hidden: DEFAULT_SELECTOR_HIDDEN,
            variant: CueVariant::Full,
        }
    }
}

impl DetectorSection {
    pub fn selector_mode(&self) -> SelectorMode {
        match self.selector {
            SelectorKind::PerPosition => SelectorMode::PerPosition,
            SelectorKind::Concatenated => SelectorMode::Concatenated {
                max_len: self.encoder.max_len,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Training seeds for `ablate`.
    pub seeds: Vec<u64>,
    pub error_dimension: ErrorDimension,
    /// Score every annotated record in `errors`, not only hateful ones.
    pub all_records: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: vec![0, 1, 2, 3, 4],
            error_dimension: ErrorDimension::HateType,
            all_records: false,
        }
    }
}

impl EvalSection {
    pub fn error_scope(&self) -> ErrorScope {
        if self.all_records {
            ErrorScope::AllRecords
        } else {
            ErrorScope::HatefulOnly
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; also returns its SHA-256 (hex).
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        let cfg = Self::parse(&text)?;
        Ok((cfg, hex::encode(Sha256::digest(text.as_bytes()))))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            Config,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        ensure!(
            !self.run_name.is_empty() && !self.run_name.contains(['/', '\\']),
            Config,
            "run_name must be a non-empty single path component"
        );
        self.cue.encoder.validate()?;
        self.detector.encoder.validate()?;
        self.cue.schedule.validate()?;
        self.schedule.validate()?;
        self.synth.hate.validate()?;
        self.split()?;
        ensure!(
            self.cue.encoder.max_len == self.detector.encoder.max_len,
            Config,
            "cue and detector encoders must share max_len ({} vs {})",
            self.cue.encoder.max_len,
            self.detector.encoder.max_len
        );
        ensure!(self.detector.selector_hidden > 0, Config, "selector_hidden must be positive");
        Ok(())
    }

    pub fn split(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.data.split_train, self.data.split_val, self.data.split_test, self.seed)
    }
}

/// The directory a run writes into: `<root>/<run_name>`, where `root` is
/// the explicit override, else `$CUEGUARD_OUTPUT_ROOT`, else `.`.
pub fn run_dir(config: &Config, root: Option<&Path>) -> PathBuf {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    root.join(&config.run_name)
}
