//! One TOML file with a section per stage. Stage seeds that are not set
//! explicitly are derived from the root `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_CHUNK_SIZE;
use crate::encoder::{EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::CalibrationConfig;
use crate::hashing::derive_seed;
use crate::lexical_index::{DEFAULT_B, DEFAULT_K1};
use crate::provider::{HttpConfig, HttpProvider, LogprobProvider, RecallRegime, ReplayProvider, SyntheticProvider};
use crate::retrieval::{TaskTag, DEFAULT_TOP_M};
use crate::sampling::SamplingConfig;
use crate::synth::SynthConfig;
use crate::uncertainty::SpanConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub paths: Vec<PathBuf>,
    pub format: String,
    pub chunk_size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            paths: Vec::new(),
            format: "jsonl".into(),
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub k1: f64,
    pub b: f64,
}

impl Default for IndexSection {
    fn default() -> Self {
        IndexSection {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Synthetic,
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    pub seed: u64,
    /// Synthetic provider: repeated words become predictable.
    pub recall: bool,
    /// Replay cache file. With `http`, responses are recorded into it.
    pub cache: Option<PathBuf>,
    /// Model name used in cache keys and requests.
    pub model: Option<String>,
    /// Overrides `URAG_API_URL`.
    pub url: Option<String>,
    pub max_in_flight: usize,
    pub attempts: usize,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: ProviderKind::Synthetic,
            seed: 0,
            recall: true,
            cache: None,
            model: None,
            url: None,
            max_in_flight: 4,
            attempts: 3,
        }
    }
}

impl ProviderSection {
    pub fn build(&self) -> Result<Box<dyn LogprobProvider>> {
        Ok(match self.kind {
            ProviderKind::Synthetic => {
                let p = SyntheticProvider::new(self.seed);
                if self.recall {
                    Box::new(p.with_recall(RecallRegime::default()))
                } else {
                    Box::new(p)
                }
            }
            ProviderKind::Replay => {
                let path = self
                    .cache
                    .as_deref()
                    .ok_or_else(|| Error::Config("provider.kind = \"replay\" requires provider.cache".into()))?;
                let model = self
                    .model
                    .clone()
                    .ok_or_else(|| Error::Config("provider.kind = \"replay\" requires provider.model".into()))?;
                Box::new(ReplayProvider::open(path, model)?)
            }
            ProviderKind::Http => {
                let model = self
                    .model
                    .clone()
                    .ok_or_else(|| Error::Config("provider.kind = \"http\" requires provider.model".into()))?;
                let mut cfg = HttpConfig::new(self.url.clone().unwrap_or_default(), model).with_env();
                if let Some(u) = &self.url {
                    cfg.url = u.clone();
                }
                cfg.max_in_flight = self.max_in_flight;
                cfg.attempts = self.attempts;
                let http: Box<dyn LogprobProvider> = Box::new(HttpProvider::new(cfg)?);
                match &self.cache {
                    Some(path) => Box::new(ReplayProvider::recording(path, http)?),
                    None => http,
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub m: usize,
    pub task: TaskTag,
    /// Template file overriding the bundled one for `task`.
    pub template: Option<PathBuf>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            m: DEFAULT_TOP_M,
            task: TaskTag::MultihopQa,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub index: IndexSection,
    pub provider: ProviderSection,
    pub sampling: SamplingConfig,
    pub span: SpanConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalSection,
    pub calibration: CalibrationConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    /// Defaults with every stage seed derived from `seed`.
    pub fn with_root_seed(seed: u64) -> Self {
        let mut c = PipelineConfig {
            seed,
            ..Default::default()
        };
        c.derive_seeds(&toml::Table::new());
        c
    }

    fn derive_seeds(&mut self, raw: &toml::Table) {
        let explicit = |section: &str| {
            raw.get(section)
                .and_then(|v| v.as_table())
                .is_some_and(|t| t.contains_key("seed"))
        };
        let root = self.seed;
        // TOML integers are signed 64-bit
        let derive_seed = |root, label| derive_seed(root, label) >> 1;
        if !explicit("sampling") {
            self.sampling.seed = derive_seed(root, "sampling");
        }
        if !explicit("train") {
            self.train.seed = derive_seed(root, "train");
        }
        if !explicit("provider") {
            self.provider.seed = derive_seed(root, "provider");
        }
        if !explicit("synth") {
            self.synth.seed = derive_seed(root, "synth");
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_toml_with_seed(s, None)
    }

    /// Parse with the root seed optionally overridden; stage seeds not pinned
    /// in `s` follow the override.
    pub fn from_toml_with_seed(s: &str, seed: Option<u64>) -> Result<Self> {
        let mut raw: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(seed) = seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} exceeds i64 range")))?;
            raw.insert("seed".into(), toml::Value::Integer(seed));
        }
        let mut cfg: PipelineConfig = raw
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.derive_seeds(&raw);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_seed(path, None)
    }

    pub fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_seed(&s, seed)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.chunk_size == 0 {
            return Err(Error::Config("corpus.chunk_size must be >= 1".into()));
        }
        self.corpus.format.parse::<crate::corpus::CorpusFormat>().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.index.k1 >= 0.0) || !(0.0..=1.0).contains(&self.index.b) {
            return Err(Error::Config("index.k1 must be >= 0 and index.b in [0,1]".into()));
        }
        if self.retrieval.m == 0 {
            return Err(Error::Config("retrieval.m must be >= 1".into()));
        }
        self.sampling.validate()?;
        self.span.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.train.learning_rate
            )));
        }
        self.calibration.validate()?;
        self.synth.validate()
    }
}
