//! Pipeline configuration: one TOML file, every hyperparameter defaulted,
//! secrets pulled from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sentidistill_core::sampling::Strategy;
use sentidistill_core::types::Metric;
use sentidistill_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMethod {
    Random,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    /// Teacher model served at base_url; used for all generation chat.
    pub teacher_model: String,
    /// Warmed-up student used for difficulty scoring. Should differ from
    /// the teacher; a warning is logged otherwise.
    pub scoring_model: String,
    pub embed_model: String,
    /// Environment variable holding the API key (never stored in config).
    pub api_key_env: String,
    /// Top-k logprobs requested per scored token.
    pub top_k: usize,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
    /// Optional scripted-response fixture for the mock backend.
    pub fixture_path: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: "http://localhost:8000/v1".into(),
            teacher_model: "teacher".into(),
            scoring_model: "student-warmup".into(),
            embed_model: "WhereIsAI/UAE-Large-V1".into(),
            api_key_env: "SENTIDISTILL_API_KEY".into(),
            top_k: 20,
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8000,
            timeout_secs: 120,
            fixture_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsConfig {
    /// Precomputed embedding sidecar; overrides the backend when set.
    pub sidecar_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributesConfig {
    /// Attributes mentioned fewer times than this are dropped from the pool.
    pub min_keep: u64,
    /// Enumerate at most this many corpus texts (all when unset).
    pub enumeration_limit: Option<usize>,
}

impl Default for AttributesConfig {
    fn default() -> Self {
        AttributesConfig {
            min_keep: 11,
            enumeration_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub damping: f64,
    pub percentile_rate: f64,
    pub max_iter: usize,
    pub stable_window: usize,
    pub perturb_preference: bool,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            damping: 0.9,
            percentile_rate: 0.5,
            max_iter: 1000,
            stable_window: 50,
            perturb_preference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionsConfig {
    pub demos_per_task: usize,
    /// Demo pools count as imbalanced when the largest label class exceeds
    /// this multiple of the smallest.
    pub balance_ratio: usize,
}

impl Default for InstructionsConfig {
    fn default() -> Self {
        InstructionsConfig {
            demos_per_task: 32,
            balance_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub n_pairs: usize,
    pub method: PairMethod,
    /// Collection progress is checkpointed every this many triples.
    pub checkpoint_every: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            n_pairs: 100_000,
            method: PairMethod::Random,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyConfig {
    /// ranking | perplexity | ifd | length
    pub metric: String,
    pub top_p: f64,
    pub epsilon_d: f64,
    pub warmup_n: usize,
    /// Externally predicted scores for proxy-compare.
    pub proxy_scores: Option<PathBuf>,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            metric: "ranking".into(),
            top_p: 0.95,
            epsilon_d: 1e-6,
            warmup_n: 5000,
            proxy_scores: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// prioritized | global | hard_only
    pub strategy: String,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            strategy: "prioritized".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// All stage outputs land here; relative paths resolve against the
    /// config file's directory.
    pub out_dir: PathBuf,
    /// Raw corpus consumed by the ingest stage.
    pub input_corpus: PathBuf,
    pub concurrency: usize,
    pub backend: BackendConfig,
    pub embeddings: EmbeddingsConfig,
    pub attributes: AttributesConfig,
    pub clustering: ClusteringConfig,
    pub instructions: InstructionsConfig,
    pub pairing: PairingConfig,
    pub difficulty: DifficultyConfig,
    pub filter: FilterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            out_dir: PathBuf::from("pipeline-out"),
            input_corpus: PathBuf::from("corpus_input.jsonl"),
            concurrency: 4,
            backend: BackendConfig::default(),
            embeddings: EmbeddingsConfig::default(),
            attributes: AttributesConfig::default(),
            clustering: ClusteringConfig::default(),
            instructions: InstructionsConfig::default(),
            pairing: PairingConfig::default(),
            difficulty: DifficultyConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

pub fn metric_from_str(s: &str) -> Result<Metric, Error> {
    match s {
        "ranking" => Ok(Metric::Ranking),
        "perplexity" => Ok(Metric::Perplexity),
        "ifd" => Ok(Metric::Ifd),
        "length" | "text_length" => Ok(Metric::TextLength),
        other => Err(Error::Config(format!(
            "unknown metric {other:?}; expected ranking, perplexity, ifd, or length"
        ))),
    }
}

impl PipelineConfig {
    /// Load from a TOML file; all paths in the result stay as written and
    /// are resolved against the file's directory via `resolve`.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: PipelineConfig = toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let c = &self.clustering;
        if !(0.5..1.0).contains(&c.damping) {
            return Err(Error::Config(format!(
                "clustering.damping must be in [0.5, 1), got {}",
                c.damping
            )));
        }
        if !(c.percentile_rate > 0.0 && c.percentile_rate < 1.0) {
            return Err(Error::Config(format!(
                "clustering.percentile_rate must be in (0,1), got {}",
                c.percentile_rate
            )));
        }
        let d = &self.difficulty;
        if !(d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "difficulty.top_p must be in (0,1], got {}",
                d.top_p
            )));
        }
        if d.epsilon_d < 0.0 {
            return Err(Error::Config("difficulty.epsilon_d must be >= 0".into()));
        }
        metric_from_str(&d.metric)?;
        self.filter
            .strategy
            .parse::<Strategy>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.backend.top_k == 0 {
            return Err(Error::Config("backend.top_k must be >= 1".into()));
        }
        if self.instructions.demos_per_task == 0 {
            return Err(Error::Config("instructions.demos_per_task must be >= 1".into()));
        }
        if self.instructions.balance_ratio == 0 {
            return Err(Error::Config("instructions.balance_ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn metric(&self) -> Result<Metric, Error> {
        metric_from_str(&self.difficulty.metric)
    }

    pub fn strategy(&self) -> Result<Strategy, Error> {
        self.filter.strategy.parse()
    }
}

/// Resolve a configured path against the config file's directory.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
