//! Domain records shared by all pipeline stages.
//!
//! Serialized field order is part of the on-disk contract: records are
//! persisted as one JSON object per line and content-hashed byte for byte,
//! so struct field order below must not be reshuffled casually.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Origin of a user text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Imdb,
    Yelp,
    Amazon,
    Twitter,
    Other,
}

impl TextSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            TextSource::Imdb => "imdb",
            TextSource::Yelp => "yelp",
            TextSource::Amazon => "amazon",
            TextSource::Twitter => "twitter",
            TextSource::Other => "other",
        }
    }
}

/// One raw user text from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserText {
    pub id: String,
    pub text: String,
    pub source: TextSource,
}

/// A single attribute occurrence parsed from an enumeration response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMention {
    /// Stable mention id, `{text_id}#{ordinal}`.
    pub id: String,
    /// Canonical (normalized) attribute name.
    pub name: String,
    pub description: String,
    pub value: String,
    /// Corpus entry this mention was extracted from.
    pub text_id: String,
}

/// Aggregated counts for one canonical attribute name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub count: u64,
    pub mention_ids: Vec<String>,
}

/// Frequency-thresholded attribute pool keyed by canonical name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributePool {
    pub entries: BTreeMap<String, PoolEntry>,
}

impl AttributePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, name: &str) -> u64 {
        self.entries.get(name).map(|e| e.count).unwrap_or(0)
    }
}

/// A cluster of semantically equivalent attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perspective {
    pub id: u32,
    /// The member with the highest pool count (ties broken lexicographically).
    pub name: String,
    /// Canonical attribute names, sorted.
    pub members: Vec<String>,
    /// Canonical name of the elected exemplar attribute.
    pub exemplar: String,
}

/// Category of a generated task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Classification,
    ScoringRegression,
    Extraction,
    StructuredOutput,
    OpenEnded,
}

/// A task brainstormed for one analytical perspective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub perspective_id: u32,
    pub name: String,
    pub description: String,
    pub task_type: TaskType,
}

/// A single input/output demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

/// A full instruction: rewritten task body plus its demonstration pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub task: Task,
    pub body: String,
    pub demos: Vec<Demonstration>,
    /// Set when a categorical demo pool could not be balanced within budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub imbalanced: bool,
}

/// One (instruction, demos, user text, response) distillation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillTriple {
    pub id: String,
    pub instruction_id: String,
    /// Indices into the instruction's demo pool, in sampled order (1..=8 entries).
    pub demo_ids: Vec<u32>,
    pub text_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// SHA-256 of the rendered prompt bytes.
    pub prompt_hash: String,
    /// Set when the teacher returned an empty response; excluded from export.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

/// Which difficulty metric produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ranking,
    Perplexity,
    Ifd,
    TextLength,
    Proxy,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Ranking => "ranking",
            Metric::Perplexity => "perplexity",
            Metric::Ifd => "ifd",
            Metric::TextLength => "text_length",
            Metric::Proxy => "proxy",
        }
    }
}

/// Per-triple difficulty score with optional per-token breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub triple_id: String,
    pub metric: Metric,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scores: Option<Vec<f64>>,
    /// Anomalies observed while scoring, e.g. "top_k_saturated",
    /// "all_below_epsilon", "tokenizer_fallback".
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Record of one completed pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub completed_at: String,
    pub duration_ms: u64,
}

/// Stage-by-stage record of a pipeline run, persisted as manifest.json.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stages: Vec<StageRecord>,
}
