//! Pipeline manifest: per-stage completion records enabling resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::jsonl::file_hash;
use crate::types::{PipelineManifest, StageRecord};

/// Canonical stage order; manifest records are kept sorted by it.
pub const STAGE_ORDER: &[&str] = &[
    "ingest",
    "enumerate",
    "pool",
    "cluster",
    "tasks",
    "instructions",
    "demos",
    "pair",
    "collect",
    "warmup-split",
    "score",
    "filter",
    "export",
    "proxy-compare",
    "report",
];

pub fn stage_index(stage: &str) -> Option<usize> {
    STAGE_ORDER.iter().position(|s| *s == stage)
}

pub fn load_manifest(path: &Path) -> Result<PipelineManifest> {
    if !path.exists() {
        return Ok(PipelineManifest::default());
    }
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_manifest(path: &Path, manifest: &PipelineManifest) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hash a set of files into a name -> sha256 map. Missing files are skipped.
pub fn hash_files(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for name in names {
        let path = dir.join(name);
        if path.exists() {
            out.insert(name.to_string(), file_hash(&path)?);
        }
    }
    Ok(out)
}

impl PipelineManifest {
    pub fn record_for(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Insert or replace the record for a stage, keeping canonical order.
    pub fn upsert(&mut self, record: StageRecord) {
        self.stages.retain(|r| r.stage != record.stage);
        self.stages.push(record);
        self.stages
            .sort_by_key(|r| stage_index(&r.stage).unwrap_or(usize::MAX));
    }

    /// True when the stage already completed with this exact config and its
    /// recorded inputs/outputs still match what is on disk. Inputs that the
    /// stage itself rewrites are covered by the output check instead.
    pub fn is_completed_no_op(
        &self,
        stage: &str,
        config: &serde_json::Value,
        current_inputs: &BTreeMap<String, String>,
        current_outputs: &BTreeMap<String, String>,
    ) -> bool {
        let Some(rec) = self.record_for(stage) else {
            return false;
        };
        if &rec.config != config {
            return false;
        }
        for (name, hash) in &rec.output_hashes {
            if current_outputs.get(name) != Some(hash) {
                return false;
            }
        }
        for (name, hash) in &rec.input_hashes {
            if rec.output_hashes.contains_key(name) {
                continue;
            }
            if current_inputs.get(name) != Some(hash) {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn record(stage: &str, config: serde_json::Value) -> StageRecord {
        StageRecord {
            stage: stage.into(),
            config,
            input_hashes: BTreeMap::from([("in.jsonl".into(), "h-in".into())]),
            output_hashes: BTreeMap::from([("out.jsonl".into(), "h-out".into())]),
            seed: 42,
            completed_at: "2026-01-01T00:00:00Z".into(),
            duration_ms: 1,
        }
    }

    #[test]
    fn noop_requires_matching_config_and_hashes() {
        let mut m = PipelineManifest::default();
        m.upsert(record("pool", json!({"min_keep": 11})));

        let inputs = BTreeMap::from([("in.jsonl".to_string(), "h-in".to_string())]);
        let outputs = BTreeMap::from([("out.jsonl".to_string(), "h-out".to_string())]);
        assert!(m.is_completed_no_op("pool", &json!({"min_keep": 11}), &inputs, &outputs));
        assert!(!m.is_completed_no_op("pool", &json!({"min_keep": 12}), &inputs, &outputs));

        let changed = BTreeMap::from([("in.jsonl".to_string(), "other".to_string())]);
        assert!(!m.is_completed_no_op("pool", &json!({"min_keep": 11}), &changed, &outputs));
        assert!(!m.is_completed_no_op("cluster", &json!({}), &inputs, &outputs));
    }

    #[test]
    fn upsert_keeps_canonical_order() {
        let mut m = PipelineManifest::default();
        m.upsert(record("score", json!({})));
        m.upsert(record("ingest", json!({})));
        m.upsert(record("pair", json!({})));
        let order: Vec<&str> = m.stages.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(order, vec!["ingest", "pair", "score"]);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = PipelineManifest::default();
        m.upsert(record("ingest", json!({"limit": 200})));
        save_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(m, loaded);
    }
}
