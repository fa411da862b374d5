//! Precomputed embeddings loaded from a JSONL sidecar keyed by text hash,
//! for offline runs that bypass the embeddings endpoint.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::sha256_hex;

use super::{BackendError, EmbedBackend, EmbeddingVector};

#[derive(Debug, Serialize, Deserialize)]
struct SidecarEntry {
    key: String,
    values: Vec<f64>,
}

pub struct SidecarEmbeddings {
    by_key: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl SidecarEmbeddings {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let entries: Vec<SidecarEntry> = crate::jsonl::read_jsonl(path)?;
        let mut by_key = HashMap::with_capacity(entries.len());
        let mut dim = 0;
        for entry in entries {
            if dim == 0 {
                dim = entry.values.len();
            } else if entry.values.len() != dim {
                return Err(crate::Error::Invalid(format!(
                    "sidecar {} mixes embedding dimensions {dim} and {}",
                    path.display(),
                    entry.values.len()
                )));
            }
            by_key.insert(entry.key, entry.values);
        }
        Ok(SidecarEmbeddings { by_key, dim })
    }

    /// Write a sidecar file covering `texts` using `source` for the vectors.
    pub fn write(path: &Path, texts: &[String], source: &dyn EmbedBackend) -> crate::Result<()> {
        let vectors = source.embed(texts)?;
        let entries: Vec<SidecarEntry> = texts
            .iter()
            .zip(vectors)
            .map(|(text, v)| SidecarEntry {
                key: sha256_hex(text.as_bytes()),
                values: v.values,
            })
            .collect();
        crate::jsonl::write_jsonl(path, &entries)
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

impl EmbedBackend for SidecarEmbeddings {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let key = sha256_hex(text.as_bytes());
            match self.by_key.get(&key) {
                Some(values) => out.push(EmbeddingVector::new(values.clone())),
                None => {
                    return Err(BackendError::Capability(format!(
                        "sidecar has no embedding for text {:?} (key {})",
                        crate::jsonl::preview(text),
                        &key[..12]
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    #[test]
    fn roundtrip_matches_source_backend() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.jsonl");
        let source = MockBackend::new(11).with_embed_dim(6);
        let texts: Vec<String> = ["tone", "sarcasm", "urgency"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        SidecarEmbeddings::write(&path, &texts, &source).unwrap();

        let sidecar = SidecarEmbeddings::load(&path).unwrap();
        assert_eq!(sidecar.len(), 3);
        assert_eq!(sidecar.dim(), 6);
        let from_sidecar = sidecar.embed(&texts).unwrap();
        let from_source = source.embed(&texts).unwrap();
        assert_eq!(from_sidecar, from_source);
    }

    #[test]
    fn unknown_text_is_capability_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.jsonl");
        let source = MockBackend::new(11).with_embed_dim(4);
        SidecarEmbeddings::write(&path, &["known".to_string()], &source).unwrap();
        let sidecar = SidecarEmbeddings::load(&path).unwrap();
        match sidecar.embed(&["unknown".to_string()]).unwrap_err() {
            BackendError::Capability(_) => {}
            other => panic!("unexpected: {other}"),
        }
    }
}
