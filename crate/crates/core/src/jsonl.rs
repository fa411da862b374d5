//! JSONL persistence and content hashing.
//!
//! One record per line, UTF-8, struct field order fixed by the type
//! definitions, so serialized bytes (and therefore content hashes) are
//! stable across runs. Writes go through a temp file and rename.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{TextSource, UserText};

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

/// Write records as JSONL, atomically (temp file + rename).
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for rec in records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a full JSONL file; parse errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Append records to an existing JSONL file (checkpoint streams).
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct RawUserText {
    #[serde(default)]
    id: Option<String>,
    text: String,
    source: TextSource,
}

/// Derive a stable id from (source, text) for records ingested without one.
pub fn derive_text_id(source: TextSource, text: &str) -> String {
    let digest = sha256_hex(format!("{}\n{}", source.as_str(), text).as_bytes());
    format!("ut-{}", &digest[..16])
}

/// First few words of a text, for log and error messages.
pub fn preview(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().take(6).collect();
    let mut out = words.join(" ");
    if text.split_whitespace().nth(6).is_some() {
        out.push('…');
    }
    out
}

/// Load a corpus file: one `{id?, text, source}` object per line.
///
/// Records come back in file order. Missing ids are derived from
/// (source, text); duplicate ids and empty texts are rejected with the
/// offending line number.
pub fn load_corpus(path: &Path) -> Result<Vec<UserText>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<UserText> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawUserText = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let text = raw.text.trim().to_string();
        if text.is_empty() {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                msg: "text empty after trim".into(),
            });
        }
        let id = raw
            .id
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| derive_text_id(raw.source, &text));
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { id, line: line_no });
        }
        out.push(UserText {
            id,
            text,
            source: raw.source,
        });
    }
    Ok(out)
}
