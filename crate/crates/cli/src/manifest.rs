//! Run-level utilities around the core manifest: atomic pretty-JSON
//! writes and a lock file guarding concurrent runs.

use std::fs;
use std::path::{Path, PathBuf};

use sentidistill_core::Error;

const LOCK_FILE: &str = "pipeline.lock";

/// Serialize `value` as pretty JSON and atomically replace `path`.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(value).map_err(Error::Json)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body.as_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Exclusive advisory lock on the output directory. Created with
/// `create_new` so a second concurrent run fails fast; removed on drop.
pub struct PipelineLock {
    path: PathBuf,
}

impl PipelineLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, Error> {
        let path = out_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(PipelineLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "another run holds {}; remove it if no pipeline is active",
                path.display()
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for PipelineLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_json_is_atomic_and_pretty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_json(&path, &serde_json::json!({"b": 2, "a": 1})).unwrap();
        let raw = fs::read_to_string(&path).unwrap();
        assert!(raw.contains('\n'), "pretty output expected");
        assert!(!dir.path().join("report.json.tmp").exists());
    }

    #[test]
    fn lock_excludes_second_holder_and_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let lock = PipelineLock::acquire(dir.path()).unwrap();
        let second = PipelineLock::acquire(dir.path());
        assert!(matches!(second, Err(Error::Config(_))));
        drop(lock);
        assert!(PipelineLock::acquire(dir.path()).is_ok());
    }
}
