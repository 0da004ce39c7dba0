//! Write-then-rename helpers so failed runs never leave partial outputs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}.{}", std::process::id()))
}

/// Writes `bytes` to a hidden sibling of `path`, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = sibling(path, "tmp");
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Runs `fill` on a fresh staging directory and renames it to `dest` on
/// success. An existing `dest` is replaced; on failure nothing at `dest` changes.
pub fn with_staging_dir<T>(dest: impl AsRef<Path>, fill: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let dest = dest.as_ref();
    if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let stage = sibling(dest, "staging");
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    match fill(&stage) {
        Ok(v) => {
            if dest.exists() {
                fs::remove_dir_all(dest)?;
            }
            fs::rename(&stage, dest)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}
