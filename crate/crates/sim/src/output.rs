//! Writes an experiment directory in one step: everything goes into a
//! temporary sibling that is renamed into place, so a failed run leaves no
//! partial output behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::SimError;
use crate::experiments::Outcome;

pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `outcome` to `root/<name>` and returns that directory. An existing
/// target is replaced only if it looks like an earlier run.
pub fn write_outcome(outcome: &Outcome, root: &Path) -> Result<PathBuf, SimError> {
    fs::create_dir_all(root)?;
    let target = root.join(&outcome.summary.name);
    if target.exists() && !target.join(SUMMARY_FILE).is_file() {
        return Err(SimError::Config(format!(
            "{} exists and is not an experiment directory",
            target.display()
        )));
    }
    let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(root)?;
    for file in &outcome.files {
        let path = staging.path().join(&file.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &file.bytes)?;
    }
    let mut summary = serde_json::to_vec_pretty(&outcome.summary)?;
    summary.push(b'\n');
    fs::write(staging.path().join(SUMMARY_FILE), summary)?;
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    fs::rename(staging.keep(), &target)?;
    Ok(target)
}
