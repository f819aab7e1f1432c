//! Side-by-side table of several summaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::SimError;
use crate::experiments::Summary;

pub fn load_summary(path: &Path) -> Result<Summary, SimError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// One row per slope and per gate, one column per summary.
pub fn comparison_table(summaries: &[Summary]) -> String {
    let mut keys: Vec<(String, String)> = Vec::new();
    for s in summaries {
        for k in s.slopes.keys() {
            keys.push(("slope".into(), k.clone()));
        }
        for k in s.gates.keys() {
            keys.push(("gate".into(), k.clone()));
        }
    }
    keys.sort();
    keys.dedup();
    let mut out = String::new();
    let _ = write!(out, "| | |");
    for s in summaries {
        let _ = write!(out, " {} |", s.name);
    }
    out.push('\n');
    out.push_str("|---|---|");
    out.push_str(&"---|".repeat(summaries.len()));
    out.push('\n');
    let _ = write!(out, "| config | hash |");
    for s in summaries {
        let _ = write!(out, " {} |", &s.config_hash[..12.min(s.config_hash.len())]);
    }
    out.push('\n');
    for (kind, key) in &keys {
        let _ = write!(out, "| {kind} | {key} |");
        for s in summaries {
            let cell = match kind.as_str() {
                "slope" => s.slopes.get(key).map(|f| format!("{:.3} (r2 {:.2})", f.slope, f.r2)),
                _ => s.gates.get(key).map(|g| if *g { "pass".into() } else { "FAIL".into() }),
            };
            let _ = write!(out, " {} |", cell.unwrap_or_else(|| "-".into()));
        }
        out.push('\n');
    }
    out
}
