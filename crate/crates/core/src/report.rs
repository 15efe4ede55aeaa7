//! Output files written by the command-line tool. No timestamps are
//! emitted, so a rerun with the same seed reproduces every file exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::{AblationReport, History, MetricsReport};

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.txt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const ABLATION_TABLE_FILE: &str = "ablation.md";
pub const ABLATION_ROWS_FILE: &str = "ablation.jsonl";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, contents: String) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).map_err(|e| Error::Invalid(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// `metrics.json` and `confusion.txt`.
pub fn write_metrics(dir: &Path, metrics: &MetricsReport) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let json = serde_json::to_string_pretty(metrics).map_err(|e| Error::Invalid(e.to_string()))? + "\n";
    Ok(vec![
        write(dir.join(METRICS_FILE), json)?,
        write(dir.join(CONFUSION_FILE), metrics.confusion.render())?,
    ])
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    loss: f64,
}

/// `history.jsonl` (one record per epoch) and `steps.jsonl` (one per step).
pub fn write_history(dir: &Path, history: &History) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let steps = history.step_losses.iter().enumerate().map(|(i, &loss)| StepRecord { step: i + 1, loss });
    Ok(vec![
        write(dir.join(HISTORY_FILE), json_lines(&history.epochs)?)?,
        write(dir.join(STEPS_FILE), json_lines(steps)?)?,
    ])
}

/// `ablation.md` and `ablation.jsonl`.
pub fn write_ablation(dir: &Path, report: &AblationReport) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::Invalid("ablation report has no rows".into()));
    }
    ensure_dir(dir)?;
    Ok(vec![
        write(dir.join(ABLATION_TABLE_FILE), report.render_markdown())?,
        write(dir.join(ABLATION_ROWS_FILE), json_lines(&report.rows)?)?,
    ])
}
