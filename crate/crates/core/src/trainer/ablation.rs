//! LS-vs-PCL ablation: trains every (loss, seed) combination with otherwise
//! identical settings and scores each on the public test split.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::train::{evaluate, train, History, TrainConfig};
use crate::corpus::Splits;
use crate::error::{Error, Result};
use crate::losses::{CorrectionMode, PclConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossTag {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "PCL-additive")]
    PclAdditive,
    #[serde(rename = "PCL-multiplicative")]
    PclMultiplicative,
}

impl LossTag {
    pub fn name(self) -> &'static str {
        match self {
            LossTag::Ls => "LS",
            LossTag::PclAdditive => "PCL-additive",
            LossTag::PclMultiplicative => "PCL-multiplicative",
        }
    }

    /// Loss settings for this tag derived from `base`; everything except
    /// epsilon and mode is shared.
    pub fn loss_config(self, base: &PclConfig) -> PclConfig {
        match self {
            LossTag::Ls => PclConfig { epsilon: 0.0, mode: CorrectionMode::Additive, ..base.clone() },
            LossTag::PclAdditive => PclConfig { mode: CorrectionMode::Additive, ..base.clone() },
            LossTag::PclMultiplicative => PclConfig { mode: CorrectionMode::Multiplicative, ..base.clone() },
        }
    }
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(LossTag::Ls),
            "pcl-additive" | "pcl-add" => Ok(LossTag::PclAdditive),
            "pcl-multiplicative" | "pcl-mult" => Ok(LossTag::PclMultiplicative),
            _ => Err(format!("unknown loss tag `{s}` (ls|pcl-additive|pcl-multiplicative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub loss: LossTag,
    pub seed: u64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub dev_macro_f1: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss: LossTag,
    pub runs: usize,
    pub mean_macro_f1: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model: String,
    /// Ordered by loss tag, then seed, as requested.
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<LossSummary>,
}

impl AblationReport {
    pub fn summary(&self, tag: LossTag) -> Option<&LossSummary> {
        self.summaries.iter().find(|s| s.loss == tag)
    }

    /// Markdown table: one line per run, then one mean line per loss; the
    /// non-baseline means carry their delta to the first loss in parentheses.
    pub fn render_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Model | Loss | Seed | F1 Score | Accuracy |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.2} |\n",
                r.model, r.loss, r.seed, r.macro_f1, r.accuracy
            ));
        }
        let base = self.summaries.first();
        for (i, m) in self.summaries.iter().enumerate() {
            let (f1, acc) = match base {
                Some(b) if i > 0 => (
                    format_with_delta(m.mean_macro_f1, b.mean_macro_f1),
                    format_with_delta(m.mean_accuracy, b.mean_accuracy),
                ),
                _ => (format!("{:.2}", m.mean_macro_f1), format!("{:.2}", m.mean_accuracy)),
            };
            s.push_str(&format!("| {} | {} | mean | {} | {} |\n", self.model, m.loss, f1, acc));
        }
        s
    }
}

/// `"70.03 (+2.09)"`: value and its difference to `baseline`, both at two
/// decimals, the difference taken between the displayed values.
pub fn format_with_delta(value: f64, baseline: f64) -> String {
    let round = |x: f64| (x * 100.0).round() / 100.0;
    let mut delta = round(round(value) - round(baseline));
    if delta == 0.0 {
        delta = 0.0; // drop the sign of -0.0
    }
    format!("{:.2} ({:+.2})", value, delta)
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub row: AblationRow,
    pub history: History,
    /// Wall-clock time of training plus test evaluation.
    pub elapsed: Duration,
}

/// Trains every `losses x seeds` combination, up to `jobs` at a time.
/// Results do not depend on `jobs`.
pub fn ablate(
    base: &TrainConfig,
    splits: &Splits,
    seeds: &[u64],
    losses: &[LossTag],
    model: &str,
    jobs: usize,
) -> Result<(AblationReport, Vec<AblationRun>)> {
    if seeds.is_empty() || losses.is_empty() {
        return Err(Error::Invalid("ablation needs at least one seed and one loss".into()));
    }
    let combos: Vec<(LossTag, u64)> = losses.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let results: Mutex<Vec<Option<Result<AblationRun>>>> = Mutex::new((0..combos.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);

    let run_one = |tag: LossTag, seed: u64| -> Result<AblationRun> {
        let started = Instant::now();
        let cfg = TrainConfig { seed, loss: tag.loss_config(&base.loss), ..base.clone() };
        let out = train(&cfg, &splits.train, &splits.dev)?;
        let test = evaluate(&out.params, &out.vocab, &splits.test_public, cfg.tokenize)?;
        Ok(AblationRun {
            row: AblationRow {
                model: model.to_string(),
                loss: tag,
                seed,
                macro_f1: test.macro_f1,
                accuracy: test.accuracy,
                dev_macro_f1: out.history.best_dev_macro_f1,
                best_epoch: out.history.best_epoch,
                epochs_run: out.history.epochs.len(),
            },
            history: out.history,
            elapsed: started.elapsed(),
        })
    };

    let workers = jobs.clamp(1, combos.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= combos.len() {
                    break;
                }
                let (tag, seed) = combos[i];
                let r = run_one(tag, seed);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut runs = Vec::with_capacity(combos.len());
    for r in results.into_inner().expect("results lock") {
        runs.push(r.expect("every combination ran")?);
    }
    let summaries = losses
        .iter()
        .map(|&tag| {
            let mine: Vec<&AblationRow> = runs.iter().map(|r| &r.row).filter(|r| r.loss == tag).collect();
            let n = mine.len() as f64;
            LossSummary {
                loss: tag,
                runs: mine.len(),
                mean_macro_f1: mine.iter().map(|r| r.macro_f1).sum::<f64>() / n,
                mean_accuracy: mine.iter().map(|r| r.accuracy).sum::<f64>() / n,
            }
        })
        .collect();
    let report = AblationReport { model: model.to_string(), rows: runs.iter().map(|r| r.row.clone()).collect(), summaries };
    Ok((report, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_format() {
        assert_eq!(format_with_delta(70.03, 67.94), "70.03 (+2.09)");
        assert_eq!(format_with_delta(72.74, 72.24), "72.74 (+0.50)");
        assert_eq!(format_with_delta(60.0, 61.25), "60.00 (-1.25)");
        assert_eq!(format_with_delta(60.001, 60.0), "60.00 (+0.00)");
        assert_eq!(format_with_delta(59.999, 60.0), "60.00 (+0.00)");
    }

    #[test]
    fn tags_parse() {
        assert_eq!("ls".parse::<LossTag>().unwrap(), LossTag::Ls);
        assert_eq!("PCL-multiplicative".parse::<LossTag>().unwrap(), LossTag::PclMultiplicative);
        assert!("dice".parse::<LossTag>().is_err());
    }

    #[test]
    fn ls_tag_zeroes_epsilon() {
        let base = PclConfig { epsilon: 0.2, ..PclConfig::default() };
        assert_eq!(LossTag::Ls.loss_config(&base).epsilon, 0.0);
        assert_eq!(LossTag::PclMultiplicative.loss_config(&base).mode, CorrectionMode::Multiplicative);
        assert_eq!(LossTag::PclAdditive.loss_config(&base).epsilon, 0.2);
    }

    #[test]
    fn markdown_layout() {
        let row = |loss, seed, f1| AblationRow {
            model: "tiny".into(),
            loss,
            seed,
            macro_f1: f1,
            accuracy: 70.0,
            dev_macro_f1: 0.0,
            best_epoch: 0,
            epochs_run: 1,
        };
        let report = AblationReport {
            model: "tiny".into(),
            rows: vec![row(LossTag::Ls, 1, 67.94), row(LossTag::PclMultiplicative, 1, 70.03)],
            summaries: vec![
                LossSummary { loss: LossTag::Ls, runs: 1, mean_macro_f1: 67.94, mean_accuracy: 75.02 },
                LossSummary { loss: LossTag::PclMultiplicative, runs: 1, mean_macro_f1: 70.03, mean_accuracy: 77.02 },
            ],
        };
        let md = report.render_markdown();
        assert_eq!(md.lines().count(), 2 + 2 + 2);
        assert!(md.contains("| tiny | PCL-multiplicative | mean | 70.03 (+2.09) | 77.02 (+2.00) |"), "{md}");
        assert!(md.contains("| tiny | LS | mean | 67.94 | 75.02 |"), "{md}");
    }
}
