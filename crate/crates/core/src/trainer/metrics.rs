//! Confusion matrix and the derived percentages (per-class P/R/F1,
//! macro-F1, accuracy).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Rows are gold labels, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(gold: &[usize], pred: &[usize]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Shape(format!("{} gold labels vs {} predictions", gold.len(), pred.len())));
        }
        let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(Error::Invalid(format!("label pair ({g}, {p}) out of range")));
            }
            counts[g][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("gold\\pred");
        for p in 0..NUM_CLASSES {
            s.push_str(&format!("{p:>8}"));
        }
        s.push('\n');
        for (g, row) in self.counts.iter().enumerate() {
            s.push_str(&format!("{g:<9}"));
            for c in row {
                s.push_str(&format!("{c:>8}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// All values in percentage points; 0/0 cases count as 0.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let c = &confusion.counts;
        let mut precision = [0.0; NUM_CLASSES];
        let mut recall = [0.0; NUM_CLASSES];
        let mut f1 = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let tp = c[k][k];
            let predicted: u64 = (0..NUM_CLASSES).map(|g| c[g][k]).sum();
            let gold: u64 = c[k].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, gold);
            precision[k] = 100.0 * p;
            recall[k] = 100.0 * r;
            f1[k] = if p + r == 0.0 { 0.0 } else { 100.0 * 2.0 * p * r / (p + r) };
        }
        let macro_f1 = f1.iter().sum::<f64>() / NUM_CLASSES as f64;
        let accuracy = 100.0 * ratio(confusion.trace(), confusion.total());
        MetricsReport { precision, recall, f1, macro_f1, accuracy, confusion }
    }

    pub fn from_pairs(gold: &[usize], pred: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(ConfusionMatrix::from_pairs(gold, pred)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let m = MetricsReport::from_pairs(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!(m.macro_f1, 100.0);
        assert_eq!(m.accuracy, 100.0);
    }

    #[test]
    fn hand_built_case() {
        let m = MetricsReport::from_pairs(&[0, 0, 1, 1, 1, 2], &[0, 1, 1, 1, 0, 2]).unwrap();
        assert!((m.f1[0] - 50.0).abs() < 1e-9);
        assert!((m.f1[1] - 200.0 / 3.0).abs() < 1e-9);
        assert!((m.f1[2] - 100.0).abs() < 1e-9);
        assert_eq!(format!("{:.2}", m.macro_f1), "72.22");
        assert_eq!(format!("{:.2}", m.accuracy), "66.67");
        assert_eq!(m.confusion.total(), 6);
    }

    #[test]
    fn all_majority_predictions() {
        let gold = [0, 0, 1, 1, 1, 1, 1, 2];
        let m = MetricsReport::from_pairs(&gold, &[1; 8]).unwrap();
        assert_eq!(m.f1[0], 0.0);
        assert_eq!(m.f1[2], 0.0);
        // P = 5/8, R = 1
        let f1_1 = 100.0 * 2.0 * (5.0 / 8.0) / (5.0 / 8.0 + 1.0);
        assert!((m.f1[1] - f1_1).abs() < 1e-12);
        assert!((m.macro_f1 - f1_1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(ConfusionMatrix::from_pairs(&[0, 1], &[0]).is_err());
    }
}
