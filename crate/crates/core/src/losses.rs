//! Label-smoothing cross-entropy and the propensity-corrected loss.
//!
//! The corrected loss starts from the label-smoothing value `LS` of a sample
//! and, depending on where the prediction landed relative to the gold label,
//! subtracts a bonus (`C1`, "encourage"), adds a penalty (`C2`, "punish") or
//! leaves it alone (`C3`). Both constants are ratios of dataset label counts
//! scaled by `epsilon`:
//!
//! ```text
//! pcl_plus  = epsilon * n0 / (n1 + n2)
//! pcl_minus = epsilon * (n0 + n2) / n1
//! ```
//!
//! In additive mode the constants shift the value only, so gradients are the
//! label-smoothing gradients. Multiplicative mode scales `LS` (and its
//! gradient) by `1 - pcl_minus` or `1 + pcl_plus` instead.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelCounts;
use crate::error::{Error, Result};
use crate::{argmax, NUM_CLASSES};

pub type Logits = [f64; NUM_CLASSES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Encourage: the error is toward a "better" label, loss is lowered.
    C1,
    /// Punish: the error is costly, loss is raised.
    C2,
    /// Neutral.
    C3,
}

impl Condition {
    /// Ordering by how harshly the condition treats a sample.
    pub fn severity(self) -> u8 {
        match self {
            Condition::C1 => 0,
            Condition::C3 => 1,
            Condition::C2 => 2,
        }
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "C1" => Ok(Condition::C1),
            "C2" => Ok(Condition::C2),
            "C3" => Ok(Condition::C3),
            _ => Err(format!("unknown condition `{s}` (C1|C2|C3)")),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Map from `(true, predicted)` to a condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionTable {
    entries: [[Condition; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConditionTable {
    fn default() -> Self {
        use Condition::*;
        ConditionTable {
            entries: [
                // pred:  0   1   2
                [C3, C1, C2], // true 0
                [C2, C3, C1], // true 1
                [C2, C1, C3], // true 2
            ],
        }
    }
}

impl ConditionTable {
    /// Accepts a table only if it keeps the diagonal neutral and respects the
    /// fixed directional pairs: 2->0 and 1->0 punish, 1->2 encourages, and
    /// 0->2 is treated more harshly than 0->1.
    pub fn new(entries: [[Condition; NUM_CLASSES]; NUM_CLASSES]) -> Result<Self> {
        let t = ConditionTable { entries };
        t.validate()?;
        Ok(t)
    }

    /// A table that has not been validated yet; [`PclConfig::validate`]
    /// checks it before use.
    pub(crate) fn unchecked(entries: [[Condition; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConditionTable { entries }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("loss.table.{key}"), msg));
        for k in 0..NUM_CLASSES {
            if self.entries[k][k] != Condition::C3 {
                return bad(&Self::key(k, k), "diagonal entries must be C3");
            }
        }
        if self.entries[2][0] != Condition::C2 {
            return bad("t2p0", "2 -> 0 must be C2");
        }
        if self.entries[1][0] != Condition::C2 {
            return bad("t1p0", "1 -> 0 must be C2");
        }
        if self.entries[1][2] != Condition::C1 {
            return bad("t1p2", "1 -> 2 must be C1");
        }
        if self.entries[0][2].severity() <= self.entries[0][1].severity() {
            return bad("t0p2", "0 -> 2 must be harsher than 0 -> 1");
        }
        Ok(())
    }

    pub fn key(y: usize, y_hat: usize) -> String {
        format!("t{y}p{y_hat}")
    }

    /// Parses a `t<y>p<y_hat>` key.
    pub fn parse_key(key: &str) -> Option<(usize, usize)> {
        let b = key.as_bytes();
        if b.len() != 4 || b[0] != b't' || b[2] != b'p' {
            return None;
        }
        let y = (b[1] as char).to_digit(10)? as usize;
        let p = (b[3] as char).to_digit(10)? as usize;
        (y < NUM_CLASSES && p < NUM_CLASSES).then_some((y, p))
    }

    /// Applies overrides and re-validates the result as a whole.
    pub fn with_overrides<'a, I>(mut self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Condition)>,
    {
        for (key, cond) in overrides {
            let (y, p) = Self::parse_key(key)
                .ok_or_else(|| Error::config(format!("loss.table.{key}"), "expected key t<y>p<y_hat>"))?;
            self.entries[y][p] = cond;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn get(&self, y: usize, y_hat: usize) -> Condition {
        self.entries[y][y_hat]
    }

    pub fn entries(&self) -> &[[Condition; NUM_CLASSES]; NUM_CLASSES] {
        &self.entries
    }
}

pub fn classify_condition(y: usize, y_hat: usize, table: &ConditionTable) -> Condition {
    table.get(y, y_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    #[default]
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionScope {
    /// Counts come from the whole training split.
    #[default]
    Global,
    /// Counts are re-derived from every batch.
    Batch,
}

impl FromStr for CorrectionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "additive" => Ok(CorrectionMode::Additive),
            "multiplicative" => Ok(CorrectionMode::Multiplicative),
            _ => Err(format!("unknown mode `{s}` (additive|multiplicative)")),
        }
    }
}

impl FromStr for CorrectionScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" => Ok(CorrectionScope::Global),
            "batch" => Ok(CorrectionScope::Batch),
            _ => Err(format!("unknown scope `{s}` (global|batch)")),
        }
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrectionMode::Additive => "additive",
            CorrectionMode::Multiplicative => "multiplicative",
        })
    }
}

impl fmt::Display for CorrectionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrectionScope::Global => "global",
            CorrectionScope::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PclConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub mode: CorrectionMode,
    pub scope: CorrectionScope,
    pub clamp_nonnegative: bool,
    pub table: ConditionTable,
}

impl Default for PclConfig {
    fn default() -> Self {
        PclConfig {
            alpha: 0.1,
            epsilon: 0.1,
            mode: CorrectionMode::Additive,
            scope: CorrectionScope::Global,
            clamp_nonnegative: false,
            table: ConditionTable::default(),
        }
    }
}

impl PclConfig {
    /// Plain label smoothing expressed as a PCL config.
    pub fn label_smoothing(alpha: f64) -> Self {
        PclConfig { alpha, epsilon: 0.0, ..PclConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", format!("must be in [0, 1), got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("loss.epsilon", format!("must be finite and >= 0, got {}", self.epsilon)));
        }
        self.table.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityTerms {
    pub counts: LabelCounts,
    pub epsilon: f64,
    pub pcl_plus: f64,
    pub pcl_minus: f64,
}

pub fn propensity_terms(counts: &LabelCounts, epsilon: f64) -> Result<PropensityTerms> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Invalid(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let [n0, n1, n2] = counts.counts;
    if n1 + n2 == 0 {
        return Err(Error::ZeroDenominator {
            which: "pcl_plus = eps*n0/(n1+n2)",
            detail: format!("n1 + n2 = 0 for counts {:?}", counts.counts),
        });
    }
    if n1 == 0 {
        return Err(Error::ZeroDenominator {
            which: "pcl_minus = eps*(n0+n2)/n1",
            detail: format!("n1 = 0 for counts {:?}", counts.counts),
        });
    }
    Ok(PropensityTerms {
        counts: *counts,
        epsilon,
        pcl_plus: epsilon * n0 as f64 / (n1 + n2) as f64,
        pcl_minus: epsilon * (n0 + n2) as f64 / n1 as f64,
    })
}

pub fn smoothed_targets(y: usize, alpha: f64) -> [f64; NUM_CLASSES] {
    let off = alpha / NUM_CLASSES as f64;
    let mut q = [off; NUM_CLASSES];
    q[y] += 1.0 - alpha;
    q
}

/// Stable softmax of one logits row.
pub fn softmax(logits: &Logits) -> Logits {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsLoss {
    pub value: f64,
    pub grad: Logits,
}

pub fn label_smoothing_loss(logits: &Logits, y: usize, alpha: f64) -> Result<LsLoss> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    if y >= NUM_CLASSES {
        return Err(Error::Invalid(format!("unknown label `{y}`")));
    }
    let q = smoothed_targets(y, alpha);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + sum.ln();
    let mut value = 0.0;
    let mut grad = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        let logp = logits[k] - lse;
        value -= q[k] * logp;
        grad[k] = logp.exp() - q[k];
    }
    Ok(LsLoss { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerSampleLoss {
    pub ls_value: f64,
    pub predicted: usize,
    pub condition: Condition,
    pub corrected_value: f64,
    pub grad_logits: Logits,
}

fn check_terms(terms: &PropensityTerms, cfg: &PclConfig) -> Result<()> {
    if terms.epsilon != cfg.epsilon {
        return Err(Error::Invalid(format!(
            "propensity terms built with epsilon {} but config has {}",
            terms.epsilon, cfg.epsilon
        )));
    }
    if cfg.mode == CorrectionMode::Multiplicative && terms.pcl_minus >= 1.0 {
        return Err(Error::Invalid(format!(
            "pcl_minus = {} >= 1 would negate the loss in multiplicative mode",
            terms.pcl_minus
        )));
    }
    Ok(())
}

/// Corrected loss with the prediction supplied by the caller instead of the
/// argmax of `logits`.
pub fn pcl_loss_with_prediction(
    logits: &Logits,
    y: usize,
    y_hat: usize,
    terms: &PropensityTerms,
    cfg: &PclConfig,
) -> Result<PerSampleLoss> {
    check_terms(terms, cfg)?;
    let ls = label_smoothing_loss(logits, y, cfg.alpha)?;
    let condition = classify_condition(y, y_hat, &cfg.table);
    let (mut value, mut grad) = match (cfg.mode, condition) {
        (_, Condition::C3) => (ls.value, ls.grad),
        (CorrectionMode::Additive, Condition::C1) => (ls.value - terms.pcl_minus, ls.grad),
        (CorrectionMode::Additive, Condition::C2) => (ls.value + terms.pcl_plus, ls.grad),
        (CorrectionMode::Multiplicative, Condition::C1) => {
            let f = 1.0 - terms.pcl_minus;
            (ls.value * f, ls.grad.map(|g| g * f))
        }
        (CorrectionMode::Multiplicative, Condition::C2) => {
            let f = 1.0 + terms.pcl_plus;
            (ls.value * f, ls.grad.map(|g| g * f))
        }
    };
    if cfg.clamp_nonnegative && value < 0.0 {
        value = 0.0;
        grad = [0.0; NUM_CLASSES];
    }
    Ok(PerSampleLoss { ls_value: ls.value, predicted: y_hat, condition, corrected_value: value, grad_logits: grad })
}

pub fn pcl_loss(logits: &Logits, y: usize, terms: &PropensityTerms, cfg: &PclConfig) -> Result<PerSampleLoss> {
    pcl_loss_with_prediction(logits, y, argmax(logits), terms, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean corrected loss.
    pub value: f64,
    /// Mean label-smoothing loss, for monitoring.
    pub ls_value: f64,
    /// Gradient of `value` w.r.t. each row of logits (already divided by the batch size).
    pub grads: Vec<Logits>,
    pub samples: Vec<PerSampleLoss>,
    pub terms: PropensityTerms,
}

pub fn batch_loss(
    batch_logits: &[Logits],
    labels: &[usize],
    cfg: &PclConfig,
    global_counts: Option<&LabelCounts>,
) -> Result<BatchLoss> {
    if batch_logits.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if batch_logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} labels", batch_logits.len(), labels.len())));
    }
    let counts = match cfg.scope {
        CorrectionScope::Global => *global_counts
            .ok_or_else(|| Error::Invalid("global scope requires training-split label counts".into()))?,
        CorrectionScope::Batch => LabelCounts::from_labels(labels),
    };
    let terms = propensity_terms(&counts, cfg.epsilon)?;
    let n = batch_logits.len() as f64;
    let mut samples = Vec::with_capacity(batch_logits.len());
    let (mut total, mut ls_total) = (0.0, 0.0);
    for (logits, &y) in batch_logits.iter().zip(labels) {
        let s = pcl_loss(logits, y, &terms, cfg)?;
        total += s.corrected_value;
        ls_total += s.ls_value;
        samples.push(s);
    }
    let grads = samples.iter().map(|s| s.grad_logits.map(|g| g / n)).collect();
    Ok(BatchLoss { value: total / n, ls_value: ls_total / n, grads, samples, terms })
}
