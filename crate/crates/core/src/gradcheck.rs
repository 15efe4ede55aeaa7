//! Finite-difference verification of the encoder's analytic gradients.
//!
//! The checked scalar is the mean label-smoothing loss of a batch. The
//! numerical side only ever calls the inference forward pass, so it shares
//! no code with `backward`.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{assemble_input, InputSequence, NUM_SPECIAL};
use crate::encoder::{self, EncoderConfig, EncoderParams, Mode};
use crate::error::Result;
use crate::losses::label_smoothing_loss;
use crate::seed;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub index: usize,
    pub array: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

/// Gradient magnitude below which errors are measured against this floor
/// instead of the gradient itself. A central difference with step 1e-5 on an
/// O(1) loss carries roughly 1e-11 of rounding noise, which would otherwise
/// dominate coordinates whose true gradient is zero (e.g. attention key
/// biases, which softmax is invariant to).
pub const ABS_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn mean_ls(params: &EncoderParams, batch: &[InputSequence], labels: &[usize], alpha: f64) -> Result<f64> {
    let rows = encoder::logits(params, batch)?;
    let mut total = 0.0;
    for (l, &y) in rows.iter().zip(labels) {
        total += label_smoothing_loss(l, y, alpha)?.value;
    }
    Ok(total / rows.len() as f64)
}

fn array_name(params: &EncoderParams, index: usize) -> String {
    params
        .layout()
        .named()
        .find(|(_, s)| s.range().contains(&index))
        .map(|(n, _)| n.to_string())
        .unwrap_or_default()
}

/// Compares analytic and central-difference gradients on `coords` distinct
/// parameter coordinates drawn uniformly.
pub fn check_gradients(
    params: &EncoderParams,
    batch: &[InputSequence],
    labels: &[usize],
    alpha: f64,
    coords: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let (rows, cache) = encoder::forward(params, batch, Mode::Eval)?;
    let n = rows.len() as f64;
    let mut grad_rows = Vec::with_capacity(rows.len());
    for (l, &y) in rows.iter().zip(labels) {
        grad_rows.push(label_smoothing_loss(l, y, alpha)?.grad.map(|g| g / n));
    }
    let grads = encoder::backward(params, &cache, &grad_rows)?;

    let picks = index::sample(rng, params.len(), coords.min(params.len())).into_vec();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(picks.len());
    for i in picks {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = mean_ls(&probe, batch, labels, alpha)?;
        probe.as_mut_slice()[i] = orig - step;
        let down = mean_ls(&probe, batch, labels, alpha)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.as_slice()[i];
        out.push(CoordCheck {
            index: i,
            array: array_name(params, i),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = out.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { checked: out.len(), max_rel_error, coords: out })
}

/// A random small problem: config with dim 8..=16 and 1..=2 layers, params
/// with every entry jittered away from its initializer value, and a batch of
/// random pairs over a small vocabulary.
pub fn random_problem(rng: &mut ChaCha8Rng) -> Result<(EncoderParams, Vec<InputSequence>, Vec<usize>)> {
    let heads = if rng.random_bool(0.5) { 1 } else { 2 };
    let dim = [8, 12, 16][rng.random_range(0..3)];
    let cfg = EncoderConfig {
        vocab_size: 12 + rng.random_range(0..8),
        dim,
        layers: rng.random_range(1..=2),
        heads,
        ffn_dim: dim * 2,
        max_len: 16,
        dropout_rate: 0.0,
    };
    let mut params = encoder::init_params(&cfg, rng.random())?;
    for x in params.as_mut_slice() {
        *x += 0.1 * (rng.random::<f64>() - 0.5);
    }
    let n = 3 + rng.random_range(0..3);
    let mut batch = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (n1, n2) = (1 + rng.random_range(0..5), 1 + rng.random_range(0..6));
        let a: Vec<usize> = (0..n1).map(|_| rng.random_range(NUM_SPECIAL..cfg.vocab_size)).collect();
        let b: Vec<usize> = (0..n2).map(|_| rng.random_range(NUM_SPECIAL..cfg.vocab_size)).collect();
        batch.push(assemble_input(&a, &b, cfg.max_len)?);
        labels.push(rng.random_range(0..3));
    }
    Ok((params, batch, labels))
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub configs: Vec<EncoderConfig>,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Runs [`check_gradients`] on `configs` random problems derived from `root_seed`.
pub fn run_suite(root_seed: u64, configs: usize, coords_per_config: usize) -> Result<SuiteReport> {
    let mut rng = seed::rng_from(seed::sub_seed(root_seed, "gradcheck"));
    let mut report = SuiteReport { configs: Vec::new(), checked: 0, max_rel_error: 0.0 };
    for _ in 0..configs {
        let (params, batch, labels) = random_problem(&mut rng)?;
        let r = check_gradients(&params, &batch, &labels, 0.1, coords_per_config, DEFAULT_STEP, &mut rng)?;
        report.configs.push(params.config().clone());
        report.checked += r.checked;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
    }
    Ok(report)
}
