//! Propensity-corrected loss (PCL) for ordinal, class-imbalanced
//! sentence-pair classification.
//!
//! The crate is split along the data path:
//!
//! - [`corpus`]: record IO, tokenization, `[CLS] S1 [SEP] S2 [SEP]` assembly,
//!   dataset statistics and a synthetic imbalanced generator.
//! - [`losses`]: label-smoothing cross-entropy and the propensity-corrected
//!   loss with its condition table and batch reduction.
//! - [`encoder`]: a small pre-LN transformer pair classifier with exact
//!   backpropagation and a versioned checkpoint format.
//! - [`pretrain`]: whole-word / knowledge-prioritized masking and
//!   sentence-order instance generation.
//! - [`trainer`]: optimizers, the fine-tuning loop, metrics and the
//!   LS-vs-PCL ablation harness.
//! - [`config`] and [`report`]: run configuration and output files used by
//!   the `pcl` binary.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod pretrain;
pub mod report;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

/// Number of ordinal labels: 0 irrelevant, 1 some correlation, 2 highly relevant.
pub const NUM_CLASSES: usize = 3;

/// Index of the largest element, ties resolved toward the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::argmax;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
    }
}
