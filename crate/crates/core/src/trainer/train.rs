use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{ConfusionMatrix, MetricsReport};
use super::optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::corpus::{encode_example, label_counts, Example, InputSequence, TokenizeMode, Vocab};
use crate::encoder::{self, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, BatchLoss, PclConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub patience: usize,
    pub tokenize: TokenizeMode,
    pub loss: PclConfig,
    /// `vocab_size` is overwritten from the vocabulary built at train time.
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            patience: 3,
            tokenize: TokenizeMode::Char,
            loss: PclConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("train.{f}"), m));
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean corrected loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean label-smoothing loss over the same batches.
    pub train_ls: f64,
    pub dev_macro_f1: f64,
    pub dev_accuracy: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Corrected loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev macro-F1.
    pub params: EncoderParams,
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub history: History,
}

/// Passed to the observer after each optimizer step.
pub struct StepInfo<'a> {
    pub step: usize,
    pub epoch: usize,
    pub loss: &'a BatchLoss,
    pub params: &'a EncoderParams,
}

pub fn encode_all(examples: &[Example], vocab: &Vocab, mode: TokenizeMode, max_len: usize) -> Result<Vec<InputSequence>> {
    examples.iter().map(|e| encode_example(e, vocab, mode, max_len)).collect()
}

fn evaluate_encoded(params: &EncoderParams, seqs: &[InputSequence], gold: &[usize]) -> Result<MetricsReport> {
    let mut pred = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(256) {
        pred.extend(encoder::predict(params, chunk)?);
    }
    Ok(MetricsReport::from_confusion(ConfusionMatrix::from_pairs(gold, &pred)?))
}

/// Metrics of `params` on `examples`.
pub fn evaluate(params: &EncoderParams, vocab: &Vocab, examples: &[Example], mode: TokenizeMode) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let seqs = encode_all(examples, vocab, mode, params.config().max_len)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    evaluate_encoded(params, &seqs, &gold)
}

pub fn train(cfg: &TrainConfig, train_set: &[Example], dev_set: &[Example]) -> Result<TrainOutcome> {
    train_with_observer(cfg, train_set, dev_set, |_| {})
}

/// Fine-tunes a fresh encoder. Each epoch reshuffles the training split,
/// then scores the dev split; the best-dev parameters are kept and training
/// stops after `patience` epochs without improvement.
pub fn train_with_observer<F>(cfg: &TrainConfig, train_set: &[Example], dev_set: &[Example], mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepInfo<'_>),
{
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Invalid("train and dev splits must be nonempty".into()));
    }
    let vocab = Vocab::from_examples(train_set, cfg.tokenize);
    let enc_cfg = EncoderConfig { vocab_size: vocab.len(), ..cfg.encoder.clone() };
    enc_cfg.validate()?;
    let train_seqs = encode_all(train_set, &vocab, cfg.tokenize, enc_cfg.max_len)?;
    let train_labels: Vec<usize> = train_set.iter().map(|e| e.label).collect();
    let dev_seqs = encode_all(dev_set, &vocab, cfg.tokenize, enc_cfg.max_len)?;
    let dev_labels: Vec<usize> = dev_set.iter().map(|e| e.label).collect();
    let global_counts = label_counts(train_set);

    let mut params = encoder::init_params(&enc_cfg, seed::sub_seed(cfg.seed, "init"))?;
    let mut shuffle_rng = seed::rng_from(seed::sub_seed(cfg.seed, "shuffle"));
    let mut dropout_rng = seed::rng_from(seed::sub_seed(cfg.seed, "dropout"));
    let opt = cfg.optimizer_config();
    let mut state = OptimizerState::new(params.len());

    let mut history = History { best_dev_macro_f1: f64::NEG_INFINITY, ..History::default() };
    let mut best = params.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut ls_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<InputSequence> = idx.iter().map(|&i| train_seqs[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let (rows, cache) = encoder::forward(&params, &batch, Mode::Train(&mut dropout_rng))?;
            let loss = batch_loss(&rows, &labels, &cfg.loss, Some(&global_counts))?;
            let grads = encoder::backward(&params, &cache, &loss.grads)?;
            optimizer_step(params.as_mut_slice(), grads.as_slice(), &mut state, &opt)?;
            step += 1;
            loss_sum += loss.value;
            ls_sum += loss.ls_value;
            batches += 1;
            history.step_losses.push(loss.value);
            observer(&StepInfo { step, epoch, loss: &loss, params: &params });
        }
        let dev = evaluate_encoded(&params, &dev_seqs, &dev_labels)?;
        let improved = dev.macro_f1 > history.best_dev_macro_f1;
        if improved {
            history.best_dev_macro_f1 = dev.macro_f1;
            history.best_epoch = epoch;
            best.as_mut_slice().copy_from_slice(params.as_slice());
            stale = 0;
        } else {
            stale += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            steps: step,
            train_loss: loss_sum / batches as f64,
            train_ls: ls_sum / batches as f64,
            dev_macro_f1: dev.macro_f1,
            dev_accuracy: dev.accuracy,
            improved,
        });
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { params: best, vocab, encoder: enc_cfg, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (TrainConfig, crate::corpus::Splits) {
        let spec = SyntheticSpec {
            train_size: 96,
            dev_size: 24,
            test_size: 24,
            s1_len: 4.0,
            s2_len: 6.0,
            vocab_size: 40,
            ..SyntheticSpec::default()
        };
        let splits = generate_synthetic(&spec, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            tokenize: TokenizeMode::Whitespace,
            encoder: EncoderConfig { dim: 8, layers: 1, heads: 2, ffn_dim: 16, max_len: 24, ..EncoderConfig::default() },
            ..TrainConfig::default()
        };
        (cfg, splits)
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, s) = tiny();
        let a = train(&cfg, &s.train, &s.dev).unwrap();
        let b = train(&cfg, &s.train, &s.dev).unwrap();
        assert_eq!(a.params.as_slice(), b.params.as_slice());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.step_losses.len(), 12);
    }

    #[test]
    fn best_checkpoint_is_best_observed() {
        let (mut cfg, s) = tiny();
        cfg.epochs = 4;
        cfg.patience = 1;
        let out = train(&cfg, &s.train, &s.dev).unwrap();
        let best = out.history.epochs.iter().map(|e| e.dev_macro_f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.history.best_dev_macro_f1, best);
        let again = evaluate(&out.params, &out.vocab, &s.dev, cfg.tokenize).unwrap();
        assert_eq!(again.macro_f1, best);
    }

    #[test]
    fn rejects_bad_config() {
        let (mut cfg, s) = tiny();
        cfg.patience = 0;
        assert!(train(&cfg, &s.train, &s.dev).is_err());
        let (cfg, s) = tiny();
        assert!(train(&cfg, &[], &s.dev).is_err());
    }
}
