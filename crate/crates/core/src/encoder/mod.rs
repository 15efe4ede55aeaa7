//! A small pre-LN transformer pair classifier, implemented without an
//! autodiff framework.
//!
//! Every block computes `x + Attn(LN(x))` followed by `x + FFN(LN(x))`. The
//! final position-0 (`[CLS]`) state goes through one more layer norm and a
//! linear 3-way head. All parameters live in one flat `f64` buffer described
//! by a [`Layout`], which keeps the optimizer, checkpointing and the
//! finite-difference checker independent of the network structure.

mod checkpoint;
mod model;
pub mod ops;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::NUM_CLASSES;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{backward, forward, logits, predict, ForwardCache, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { vocab_size: 0, dim: 64, layers: 2, heads: 2, ffn_dim: 256, max_len: 64, dropout_rate: 0.0 }
    }
}

impl EncoderConfig {
    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::config(format!("encoder.{f}"), m));
        if self.vocab_size < crate::corpus::NUM_SPECIAL {
            return bad("vocab_size", format!("must be >= 5, got {}", self.vocab_size));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be positive".into());
        }
        if self.max_len < 5 {
            return bad("max_len", format!("must be >= 5, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}

/// A contiguous `rows x cols` block of the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Offsets of every named array, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_gain: Slot,
    pub lnf_bias: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub total: usize,
    named: Vec<(String, Slot, Init)>,
}

struct LayoutBuilder {
    next: usize,
    named: Vec<(String, Slot, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot { offset: self.next, rows, cols };
        self.next += slot.len();
        self.named.push((name, slot, init));
        slot
    }
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let d = cfg.dim;
        let mut b = LayoutBuilder { next: 0, named: Vec::new() };
        let tok_emb = b.add("tok_emb".into(), cfg.vocab_size, d, Init::Normal);
        let pos_emb = b.add("pos_emb".into(), cfg.max_len, d, Init::Normal);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                LayerSlots {
                    ln1_gain: b.add(p("ln1.gain"), 1, d, Init::Ones),
                    ln1_bias: b.add(p("ln1.bias"), 1, d, Init::Zeros),
                    wq: b.add(p("attn.wq"), d, d, Init::Normal),
                    bq: b.add(p("attn.bq"), 1, d, Init::Zeros),
                    wk: b.add(p("attn.wk"), d, d, Init::Normal),
                    bk: b.add(p("attn.bk"), 1, d, Init::Zeros),
                    wv: b.add(p("attn.wv"), d, d, Init::Normal),
                    bv: b.add(p("attn.bv"), 1, d, Init::Zeros),
                    wo: b.add(p("attn.wo"), d, d, Init::Normal),
                    bo: b.add(p("attn.bo"), 1, d, Init::Zeros),
                    ln2_gain: b.add(p("ln2.gain"), 1, d, Init::Ones),
                    ln2_bias: b.add(p("ln2.bias"), 1, d, Init::Zeros),
                    w1: b.add(p("ffn.w1"), d, cfg.ffn_dim, Init::Normal),
                    b1: b.add(p("ffn.b1"), 1, cfg.ffn_dim, Init::Zeros),
                    w2: b.add(p("ffn.w2"), cfg.ffn_dim, d, Init::Normal),
                    b2: b.add(p("ffn.b2"), 1, d, Init::Zeros),
                }
            })
            .collect();
        let lnf_gain = b.add("final_ln.gain".into(), 1, d, Init::Ones);
        let lnf_bias = b.add("final_ln.bias".into(), 1, d, Init::Zeros);
        let head_w = b.add("head.w".into(), d, NUM_CLASSES, Init::Normal);
        let head_b = b.add("head.b".into(), 1, NUM_CLASSES, Init::Zeros);
        Layout { tok_emb, pos_emb, layers, lnf_gain, lnf_bias, head_w, head_b, total: b.next, named: b.named }
    }

    /// `(name, slot)` pairs in declaration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.named.iter().map(|(n, s, _)| (n.as_str(), *s))
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let data = vec![0.0; layout.total];
        Ok(EncoderParams { config: cfg.clone(), layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams { config: self.config.clone(), layout: self.layout.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.data[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.data[slot.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn from_parts(config: EncoderConfig, data: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", layout.total, data.len())));
        }
        Ok(EncoderParams { config, layout, data })
    }
}

/// Weights ~ N(0, 1/dim), layer-norm gains 1, all biases 0.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(cfg)?;
    let mut rng = seed::rng_from(seed);
    let normal = Normal::new(0.0, 1.0 / (cfg.dim as f64).sqrt()).expect("valid std");
    let named = params.layout.named.clone();
    for (_, slot, init) in named {
        let block = params.get_mut(slot);
        match init {
            Init::Normal => block.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
            Init::Ones => block.fill(1.0),
            Init::Zeros => block.fill(0.0),
        }
    }
    Ok(params)
}
