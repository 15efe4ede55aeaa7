//! Run configuration: a flat `key = value` text format with dotted sections.
//!
//! ```text
//! # comment
//! seed = 7
//! data.train = data/train.jsonl
//! loss.mode = multiplicative
//! loss.table.t0p1 = C1
//! encoder.dim = 64
//! ```
//!
//! Precedence is file, then `PCL_OUT_DIR` for the output directory, then
//! command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::TokenizeMode;
use crate::error::{Error, Result};
use crate::losses::{Condition, ConditionTable};
use crate::pretrain::PretrainConfig;
use crate::trainer::TrainConfig;
use crate::NUM_CLASSES;

pub const OUT_DIR_ENV: &str = "PCL_OUT_DIR";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub lexicon_path: Option<PathBuf>,
    pub tokenize: TokenizeMode,
    /// `seed` and `tokenize` inside are ignored in favor of the fields above.
    pub train: TrainConfig,
    pub mask_rate: f64,
    pub mask_boost: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mask = PretrainConfig::default();
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            train_path: None,
            dev_path: None,
            test_path: None,
            lexicon_path: None,
            tokenize: TokenizeMode::Char,
            train: TrainConfig::default(),
            mask_rate: mask.rate,
            mask_boost: mask.boost,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    /// Every scalar key, in echo order. Table keys `loss.table.t<y>p<y_hat>`
    /// are accepted in addition.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out_dir",
        "data.train",
        "data.dev",
        "data.test",
        "data.lexicon",
        "data.tokenize",
        "train.epochs",
        "train.batch_size",
        "train.lr",
        "train.optimizer",
        "train.beta1",
        "train.beta2",
        "train.adam_eps",
        "train.patience",
        "loss.alpha",
        "loss.epsilon",
        "loss.mode",
        "loss.scope",
        "loss.clamp",
        "encoder.dim",
        "encoder.layers",
        "encoder.heads",
        "encoder.ffn_dim",
        "encoder.max_len",
        "encoder.dropout",
        "mask.rate",
        "mask.boost",
    ];

    /// Sets one key; unknown keys and unparsable values name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data.train" => self.train_path = Some(PathBuf::from(value)),
            "data.dev" => self.dev_path = Some(PathBuf::from(value)),
            "data.test" => self.test_path = Some(PathBuf::from(value)),
            "data.lexicon" => self.lexicon_path = Some(PathBuf::from(value)),
            "data.tokenize" => self.tokenize = parse_value(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.lr" => t.learning_rate = parse_value(key, value)?,
            "train.optimizer" => t.optimizer = parse_value(key, value)?,
            "train.beta1" => t.beta1 = parse_value(key, value)?,
            "train.beta2" => t.beta2 = parse_value(key, value)?,
            "train.adam_eps" => t.adam_eps = parse_value(key, value)?,
            "train.patience" => t.patience = parse_value(key, value)?,
            "loss.alpha" => t.loss.alpha = parse_value(key, value)?,
            "loss.epsilon" => t.loss.epsilon = parse_value(key, value)?,
            "loss.mode" => t.loss.mode = parse_value(key, value)?,
            "loss.scope" => t.loss.scope = parse_value(key, value)?,
            "loss.clamp" => t.loss.clamp_nonnegative = parse_bool(key, value)?,
            "encoder.dim" => t.encoder.dim = parse_value(key, value)?,
            "encoder.layers" => t.encoder.layers = parse_value(key, value)?,
            "encoder.heads" => t.encoder.heads = parse_value(key, value)?,
            "encoder.ffn_dim" => t.encoder.ffn_dim = parse_value(key, value)?,
            "encoder.max_len" => t.encoder.max_len = parse_value(key, value)?,
            "encoder.dropout" => t.encoder.dropout_rate = parse_value(key, value)?,
            "mask.rate" => self.mask_rate = parse_value(key, value)?,
            "mask.boost" => self.mask_boost = parse_value(key, value)?,
            _ => match key.strip_prefix("loss.table.").and_then(ConditionTable::parse_key) {
                Some((y, p)) => {
                    let cond: Condition = parse_value(key, value)?;
                    // Validation is deferred to `validate`, since a valid table
                    // can need several entries changed at once.
                    let mut e = *t.loss.table.entries();
                    e[y][p] = cond;
                    t.loss.table = ConditionTable::unchecked(e);
                }
                None => return Err(Error::config(key, "unknown key")),
            },
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn merge_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_str(text, "<config>")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.merge_str(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Replaces `out_dir` with `PCL_OUT_DIR` when that variable is set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    /// Training settings with the run seed and tokenizer threaded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, tokenize: self.tokenize, ..self.train.clone() }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { rate: self.mask_rate, boost: self.mask_boost, seed: self.seed, tokenize: self.tokenize }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let e = &self.train.encoder;
        let enc = crate::encoder::EncoderConfig { vocab_size: crate::corpus::NUM_SPECIAL + 1, ..e.clone() };
        enc.validate()?;
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config("mask.rate", "must be in (0, 1)"));
        }
        if !(self.mask_boost >= 1.0 && self.mask_boost.is_finite()) {
            return Err(Error::config("mask.boost", "must be >= 1"));
        }
        Ok(())
    }

    /// Checks that each named path key is set and points to a readable file.
    pub fn require_files(&self, keys: &[&str]) -> Result<()> {
        for &key in keys {
            let path = match key {
                "data.train" => &self.train_path,
                "data.dev" => &self.dev_path,
                "data.test" => &self.test_path,
                "data.lexicon" => &self.lexicon_path,
                _ => return Err(Error::config(key, "not a path key")),
            };
            match path {
                None => return Err(Error::config(key, "required but not set")),
                Some(p) if !p.is_file() => {
                    return Err(Error::config(key, format!("`{}` is not a readable file", p.display())));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        for (k, p) in [
            ("data.train", &self.train_path),
            ("data.dev", &self.dev_path),
            ("data.test", &self.test_path),
            ("data.lexicon", &self.lexicon_path),
        ] {
            if let Some(v) = path(p) {
                put(k, v);
            }
        }
        put("data.tokenize", self.tokenize.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", format!("{:?}", t.learning_rate));
        put("train.optimizer", t.optimizer.to_string());
        put("train.beta1", format!("{:?}", t.beta1));
        put("train.beta2", format!("{:?}", t.beta2));
        put("train.adam_eps", format!("{:?}", t.adam_eps));
        put("train.patience", t.patience.to_string());
        put("loss.alpha", format!("{:?}", t.loss.alpha));
        put("loss.epsilon", format!("{:?}", t.loss.epsilon));
        put("loss.mode", t.loss.mode.to_string());
        put("loss.scope", t.loss.scope.to_string());
        put("loss.clamp", t.loss.clamp_nonnegative.to_string());
        for y in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                put(&format!("loss.table.{}", ConditionTable::key(y, p)), t.loss.table.get(y, p).to_string());
            }
        }
        put("encoder.dim", t.encoder.dim.to_string());
        put("encoder.layers", t.encoder.layers.to_string());
        put("encoder.heads", t.encoder.heads.to_string());
        put("encoder.ffn_dim", t.encoder.ffn_dim.to_string());
        put("encoder.max_len", t.encoder.max_len.to_string());
        put("encoder.dropout", format!("{:?}", t.encoder.dropout_rate));
        put("mask.rate", format!("{:?}", self.mask_rate));
        put("mask.boost", format!("{:?}", self.mask_boost));
        s
    }

    /// Writes [`render`](Self::render) to `dir/effective.cfg`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::CorrectionMode;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = RunConfig::parse_str(
            "# run\nseed = 7\nloss.epsilon = 0.2 # trailing\nloss.mode=multiplicative\n\nencoder.dim = 32\nloss.table.t0p1 = C1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.loss.epsilon, 0.2);
        assert_eq!(cfg.train.loss.mode, CorrectionMode::Multiplicative);
        assert_eq!(cfg.train.encoder.dim, 32);
        assert_eq!(cfg.train_config().seed, 7);
    }

    #[test]
    fn unknown_key_names_field() {
        let err = RunConfig::parse_str("loss.epsilonn = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("loss.epsilonn"), "{err}");
        let err = RunConfig::parse_str("train.epochs = many\n").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        assert!(RunConfig::parse_str("just words\n").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("loss.epsilon", "0.3").unwrap();
        cfg.set("train.lr", "0.0005").unwrap();
        cfg.set("data.train", "a/b.jsonl").unwrap();
        cfg.set("loss.clamp", "true").unwrap();
        let back = RunConfig::parse_str(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_table_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("loss.table.t2p0", "C1").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("loss.table.t2p0"), "{err}");
        let mut ok = RunConfig::default();
        ok.set("loss.table.t2p1", "C3").unwrap();
        ok.validate().unwrap();
    }

    #[test]
    fn missing_files_are_reported() {
        let mut cfg = RunConfig::default();
        assert!(cfg.require_files(&["data.train"]).unwrap_err().to_string().contains("data.train"));
        cfg.set("data.train", "/definitely/not/here.jsonl").unwrap();
        assert!(cfg.require_files(&["data.train"]).is_err());
    }
}
