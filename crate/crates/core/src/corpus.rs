//! Sentence-pair records: loading, tokenization, input assembly, statistics
//! and a seeded synthetic generator with controllable label imbalance.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed;
use crate::NUM_CLASSES;

/// One query/title pair with its ordinal relevance label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub s1: String,
    pub s2: String,
    pub label: usize,
}

impl Example {
    pub fn new(id: u64, s1: impl Into<String>, s2: impl Into<String>, label: usize) -> Result<Self> {
        let ex = Example { id, s1: s1.into(), s2: s2.into(), label };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<()> {
        if self.label >= NUM_CLASSES {
            return Err(Error::Invalid(format!("unknown label `{}`", self.label)));
        }
        if self.s1.trim().is_empty() || self.s2.trim().is_empty() {
            return Err(Error::Invalid(format!("example {} has an empty sentence", self.id)));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: u64,
    query: &'a str,
    title: &'a str,
    label: String,
}

fn parse_record(line: &str) -> std::result::Result<Example, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let obj = v.as_object().ok_or("malformed record: expected an object")?;
    let id = match obj.get("id") {
        Some(Value::Number(n)) => n.as_u64().ok_or_else(|| format!("bad id `{n}`"))?,
        Some(Value::String(s)) => s.trim().parse().map_err(|_| format!("bad id `{s}`"))?,
        _ => return Err("missing field `id`".into()),
    };
    let text = |key: &str| -> std::result::Result<String, String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            _ => Err(format!("missing field `{key}`")),
        }
    };
    let query = text("query")?;
    let title = text("title")?;
    let label_raw = match obj.get("label") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing field `label`".into()),
    };
    let label = match label_raw.trim() {
        "0" => 0,
        "1" => 1,
        "2" => 2,
        other => return Err(format!("unknown label `{other}`")),
    };
    let ex = Example { id, s1: query, s2: title, label };
    ex.validate().map_err(|e| e.to_string())?;
    Ok(ex)
}

/// Reads line-delimited `{id, query, title, label}` records in file order.
/// Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(&line).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let rec = RecordOut { id: ex.id, query: &ex.s1, title: &ex.s2, label: ex.label.to_string() };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    /// One token per non-whitespace character (CJK text).
    #[default]
    Char,
    /// Split on runs of whitespace.
    Whitespace,
}

impl std::str::FromStr for TokenizeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "char" => Ok(TokenizeMode::Char),
            "whitespace" => Ok(TokenizeMode::Whitespace),
            _ => Err(format!("unknown tokenize mode `{s}` (char|whitespace)")),
        }
    }
}

impl std::fmt::Display for TokenizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenizeMode::Char => "char",
            TokenizeMode::Whitespace => "whitespace",
        })
    }
}

pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        TokenizeMode::Whitespace => text.split_whitespace().map(String::from).collect(),
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Token table with the five reserved specials at fixed ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Adds tokens in first-seen order.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn from_examples(examples: &[Example], mode: TokenizeMode) -> Self {
        let mut v = Vocab::new();
        for ex in examples {
            for t in tokenize(&ex.s1, mode).iter().chain(tokenize(&ex.s2, mode).iter()) {
                v.insert(t);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "vocabulary must start with the five special tokens".into(),
            });
        }
        let mut v = Vocab::new();
        for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIAL) {
            if v.index.contains_key(*t) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("duplicate token `{t}`"),
                });
            }
            v.insert(t);
        }
        Ok(v)
    }
}

/// `[CLS] S1 [SEP] S2 [SEP]`, optionally followed by `[PAD]`s.
///
/// `length` counts the real tokens; `ids.len()` may be larger when padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub ids: Vec<usize>,
    pub length: usize,
    pub s1_span: Range<usize>,
    pub s2_span: Range<usize>,
}

impl InputSequence {
    pub fn padded(&self, to: usize) -> InputSequence {
        let mut out = self.clone();
        if out.ids.len() < to {
            out.ids.resize(to, PAD);
        }
        out
    }
}

/// Builds the model input. Over-long pairs are truncated longest-first,
/// trimming S2 when both sentences have equal length, so both `[SEP]`s and
/// at least one token of every non-empty sentence survive.
pub fn assemble_input(s1: &[usize], s2: &[usize], max_len: usize) -> Result<InputSequence> {
    if max_len < 5 {
        return Err(Error::Invalid(format!("max_len must be >= 5, got {max_len}")));
    }
    if s1.is_empty() && s2.is_empty() {
        return Err(Error::Invalid("both sentences are empty".into()));
    }
    let budget = max_len - 3;
    let (mut n1, mut n2) = (s1.len(), s2.len());
    while n1 + n2 > budget {
        if n2 >= n1 {
            n2 -= 1;
        } else {
            n1 -= 1;
        }
    }
    let mut ids = Vec::with_capacity(n1 + n2 + 3);
    ids.push(CLS);
    ids.extend_from_slice(&s1[..n1]);
    ids.push(SEP);
    ids.extend_from_slice(&s2[..n2]);
    ids.push(SEP);
    let length = ids.len();
    Ok(InputSequence { ids, length, s1_span: 1..1 + n1, s2_span: n1 + 2..n1 + 2 + n2 })
}

/// Tokenizes and assembles one example against `vocab`.
pub fn encode_example(ex: &Example, vocab: &Vocab, mode: TokenizeMode, max_len: usize) -> Result<InputSequence> {
    let a = vocab.ids(&tokenize(&ex.s1, mode));
    let b = vocab.ids(&tokenize(&ex.s2, mode));
    assemble_input(&a, &b, max_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub counts: [u64; NUM_CLASSES],
}

impl LabelCounts {
    pub fn new(n0: u64, n1: u64, n2: u64) -> Self {
        LabelCounts { counts: [n0, n1, n2] }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        let mut counts = [0u64; NUM_CLASSES];
        for &l in labels {
            counts[l] += 1;
        }
        LabelCounts { counts }
    }

    pub fn n0(&self) -> u64 {
        self.counts[0]
    }
    pub fn n1(&self) -> u64 {
        self.counts[1]
    }
    pub fn n2(&self) -> u64 {
        self.counts[2]
    }
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn label_counts(examples: &[Example]) -> LabelCounts {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    LabelCounts::from_labels(&labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub examples: usize,
    pub avg_s1_len: f64,
    pub avg_s2_len: f64,
    /// Assembled length including the three special tokens.
    pub avg_token_len: f64,
    pub counts: LabelCounts,
    /// Counts divided by the smallest count; raw counts when `degenerate`.
    pub ratio: [f64; NUM_CLASSES],
    /// Set when some class is absent, so no normalization was possible.
    pub degenerate: bool,
}

impl StatsReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<14}{:>12}\n", "examples", self.examples));
        s.push_str(&format!("{:<14}{:>12.2}\n", "avg s1", self.avg_s1_len));
        s.push_str(&format!("{:<14}{:>12.2}\n", "avg s2", self.avg_s2_len));
        s.push_str(&format!("{:<14}{:>12.2}\n", "avg token", self.avg_token_len));
        let c = self.counts.counts;
        s.push_str(&format!("{:<14}{:>12}\n", "label counts", format!("{}/{}/{}", c[0], c[1], c[2])));
        let r = self.ratio;
        let ratio = if self.degenerate {
            format!("{} : {} : {} (degenerate)", c[0], c[1], c[2])
        } else {
            format!("{:.2} : {:.2} : {:.2}", r[0], r[1], r[2])
        };
        s.push_str(&format!("{:<14}{:>12}\n", "label ratio", ratio));
        s
    }
}

pub fn dataset_stats(examples: &[Example], mode: TokenizeMode) -> Result<StatsReport> {
    if examples.is_empty() {
        return Err(Error::Invalid("dataset_stats needs at least one example".into()));
    }
    let (mut s1, mut s2) = (0usize, 0usize);
    for ex in examples {
        s1 += tokenize(&ex.s1, mode).len();
        s2 += tokenize(&ex.s2, mode).len();
    }
    let n = examples.len() as f64;
    let counts = label_counts(examples);
    let min = *counts.counts.iter().min().expect("three classes");
    let degenerate = min == 0;
    let ratio = if degenerate {
        counts.counts.map(|c| c as f64)
    } else {
        counts.counts.map(|c| c as f64 / min as f64)
    };
    Ok(StatsReport {
        examples: examples.len(),
        avg_s1_len: s1 as f64 / n,
        avg_s2_len: s2 as f64 / n,
        avg_token_len: (s1 + s2 + 3 * examples.len()) as f64 / n,
        counts,
        ratio,
        degenerate,
    })
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub ratio: [f64; NUM_CLASSES],
    pub s1_len: f64,
    pub s2_len: f64,
    /// Fraction of S1's tokens that reappear in S2, per label.
    pub overlap: [f64; NUM_CLASSES],
    pub vocab_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_size: 18_000,
            dev_size: 2_000,
            test_size: 1_000,
            ratio: [2.0, 5.0, 1.0],
            s1_len: 9.6,
            s2_len: 25.4,
            overlap: [0.05, 0.40, 0.80],
            vocab_size: 400,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::Invalid("split sizes must be positive".into()));
        }
        if self.ratio.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Invalid(format!("ratio components must be positive, got {:?}", self.ratio)));
        }
        if let Some(o) = self.overlap.iter().find(|o| !(0.0..=1.0).contains(*o)) {
            return Err(Error::Invalid(format!("overlap {o} outside [0, 1]")));
        }
        if !(self.s1_len >= 1.0 && self.s2_len >= 1.0) {
            return Err(Error::Invalid("length targets must be >= 1".into()));
        }
        let max_s1 = (self.s1_len * 1.5).round() as usize + 1;
        if self.vocab_size < 2 * max_s1 + 8 {
            return Err(Error::Invalid(format!(
                "vocab_size {} too small for s1 length target {}",
                self.vocab_size, self.s1_len
            )));
        }
        Ok(())
    }
}

/// Splits of a generated (or loaded) dataset, named after the public release.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test_public: Vec<Example>,
}

impl Splits {
    pub const FILE_NAMES: [&'static str; 3] = ["train.jsonl", "dev.jsonl", "test_public.jsonl"];

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in Self::FILE_NAMES.iter().zip([&self.train, &self.dev, &self.test_public]) {
            write_dataset(&dir.join(name), split)?;
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `size` over `ratio`.
pub fn proportion(size: usize, ratio: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let sum: f64 = ratio.iter().sum();
    let exact = ratio.map(|r| size as f64 * r / sum);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut rest = size - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    counts
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn draw_len<R: Rng>(rng: &mut R, mean: f64) -> usize {
    // uniform on [mean/2, 3*mean/2], rounded
    let x = mean * (0.5 + rng.random::<f64>());
    (x.round() as usize).max(1)
}

fn generate_pair<R: Rng>(rng: &mut R, spec: &SyntheticSpec, label: usize) -> (Vec<usize>, Vec<usize>) {
    let n1 = draw_len(rng, spec.s1_len);
    let s1: Vec<usize> = rand::seq::index::sample(rng, spec.vocab_size, n1).into_vec();
    // stochastic rounding keeps the expected shared fraction exact
    let shared = ((spec.overlap[label] * n1 as f64 + rng.random::<f64>()).floor() as usize).min(n1);
    let mut pool = s1.clone();
    pool.shuffle(rng);
    let in_s1: HashSet<usize> = s1.iter().copied().collect();
    let n2 = draw_len(rng, spec.s2_len).max(shared);
    let mut s2: Vec<usize> = pool[..shared].to_vec();
    while s2.len() < n2 {
        let w = rng.random_range(0..spec.vocab_size);
        if !in_s1.contains(&w) {
            s2.push(w);
        }
    }
    s2.shuffle(rng);
    (s1, s2)
}

fn generate_split(spec: &SyntheticSpec, size: usize, seed: u64) -> Vec<Example> {
    let mut rng = seed::rng_from(seed);
    let counts = proportion(size, &spec.ratio);
    let mut labels: Vec<usize> = (0..NUM_CLASSES).flat_map(|k| std::iter::repeat_n(k, counts[k])).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let (a, b) = generate_pair(&mut rng, spec, label);
            let join = |ws: &[usize]| ws.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ");
            Example { id: i as u64, s1: join(&a), s2: join(&b), label }
        })
        .collect()
}

/// Generates train/dev/test_public splits with exact label proportions.
/// Tokens are whitespace-separated words `w0..w{vocab_size-1}`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, spec.train_size, seed::sub_seed(seed, "synthetic/train")),
        dev: generate_split(spec, spec.dev_size, seed::sub_seed(seed, "synthetic/dev")),
        test_public: generate_split(spec, spec.test_size, seed::sub_seed(seed, "synthetic/test_public")),
    })
}

/// Fraction of S1's distinct tokens that also occur in S2.
pub fn token_overlap(s1: &[String], s2: &[String]) -> f64 {
    let a: HashSet<&String> = s1.iter().collect();
    if a.is_empty() {
        return 0.0;
    }
    let b: HashSet<&String> = s2.iter().collect();
    a.iter().filter(|t| b.contains(*t)).count() as f64 / a.len() as f64
}
