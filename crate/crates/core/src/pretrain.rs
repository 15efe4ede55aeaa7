//! Pretraining-instance generation: whole-word masking, knowledge-weighted
//! span selection that is re-drawn every epoch, and sentence-order pairs.
//!
//! Only data is produced here; no language model is trained.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenizeMode, Vocab, CLS, MASK, NUM_SPECIAL, SEP};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeLexicon {
    entries: HashMap<Vec<String>, f64>,
    longest: usize,
}

impl KnowledgeLexicon {
    pub fn empty() -> Self {
        KnowledgeLexicon { entries: HashMap::new(), longest: 0 }
    }

    pub fn insert(&mut self, tokens: Vec<String>, weight: f64) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("lexicon entry is empty".into()));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Invalid(format!("lexicon weight must be positive, got {weight}")));
        }
        self.longest = self.longest.max(tokens.len());
        self.entries.insert(tokens, weight);
        Ok(())
    }

    /// One surface form per line, optionally followed by a tab and a weight
    /// (default 1.0). Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, mode: TokenizeMode) -> std::result::Result<Self, (usize, String)> {
        let mut lex = KnowledgeLexicon::empty();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (surface, weight) = match line.split_once('\t') {
                Some((s, w)) => {
                    let w: f64 = w.trim().parse().map_err(|_| (line_no, format!("bad weight `{}`", w.trim())))?;
                    (s, w)
                }
                None => (line, 1.0),
            };
            let tokens = tokenize(surface, mode);
            lex.insert(tokens, weight).map_err(|e| (line_no, e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path, mode: TokenizeMode) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, mode).map_err(|(line, msg)| Error::Parse { path: path.display().to_string(), line, msg })
    }

    pub fn weight(&self, tokens: &[String]) -> Option<f64> {
        self.entries.get(tokens).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn longest(&self) -> usize {
        self.longest
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub is_knowledge: bool,
    /// Lexicon weight for knowledge spans, 1 otherwise.
    pub priority: f64,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn shifted(self, by: usize) -> WordSpan {
        WordSpan { start: self.start + by, end: self.end + by, ..self }
    }
}

/// Greedy left-to-right longest match against the lexicon; tokens outside
/// any entry become singleton spans.
pub fn segment_words<S: AsRef<str>>(tokens: &[S], lexicon: &KnowledgeLexicon) -> Vec<WordSpan> {
    let toks: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let longest = lexicon.longest().min(toks.len() - i);
        let hit = (1..=longest).rev().find_map(|n| lexicon.weight(&toks[i..i + n]).map(|w| (n, w)));
        let span = match hit {
            Some((n, w)) => WordSpan { start: i, end: i + n, is_knowledge: true, priority: w },
            None => WordSpan { start: i, end: i + 1, is_knowledge: false, priority: 1.0 },
        };
        i = span.end;
        spans.push(span);
    }
    spans
}

/// Sampling weight of a span: `boost * priority` for knowledge spans, else 1.
pub fn span_weight(span: &WordSpan, boost: f64) -> f64 {
    if span.is_knowledge {
        boost * span.priority
    } else {
        1.0
    }
}

/// `ceil(rate * tokens)`, at least 1.
pub fn mask_budget(tokens: usize, rate: f64) -> usize {
    ((rate * tokens as f64).ceil() as usize).max(1)
}

/// Indices of the selected spans in selection order. Spans are drawn
/// without replacement with probability proportional to [`span_weight`]
/// until the masked-token count reaches [`mask_budget`].
pub fn select_mask_spans(spans: &[WordSpan], rate: f64, boost: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if spans.is_empty() {
        return Err(Error::Invalid("cannot select mask spans from an empty span list".into()));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Invalid(format!("mask rate must be in (0, 1), got {rate}")));
    }
    if !(boost >= 1.0 && boost.is_finite()) {
        return Err(Error::Invalid(format!("knowledge boost must be >= 1, got {boost}")));
    }
    let total: usize = spans.iter().map(WordSpan::len).sum();
    let budget = mask_budget(total, rate);
    // Exponential-race keys ln(u) / w: sorting by key descending yields a
    // weighted sample without replacement in draw order.
    let mut keyed: Vec<(f64, usize)> = spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / span_weight(s, boost), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen = Vec::new();
    let mut covered = 0;
    for (_, i) in keyed {
        if covered >= budget {
            break;
        }
        covered += spans[i].len();
        chosen.push(i);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// 80% mask, 10% random token, 10% keep.
pub fn draw_corruption(rng: &mut ChaCha8Rng) -> Corruption {
    let u: f64 = rng.random();
    if u < 0.8 {
        Corruption::Mask
    } else if u < 0.9 {
        Corruption::Random
    } else {
        Corruption::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedSpan {
    pub span: WordSpan,
    pub corruption: Corruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedInstance {
    pub ids: Vec<usize>,
    /// Ascending.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub originals: Vec<usize>,
    pub epoch: u64,
    pub spans: Vec<CorruptedSpan>,
}

impl MaskedInstance {
    /// Input ids with every masked position restored.
    pub fn restored(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for (&p, &o) in self.mask_positions.iter().zip(&self.originals) {
            ids[p] = o;
        }
        ids
    }
}

/// Applies the given per-span decisions; `rng` is only consulted for random
/// replacement ids, drawn from the non-special range `[NUM_SPECIAL, vocab_size)`.
pub fn corrupt_spans(
    ids: &[usize],
    spans: &[WordSpan],
    decisions: &[Corruption],
    vocab_size: usize,
    epoch: u64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedInstance> {
    if spans.len() != decisions.len() {
        return Err(Error::Shape(format!("{} spans but {} decisions", spans.len(), decisions.len())));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Invalid("vocabulary has no ordinary tokens".into()));
    }
    let mut out = ids.to_vec();
    let mut positions = Vec::new();
    let mut record = Vec::with_capacity(spans.len());
    for (span, &c) in spans.iter().zip(decisions) {
        if span.start >= span.end || span.end > ids.len() {
            return Err(Error::Invalid(format!("span {}..{} outside sequence of length {}", span.start, span.end, ids.len())));
        }
        if let Some(p) = (span.start..span.end).find(|&p| ids[p] < NUM_SPECIAL) {
            return Err(Error::Invalid(format!("span {}..{} covers special token at {p}", span.start, span.end)));
        }
        for p in span.start..span.end {
            match c {
                Corruption::Mask => out[p] = MASK,
                Corruption::Random => out[p] = rng.random_range(NUM_SPECIAL..vocab_size),
                Corruption::Keep => {}
            }
            positions.push(p);
        }
        record.push(CorruptedSpan { span: *span, corruption: c });
    }
    positions.sort_unstable();
    if positions.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("selected spans overlap".into()));
    }
    let originals = positions.iter().map(|&p| ids[p]).collect();
    Ok(MaskedInstance { ids: out, mask_positions: positions, originals, epoch, spans: record })
}

/// One corruption draw per span, then [`corrupt_spans`].
pub fn apply_corruption(ids: &[usize], spans: &[WordSpan], vocab_size: usize, epoch: u64, rng: &mut ChaCha8Rng) -> Result<MaskedInstance> {
    let decisions: Vec<Corruption> = spans.iter().map(|_| draw_corruption(rng)).collect();
    corrupt_spans(ids, spans, &decisions, vocab_size, epoch, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopInstance {
    pub segment_a: Vec<usize>,
    pub segment_b: Vec<usize>,
    /// 1 if the segments are in document order, 0 if swapped.
    pub order_label: u8,
    pub epoch: u64,
}

impl SopInstance {
    /// `[CLS] a [SEP] b [SEP]`
    pub fn ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.segment_a.len() + self.segment_b.len() + 3);
        ids.push(CLS);
        ids.extend(&self.segment_a);
        ids.push(SEP);
        ids.extend(&self.segment_b);
        ids.push(SEP);
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PretrainInstance {
    Masked(MaskedInstance),
    Sop(SopInstance),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub rate: f64,
    pub boost: f64,
    pub seed: u64,
    pub tokenize: TokenizeMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { rate: 0.15, boost: 4.0, seed: 42, tokenize: TokenizeMode::Char }
    }
}

/// A document is a list of sentences.
pub type Document = Vec<String>;

/// One sentence per line; blank lines separate documents.
pub fn parse_documents(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.to_string());
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_documents(&text))
}

/// Vocabulary over every token of the documents.
pub fn documents_vocab(documents: &[Document], mode: TokenizeMode) -> Vocab {
    Vocab::build(documents.iter().flatten().flat_map(|s| tokenize(s, mode)))
}

/// Every instance for one epoch, in canonical order: per document, one
/// masked instance per sentence followed by one order-prediction pair per
/// consecutive sentence pair. Randomness depends only on
/// `(cfg.seed, epoch, document index)`.
pub fn generate_epoch_instances(
    documents: &[Document],
    lexicon: &KnowledgeLexicon,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    epoch: u64,
) -> Result<Vec<PretrainInstance>> {
    let epoch_seed = seed::mix(seed::sub_seed(cfg.seed, "mask"), epoch);
    let mut out = Vec::new();
    for (d, doc) in documents.iter().enumerate() {
        let mut rng = seed::rng_from(seed::mix(epoch_seed, d as u64));
        let mut encoded = Vec::with_capacity(doc.len());
        for sentence in doc {
            let tokens = tokenize(sentence, cfg.tokenize);
            if tokens.is_empty() {
                continue;
            }
            let body = vocab.ids(&tokens);
            let mut ids = Vec::with_capacity(body.len() + 2);
            ids.push(CLS);
            ids.extend(&body);
            ids.push(SEP);
            let spans: Vec<WordSpan> = segment_words(&tokens, lexicon).into_iter().map(|s| s.shifted(1)).collect();
            let picked = select_mask_spans(&spans, cfg.rate, cfg.boost, &mut rng)?;
            let chosen: Vec<WordSpan> = picked.iter().map(|&i| spans[i]).collect();
            out.push(PretrainInstance::Masked(apply_corruption(&ids, &chosen, vocab.len(), epoch, &mut rng)?));
            encoded.push(body);
        }
        for pair in encoded.windows(2) {
            let keep = rng.random_bool(0.5);
            let (a, b) = if keep { (&pair[0], &pair[1]) } else { (&pair[1], &pair[0]) };
            out.push(PretrainInstance::Sop(SopInstance {
                segment_a: a.clone(),
                segment_b: b.clone(),
                order_label: u8::from(keep),
                epoch,
            }));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct InstanceRecord<'a> {
    kind: &'static str,
    epoch: u64,
    ids: &'a [usize],
    mask_positions: &'a [usize],
    originals: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    order_label: Option<u8>,
}

/// Line-delimited records `{kind, epoch, ids, mask_positions, originals,
/// order_label?}` with `kind` either `mlm` or `sop`.
pub fn write_instances(path: &Path, instances: &[PretrainInstance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for inst in instances {
        let line = match inst {
            PretrainInstance::Masked(m) => serde_json::to_string(&InstanceRecord {
                kind: "mlm",
                epoch: m.epoch,
                ids: &m.ids,
                mask_positions: &m.mask_positions,
                originals: &m.originals,
                order_label: None,
            }),
            PretrainInstance::Sop(s) => serde_json::to_string(&InstanceRecord {
                kind: "sop",
                epoch: s.epoch,
                ids: &s.ids(),
                mask_positions: &[],
                originals: &[],
                order_label: Some(s.order_label),
            }),
        }
        .map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn default_vocab_path(instances_path: &Path) -> PathBuf {
    instances_path.with_extension("vocab.txt")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<String> {
        tokenize(s, TokenizeMode::Char)
    }

    fn lex(entries: &[&str]) -> KnowledgeLexicon {
        KnowledgeLexicon::parse(&entries.join("\n"), TokenizeMode::Char).unwrap()
    }

    fn span(start: usize, end: usize, k: bool) -> (usize, usize, bool) {
        (start, end, k)
    }

    fn shape(spans: &[WordSpan]) -> Vec<(usize, usize, bool)> {
        spans.iter().map(|s| (s.start, s.end, s.is_knowledge)).collect()
    }

    #[test]
    fn longest_match_segmentation() {
        let s = segment_words(&chars("北京很大"), &lex(&["北京"]));
        assert_eq!(shape(&s), vec![span(0, 2, true), span(2, 3, false), span(3, 4, false)]);
        let s = segment_words(&chars("北京很"), &lex(&["北京", "北京很"]));
        assert_eq!(shape(&s), vec![span(0, 3, true)]);
        let s = segment_words(&chars("abc"), &KnowledgeLexicon::empty());
        assert_eq!(shape(&s), vec![span(0, 1, false), span(1, 2, false), span(2, 3, false)]);
    }

    #[test]
    fn lexicon_parsing() {
        let l = KnowledgeLexicon::parse("北京\t2.5\n# note\n\n上海\n", TokenizeMode::Char).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.weight(&chars("北京")), Some(2.5));
        assert_eq!(l.weight(&chars("上海")), Some(1.0));
        assert_eq!(KnowledgeLexicon::parse("a\t0\n", TokenizeMode::Char).unwrap_err().0, 1);
        assert_eq!(KnowledgeLexicon::parse("a\nb\tx\n", TokenizeMode::Char).unwrap_err().0, 2);
        assert!(KnowledgeLexicon::parse(" \t1\n", TokenizeMode::Char).is_err());
    }

    #[test]
    fn budget_on_singletons() {
        let spans: Vec<WordSpan> = (0..100).map(|i| WordSpan { start: i, end: i + 1, is_knowledge: false, priority: 1.0 }).collect();
        let mut rng = seed::rng_from(1);
        for _ in 0..50 {
            let c = select_mask_spans(&spans, 0.15, 4.0, &mut rng).unwrap();
            assert_eq!(c.len(), 15);
            let mut sorted = c.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 15);
        }
    }

    #[test]
    fn selection_rejects_bad_input() {
        let mut rng = seed::rng_from(1);
        assert!(select_mask_spans(&[], 0.15, 4.0, &mut rng).is_err());
        let one = [WordSpan { start: 0, end: 1, is_knowledge: false, priority: 1.0 }];
        assert!(select_mask_spans(&one, 0.0, 4.0, &mut rng).is_err());
        assert!(select_mask_spans(&one, 0.15, 0.5, &mut rng).is_err());
        assert_eq!(select_mask_spans(&one, 0.15, 1.0, &mut rng).unwrap(), vec![0]);
    }

    #[test]
    fn forced_branches() {
        let ids = vec![CLS, 7, 8, 9, SEP];
        let sp = [WordSpan { start: 1, end: 3, is_knowledge: true, priority: 1.0 }];
        let mut rng = seed::rng_from(3);
        let m = corrupt_spans(&ids, &sp, &[Corruption::Mask], 20, 0, &mut rng).unwrap();
        assert_eq!(m.ids, vec![CLS, MASK, MASK, 9, SEP]);
        assert_eq!(m.mask_positions, vec![1, 2]);
        assert_eq!(m.originals, vec![7, 8]);
        let k = corrupt_spans(&ids, &sp, &[Corruption::Keep], 20, 0, &mut rng).unwrap();
        assert_eq!(k.ids, ids);
        assert_eq!(k.mask_positions, vec![1, 2]);
        let r = corrupt_spans(&ids, &sp, &[Corruption::Random], 20, 0, &mut rng).unwrap();
        assert!(r.ids[1..3].iter().all(|&t| (NUM_SPECIAL..20).contains(&t)));
        assert_eq!(r.restored(), ids);
    }

    #[test]
    fn special_tokens_cannot_be_masked() {
        let ids = vec![CLS, 7, SEP];
        let sp = [WordSpan { start: 0, end: 2, is_knowledge: false, priority: 1.0 }];
        let mut rng = seed::rng_from(3);
        assert!(apply_corruption(&ids, &sp, 20, 0, &mut rng).is_err());
        let out_of_range = [WordSpan { start: 2, end: 4, is_knowledge: false, priority: 1.0 }];
        assert!(apply_corruption(&ids, &out_of_range, 20, 0, &mut rng).is_err());
    }

    fn corpus() -> (Vec<Document>, KnowledgeLexicon, Vocab) {
        let docs = parse_documents("北京很大。\n上海也很大。\n\n天津在北方\n\n长江很长\n黄河也长\n珠江在南方\n");
        let lexicon = lex(&["北京", "上海", "长江", "黄河"]);
        let vocab = documents_vocab(&docs, TokenizeMode::Char);
        (docs, lexicon, vocab)
    }

    #[test]
    fn documents_split_on_blank_lines() {
        let (docs, _, _) = corpus();
        assert_eq!(docs.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1, 3]);
    }

    #[test]
    fn epoch_stream_is_deterministic_and_structured() {
        let (docs, lexicon, vocab) = corpus();
        let cfg = PretrainConfig::default();
        let a = generate_epoch_instances(&docs, &lexicon, &vocab, &cfg, 0).unwrap();
        let b = generate_epoch_instances(&docs, &lexicon, &vocab, &cfg, 0).unwrap();
        assert_eq!(a, b);
        let masked = a.iter().filter(|i| matches!(i, PretrainInstance::Masked(_))).count();
        let sop: Vec<&SopInstance> = a
            .iter()
            .filter_map(|i| match i {
                PretrainInstance::Sop(s) => Some(s),
                _ => None,
            })
            .collect();
        assert_eq!(masked, 6);
        assert_eq!(sop.len(), 1 + 2);
        for s in sop {
            assert!(s.order_label <= 1);
        }
    }

    #[test]
    fn sop_label_matches_order() {
        let (docs, lexicon, vocab) = corpus();
        let first = vocab.ids(&chars(&docs[0][0]));
        for epoch in 0..20 {
            let inst = generate_epoch_instances(&docs, &lexicon, &vocab, &PretrainConfig::default(), epoch).unwrap();
            let PretrainInstance::Sop(s) = &inst[2] else { panic!("expected sop at index 2") };
            assert_eq!(s.order_label == 1, s.segment_a == first);
        }
    }

    #[test]
    fn records_have_expected_fields() {
        let (docs, lexicon, vocab) = corpus();
        let inst = generate_epoch_instances(&docs, &lexicon, &vocab, &PretrainConfig::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.jsonl");
        write_instances(&path, &inst).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), inst.len());
        assert_eq!(lines[0]["kind"], "mlm");
        assert!(lines[0].get("order_label").is_none());
        let sop = lines.iter().find(|l| l["kind"] == "sop").unwrap();
        assert!(sop["order_label"].is_u64());
        assert_eq!(sop["ids"][0], CLS);
    }
}
