//! Corpus loading, vocabulary, tokenization, and mini-batching.
//!
//! Tokenization is whitespace-lowercase. Sentence pairs are joined into a
//! single sequence as `[CLS] first [SEP] second`.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

/// One labeled text example; `text2` holds the second segment of a pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text2: Option<String>,
    pub label: usize,
}

/// Token table with fixed reserved indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

/// Builds a vocabulary over both text segments. Tokens seen fewer than
/// `min_freq` times fall back to UNK. Index assignment follows first
/// occurrence in corpus order, so the result is deterministic.
pub fn build_vocab(corpus: &[Example], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut count = |tok: String, order: &mut Vec<String>| {
        let e = counts.entry(tok.clone()).or_insert(0);
        if *e == 0 {
            order.push(tok);
        }
        *e += 1;
    };
    for ex in corpus {
        for tok in split_tokens(&ex.text) {
            count(tok, &mut order);
        }
        if let Some(t2) = &ex.text2 {
            for tok in split_tokens(t2) {
                count(tok, &mut order);
            }
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    for tok in order {
        if counts[&tok] >= min_freq {
            tokens.push(tok);
        }
    }
    Ok(Vocab::from_tokens(tokens))
}

/// Token indices plus a mask marking CLS/SEP positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// true at CLS/SEP positions.
    pub special: Vec<bool>,
}

/// `[CLS] first ([SEP] second)` truncated to `max_len`.
pub fn tokenize(text: &str, text2: Option<&str>, vocab: &Vocab, max_len: usize) -> Result<TokenizedText> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut ids = vec![CLS];
    let mut special = vec![true];
    for tok in split_tokens(text) {
        ids.push(vocab.lookup(&tok));
        special.push(false);
    }
    if let Some(t2) = text2 {
        ids.push(SEP);
        special.push(true);
        for tok in split_tokens(t2) {
            ids.push(vocab.lookup(&tok));
            special.push(false);
        }
    }
    ids.truncate(max_len);
    special.truncate(max_len);
    Ok(TokenizedText { ids, special })
}

/// Maps indices back to tokens, dropping CLS/SEP/PAD.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .filter(|&&i| i != PAD && i != CLS && i != SEP)
        .map(|&i| vocab.token(i).to_string())
        .collect()
}

/// An example after tokenization, ready for batching.
#[derive(Debug, Clone)]
pub struct TokenizedExample {
    pub id: String,
    pub ids: Vec<usize>,
    pub special: Vec<bool>,
    pub label: usize,
}

pub fn tokenize_corpus(
    corpus: &[Example],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TokenizedExample>> {
    corpus
        .iter()
        .map(|ex| {
            let t = tokenize(&ex.text, ex.text2.as_deref(), vocab, max_len)?;
            Ok(TokenizedExample {
                id: ex.id.clone(),
                ids: t.ids,
                special: t.special,
                label: ex.label,
            })
        })
        .collect()
}

/// A padded mini-batch. All rows share one length; masks are consistent
/// with the per-example true lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    pub example_ids: Vec<String>,
    /// batch x padded_len token indices.
    pub ids: Vec<Vec<usize>>,
    /// true = real token, false = padding.
    pub attn_mask: Vec<Vec<bool>>,
    /// true = CLS/SEP/PAD position.
    pub special: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    /// Unpadded sequence lengths (including CLS/SEP).
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn padded_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Positions of real (non-special) tokens for example `i`.
    pub fn real_positions(&self, i: usize) -> Vec<usize> {
        self.special[i]
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(p, _)| p)
            .collect()
    }
}

fn pad_into_batch(group: &[TokenizedExample]) -> Batch {
    let width = group.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let mut batch = Batch {
        example_ids: Vec::with_capacity(group.len()),
        ids: Vec::with_capacity(group.len()),
        attn_mask: Vec::with_capacity(group.len()),
        special: Vec::with_capacity(group.len()),
        labels: Vec::with_capacity(group.len()),
        lengths: Vec::with_capacity(group.len()),
    };
    for ex in group {
        let len = ex.ids.len();
        let mut ids = ex.ids.clone();
        let mut special = ex.special.clone();
        let mut mask = vec![true; len];
        ids.resize(width, PAD);
        special.resize(width, true);
        mask.resize(width, false);
        batch.example_ids.push(ex.id.clone());
        batch.ids.push(ids);
        batch.attn_mask.push(mask);
        batch.special.push(special);
        batch.labels.push(ex.label);
        batch.lengths.push(len);
    }
    batch
}

/// Splits the corpus into shuffled mini-batches. The permutation depends
/// only on (seed, epoch). The final partial batch is kept. With
/// `sort_by_length` batches group similar lengths; batch order is still
/// shuffled.
pub fn make_batches(
    examples: &[TokenizedExample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    sort_by_length: bool,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2 (pair construction needs two examples), got {batch_size}"
        )));
    }
    let mut rng = substream(seed, "shuffle", epoch as u64);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    if sort_by_length {
        order.sort_by_key(|&i| examples[i].ids.len());
    }
    let mut groups: Vec<Vec<TokenizedExample>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| examples[i].clone()).collect())
        .collect();
    if sort_by_length {
        groups.shuffle(&mut rng);
    }
    Ok(groups.iter().map(|g| pad_into_batch(g)).collect())
}

/// Evaluation batching: corpus order, no shuffling.
pub fn make_eval_batches(examples: &[TokenizedExample], batch_size: usize) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .map(pad_into_batch)
        .collect()
}

// ── JSONL corpus format ─────────────────────────────────────────────

#[derive(Deserialize)]
struct RawExample {
    id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    text2: Option<String>,
    label: Option<i64>,
}

/// Reads `{"id", "text", "text2"?, "label"}` JSONL. Errors carry the
/// 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{lineno}: invalid JSON: {e}", path.display()))
        })?;
        let id = raw
            .id
            .ok_or_else(|| Error::Data(format!("{}:{lineno}: missing id field", path.display())))?;
        let text = raw.text.ok_or_else(|| {
            Error::Data(format!("{}:{lineno}: missing text field", path.display()))
        })?;
        if text.trim().is_empty() {
            return Err(Error::Data(format!(
                "{}:{lineno}: text must be non-empty",
                path.display()
            )));
        }
        let label = raw.label.ok_or_else(|| {
            Error::Data(format!("{}:{lineno}: missing label column", path.display()))
        })?;
        if label < 0 {
            return Err(Error::Data(format!(
                "{}:{lineno}: label must be non-negative, got {label}",
                path.display()
            )));
        }
        out.push(Example {
            id,
            text,
            text2: raw.text2,
            label: label as usize,
        });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for ex in examples {
        serde_json::to_writer(&mut file, ex)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Number of classes implied by a corpus (max label + 1).
pub fn num_classes(corpus: &[Example]) -> usize {
    corpus.iter().map(|e| e.label + 1).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, text: &str, label: usize) -> Example {
        Example {
            id: id.into(),
            text: text.into(),
            text2: None,
            label,
        }
    }

    #[test]
    fn vocab_respects_min_freq_threshold() {
        let corpus = vec![ex("1", "a a b", 0)];
        let vocab = build_vocab(&corpus, 2).unwrap();
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert_eq!(vocab.lookup("b"), UNK);
    }

    #[test]
    fn vocab_is_deterministic() {
        let corpus = vec![ex("1", "x y z", 0), ex("2", "y q", 1)];
        let v1 = build_vocab(&corpus, 1).unwrap();
        let v2 = build_vocab(&corpus, 1).unwrap();
        assert_eq!(v1.tokens, v2.tokens);
    }

    #[test]
    fn vocab_size_is_reserved_plus_distinct() {
        let corpus = vec![ex("1", "red fish", 0), ex("2", "blue fish", 1), ex("3", "red", 0)];
        let vocab = build_vocab(&corpus, 1).unwrap();
        assert_eq!(vocab.len(), 4 + 3); // red, fish, blue
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        assert!(matches!(build_vocab(&[], 1), Err(Error::Data(_))));
    }

    #[test]
    fn tokenize_single_segment() {
        let corpus = vec![ex("1", "a b", 0)];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let t = tokenize("A b", None, &vocab, 16).unwrap();
        assert_eq!(t.ids, vec![CLS, vocab.lookup("a"), vocab.lookup("b")]);
        assert_eq!(t.special, vec![true, false, false]);
    }

    #[test]
    fn tokenize_pair_inserts_separator() {
        let corpus = vec![ex("1", "p h", 0)];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let t = tokenize("p", Some("h"), &vocab, 16).unwrap();
        assert_eq!(t.ids, vec![CLS, vocab.lookup("p"), SEP, vocab.lookup("h")]);
        assert_eq!(t.special, vec![true, false, true, false]);
    }

    #[test]
    fn unseen_token_maps_to_unk() {
        let corpus = vec![ex("1", "known", 0)];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let t = tokenize("mystery", None, &vocab, 16).unwrap();
        assert_eq!(t.ids[1], UNK);
    }

    #[test]
    fn detokenize_round_trips_lowercased_tokens() {
        let corpus = vec![ex("1", "Alpha Beta gamma", 0)];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let t = tokenize("Alpha Beta gamma", None, &vocab, 16).unwrap();
        let back = detokenize(&t.ids, &vocab);
        assert_eq!(back, vec!["alpha", "beta", "gamma"]);
    }

    fn toy_tokenized(n: usize) -> Vec<TokenizedExample> {
        (0..n)
            .map(|i| TokenizedExample {
                id: format!("e{i}"),
                ids: vec![CLS, 4 + (i % 3)],
                special: vec![true, false],
                label: i % 2,
            })
            .collect()
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let batches = make_batches(&toy_tokenized(10), 4, 7, 0, false).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batch_order_is_seed_deterministic() {
        let data = toy_tokenized(10);
        let a = make_batches(&data, 4, 11, 2, false).unwrap();
        let b = make_batches(&data, 4, 11, 2, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.example_ids, y.example_ids);
        }
    }

    #[test]
    fn different_seeds_permute_differently() {
        // Frozen case: 24 examples is enough that a collision is
        // essentially impossible; this asserts a fixed pair of seeds.
        let data = toy_tokenized(24);
        let a = make_batches(&data, 8, 1, 0, false).unwrap();
        let b = make_batches(&data, 8, 2, 0, false).unwrap();
        let flat_a: Vec<&String> = a.iter().flat_map(|x| &x.example_ids).collect();
        let flat_b: Vec<&String> = b.iter().flat_map(|x| &x.example_ids).collect();
        assert_ne!(flat_a, flat_b);
    }

    #[test]
    fn batch_size_below_two_is_rejected() {
        assert!(matches!(
            make_batches(&toy_tokenized(4), 1, 0, 0, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masks_are_consistent_with_lengths() {
        let mut data = toy_tokenized(3);
        data[1].ids = vec![CLS, 4, 5, 6];
        data[1].special = vec![true, false, false, false];
        let batches = make_batches(&data, 3, 0, 0, false).unwrap();
        for b in &batches {
            for i in 0..b.size() {
                let real: usize = b.attn_mask[i].iter().filter(|m| **m).count();
                assert_eq!(real, b.lengths[i]);
                for p in 0..b.padded_len() {
                    if !b.attn_mask[i][p] {
                        assert_eq!(b.ids[i][p], PAD);
                        assert!(b.special[i][p]);
                    }
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let examples = vec![
            ex("a", "hello world", 0),
            Example {
                id: "b".into(),
                text: "premise".into(),
                text2: Some("hypothesis".into()),
                label: 1,
            },
        ];
        write_jsonl(&path, &examples).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded, examples);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"id\":\"x\",\"text\":\"ok\",\"label\":0}\n{\"id\":\"y\",\"text\":\"no label\"}\n").unwrap();
        let err = load_jsonl(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "should carry line number: {msg}");
        assert!(msg.contains("label"), "should name the missing column: {msg}");
    }
}
