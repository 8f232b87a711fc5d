//! Vocabularies, parallel corpora and the synthetic task generators.
//!
//! Ids 0–3 are reserved for padding, unknown, start and end of sequence.
//! Every sequence stored in a [`ParallelCorpus`] ends with [`EOS`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
/// Number of reserved ids.
pub const RESERVED: usize = 4;
/// Surface forms of the reserved ids.
pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token ↔ id bijection over the reserved ids plus content tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Content tokens receive ids 4, 5, … in iteration order.
    pub fn new<S: Into<String>>(content: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for tok in content {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary token {tok:?}")));
            }
            if index.contains_key(&tok) {
                return Err(Error::contract(format!("duplicate or reserved vocabulary token {tok:?}")));
            }
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    /// Content tokens in id order.
    pub fn content(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// Whitespace-tokenised ids of `line` followed by [`EOS`].
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).chain([EOS]).collect()
    }

    /// Tokens up to the first [`EOS`], joined by spaces; PAD and SOS are
    /// skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != SOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One content token per line; line `k` (from 0) holds id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.content().join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_utf8(path)?;
        Vocabulary::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string))
            .map_err(|e| Error::ingest(path, e.to_string()))
    }
}

/// One source/target pair of id sequences, each ending with [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every sequence ends with EOS, has no other EOS or PAD, and all ids
    /// fall inside the vocabularies.
    pub fn is_well_formed(&self) -> bool {
        let ok = |seq: &[usize], vocab: &Vocabulary| {
            seq.last() == Some(&EOS)
                && seq[..seq.len() - 1].iter().all(|&i| i != EOS && i != PAD && i < vocab.len())
        };
        self.pairs.iter().all(|p| ok(&p.source, &self.source_vocab) && ok(&p.target, &self.target_vocab))
    }

    /// First `n` pairs and the rest, sharing vocabularies.
    pub fn split_at(&self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let n = n.min(self.pairs.len());
        let part = |pairs: &[Pair]| ParallelCorpus {
            pairs: pairs.to_vec(),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
        };
        (part(&self.pairs[..n]), part(&self.pairs[n..]))
    }
}

fn with_eos(mut seq: Vec<usize>) -> Vec<usize> {
    seq.push(EOS);
    seq
}

/// Token names for all `bits`-wide binary patterns, most significant bit
/// first.
pub fn bit_pattern_tokens(bits: usize) -> Vec<String> {
    (0..1usize << bits).map(|v| format!("{v:0bits$b}")).collect()
}

/// Random binary patterns copied verbatim. Pattern value `v` is token id
/// `v + 4`. Lengths are uniform in `[min_len, max_len]`.
pub fn generate_copy_task(count: usize, min_len: usize, max_len: usize, bits: usize, seed: u64) -> Result<ParallelCorpus> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::contract(format!("copy task lengths must satisfy 1 ≤ min ≤ max, got {min_len}..{max_len}")));
    }
    if bits == 0 || bits > 16 {
        return Err(Error::contract(format!("copy task bit width must lie in 1..=16, got {bits}")));
    }
    let vocab = Vocabulary::new(bit_pattern_tokens(bits))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..count)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let seq: Vec<usize> = (0..len).map(|_| RESERVED + rng.gen_range(0..1usize << bits)).collect();
            Pair { source: with_eos(seq.clone()), target: with_eos(seq) }
        })
        .collect();
    Ok(ParallelCorpus { pairs, source_vocab: vocab.clone(), target_vocab: vocab })
}

/// The toy translation rule: substitute every token through `substitution`
/// (indexed by content position), then swap each adjacent pair
/// `(x1, x2), (x3, x4), …`; an odd final token stays in place. Input and
/// output are content ids without EOS.
pub fn toy_translate(source: &[usize], substitution: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = source.iter().map(|&t| RESERVED + substitution[t - RESERVED]).collect();
    for pair in out.chunks_mut(2) {
        pair.reverse();
    }
    out
}

/// The substitution bijection drawn for `seed`: a shuffle of
/// `0..vocab_size`, the first draw from the seeded stream.
pub fn toy_substitution(vocab_size: usize, seed: u64) -> Vec<usize> {
    toy_substitution_from(vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn toy_substitution_from(vocab_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut sub: Vec<usize> = (0..vocab_size).collect();
    sub.shuffle(rng);
    sub
}

/// Substitution + adjacent-swap translation task. Source tokens are named
/// `s0…`, target tokens `t0…`; `vocab_size` counts content tokens only.
///
/// Draw order from `ChaCha8Rng::seed_from_u64(seed)`: the substitution
/// shuffle, then for each pair a length in `[min_len, max_len]` followed by
/// that many tokens in `0..vocab_size`.
pub fn generate_toy_translation(
    count: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size < 8 {
        return Err(Error::contract(format!("toy translation needs a vocabulary of at least 8, got {vocab_size}")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::contract(format!("toy translation lengths must satisfy 1 ≤ min ≤ max, got {min_len}..{max_len}")));
    }
    let source_vocab = Vocabulary::new((0..vocab_size).map(|i| format!("s{i}")))?;
    let target_vocab = Vocabulary::new((0..vocab_size).map(|i| format!("t{i}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = toy_substitution_from(vocab_size, &mut rng);
    let pairs = (0..count)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<usize> = (0..len).map(|_| RESERVED + rng.gen_range(0..vocab_size)).collect();
            let tgt = toy_translate(&src, &sub);
            Pair { source: with_eos(src), target: with_eos(tgt) }
        })
        .collect();
    Ok(ParallelCorpus { pairs, source_vocab, target_vocab })
}

/// Reads `path` as UTF-8, reporting the first bad line.
fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match String::from_utf8(bytes) {
        Ok(s) => Ok(s),
        Err(e) => {
            let at = e.utf8_error().valid_up_to();
            let line = e.as_bytes()[..at].iter().filter(|&&b| b == b'\n').count() + 1;
            Err(Error::ingest(path, format!("invalid UTF-8 on line {line}")))
        }
    }
}

fn lines(text: &str) -> Vec<&str> {
    text.lines().collect()
}

/// Aligned whitespace-tokenised files, one sentence per line. Unknown
/// tokens map to [`UNK`]; EOS is appended.
pub fn load_parallel_corpus(
    source_path: &Path,
    target_path: &Path,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Result<ParallelCorpus> {
    let (src_text, tgt_text) = (read_utf8(source_path)?, read_utf8(target_path)?);
    let (src, tgt) = (lines(&src_text), lines(&tgt_text));
    if src.len() != tgt.len() {
        return Err(Error::ingest(
            source_path,
            format!("{} source lines but {} target lines in {}", src.len(), tgt.len(), target_path.display()),
        ));
    }
    let pairs = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| Pair { source: source_vocab.encode(s), target: target_vocab.encode(t) })
        .collect();
    Ok(ParallelCorpus { pairs, source_vocab: source_vocab.clone(), target_vocab: target_vocab.clone() })
}

/// Whitespace token counts of a file.
pub fn count_tokens(path: &Path) -> Result<HashMap<String, usize>> {
    let text = read_utf8(path)?;
    let mut counts = HashMap::new();
    for tok in text.split_whitespace() {
        *counts.entry(tok.to_string()).or_insert(0) += 1;
    }
    Ok(counts)
}

/// The `max_size - 4` most frequent tokens of `path`, ties broken
/// lexicographically. Reserved surface forms in the file are skipped.
pub fn build_vocab(path: &Path, max_size: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED {
        return Err(Error::contract(format!("vocabulary size must exceed {RESERVED}, got {max_size}")));
    }
    let mut counts: Vec<(String, usize)> =
        count_tokens(path)?.into_iter().filter(|(t, _)| !RESERVED_TOKENS.contains(&t.as_str())).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    counts.truncate(max_size - RESERVED);
    Vocabulary::new(counts.into_iter().map(|(t, _)| t))
}
