//! Corpus BLEU and positionwise token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Highest n-gram order in BLEU.
pub const BLEU_ORDER: usize = 4;

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 on a 0–100 scale: clipped n-gram precisions pooled
/// over the corpus, geometric mean with uniform weights, brevity penalty
/// `exp(1 − r/c)` when the candidate corpus is shorter. Unsmoothed, so any
/// order with no matches (or no candidate n-grams at all) gives 0.
pub fn bleu<S: Eq + Hash>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "bleu: {} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::contract("bleu: empty corpus"));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 =
        matches.iter().zip(&totals).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / BLEU_ORDER as f64;
    let brevity = if cand_len < ref_len { (1.0 - ref_len as f64 / cand_len as f64).exp() } else { 1.0 };
    Ok(100.0 * brevity * log_precision.exp())
}

/// Fraction of positions where hypothesis and reference agree, pooled over
/// the corpus: `Σ matches / Σ max(|hyp|, |ref|)`. Missing or extra tokens
/// count as errors. An all-empty corpus scores 1.
pub fn token_accuracy<S: PartialEq>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "token_accuracy: {} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}
