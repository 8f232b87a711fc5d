//! Greedy and beam-search decoding.

use crate::autodiff::{Bound, Graph};
use crate::data::{EOS, SOS};
use crate::error::{Error, Result};
use crate::models::{Dropout, EpisodeState, Model};
use crate::scalar::Scalar;

/// Batched greedy decoding. Each output stops before its first EOS or after
/// `max_len` tokens.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::inference();
    let p = model.params().bind(&mut g);
    let mut state = model.encode(&mut g, &p, sources, &mut Dropout::off(), false)?;
    let mut out = vec![Vec::new(); sources.len()];
    let mut done = vec![false; sources.len()];
    let mut previous = vec![SOS; sources.len()];
    for _ in 0..max_len {
        let (logits, next) = model.decode_step(&mut g, &p, &state, &previous, &mut Dropout::off())?;
        state = next;
        let v = g.value(logits);
        for b in 0..sources.len() {
            let tok = argmax(v.row(b));
            previous[b] = tok;
            if done[b] {
                continue;
            }
            if tok == EOS {
                done[b] = true;
            } else {
                out[b].push(tok);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// A source of next-token log-probabilities for a set of live prefixes.
pub trait StepScorer {
    /// First reorders the live rows so that new row `i` continues old row
    /// `parents[i]`, then feeds `tokens[i]` to row `i` and returns the
    /// log-probabilities of every next token for each row.
    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// [`StepScorer`] over a model episode for one source sentence.
pub struct ModelScorer<'m, T> {
    model: &'m Model<T>,
    graph: Graph<T>,
    params: Bound,
    state: EpisodeState,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, source: &[usize]) -> Result<Self> {
        let mut graph = Graph::inference();
        let params = model.params().bind(&mut graph);
        let state = model.encode(&mut graph, &params, &[source.to_vec()], &mut Dropout::off(), false)?;
        Ok(ModelScorer { model, graph, params, state })
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let identity = parents.len() == self.state.batch() && parents.iter().enumerate().all(|(i, &p)| i == p);
        if !identity {
            self.state = self.state.select(&mut self.graph, parents)?;
        }
        let (logits, next) = self.model.decode_step(&mut self.graph, &self.params, &self.state, tokens, &mut Dropout::off())?;
        self.state = next;
        let logp = self.graph.log_softmax(logits, 1)?;
        let v = self.graph.value(logp);
        Ok((0..tokens.len()).map(|r| v.row(r).iter().map(|x| x.as_f64()).collect()).collect())
    }
}

/// A finished or partial beam entry. `tokens` excludes SOS and includes the
/// final EOS when `finished`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Mean log-probability per emitted token (EOS included).
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Beam search over `scorer`, starting from SOS. Every step expands each
/// live hypothesis by every token and keeps the `width` best candidates by
/// [`Hypothesis::score`]; candidates ending in EOS are frozen and leave the
/// beam. Returns the best finished hypothesis, or the best live one if
/// nothing finished within `max_len` tokens. Ties keep the earlier
/// candidate (lower parent, then lower token id).
pub fn beam_search(scorer: &mut dyn StepScorer, width: usize, max_len: usize) -> Result<Hypothesis> {
    if width == 0 || max_len == 0 {
        return Err(Error::contract(format!("beam_search: width {width} and max length {max_len} must be ≥ 1")));
    }
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut parents = vec![0];
    let mut feed = vec![SOS];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let logp = scorer.advance(&parents, &feed)?;
        let mut candidates: Vec<(usize, usize, Hypothesis)> = Vec::new();
        for (r, (hyp, row)) in live.iter().zip(&logp).enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push((r, tok, Hypothesis { tokens, log_prob: hyp.log_prob + lp, finished: tok == EOS }));
            }
        }
        // stable sort keeps (parent, token) order among equal scores
        candidates.sort_by(|a, b| b.2.score().total_cmp(&a.2.score()));
        candidates.truncate(width);
        live.clear();
        parents.clear();
        feed.clear();
        for (r, tok, hyp) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else {
                parents.push(r);
                feed.push(tok);
                live.push(hyp);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    let mut best = &pool[0];
    for h in pool {
        if h.score() > best.score() {
            best = h;
        }
    }
    Ok(best.clone())
}

/// Beam search for one source sentence; returns the output tokens without
/// EOS.
pub fn beam_decode<T: Scalar>(model: &Model<T>, source: &[usize], width: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut scorer = ModelScorer::new(model, source)?;
    Ok(beam_search(&mut scorer, width, max_len)?.output().to_vec())
}
