//! Adam, gradient clipping and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::data::{ParallelCorpus, Pair};
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{bleu, token_accuracy};
use crate::models::{Dropout, Model};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias-corrected moments, one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, steps: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε)`. A non-finite gradient aborts before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::contract(format!("adam: {} gradients for {} parameters", grads.len(), self.first.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adam", format!("{}: gradient {:?} vs {:?}", params.name(id), g.shape(), params.get(id).shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: params.name(id).to_string() });
            }
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let correct1 = T::one() - T::lit(c.beta1.powi(self.steps as i32));
        let correct2 = T::one() - T::lit(c.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.first[k].data_mut(), self.second[k].data_mut());
            let theta = params.get_mut(id).data_mut();
            for (i, &gi) in grads[k].data().iter().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Parameter updates to run.
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Validate every this many updates instead of at epoch ends.
    pub eval_every: Option<usize>,
    /// Stop once validation token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Validation pairs scored per evaluation (from the front).
    pub eval_limit: Option<usize>,
    /// Pairs per length-sorting bucket, in batches.
    pub bucket_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 1,
            eval_every: None,
            target_accuracy: None,
            eval_limit: None,
            bucket_batches: 20,
        }
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub enum LogRow {
    Train { step: usize, epoch: usize, loss: f64 },
    Valid { step: usize, epoch: usize, token_accuracy: f64, bleu: f64 },
}

impl LogRow {
    /// Tab-separated: `train step epoch loss` or
    /// `valid step epoch token_accuracy bleu`.
    pub fn to_tsv(&self) -> String {
        match self {
            LogRow::Train { step, epoch, loss } => format!("train\t{step}\t{epoch}\t{loss}"),
            LogRow::Valid { step, epoch, token_accuracy, bleu } => {
                format!("valid\t{step}\t{epoch}\t{token_accuracy}\t{bleu}")
            }
        }
    }
}

/// Validation scores of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub token_accuracy: f64,
    pub bleu: f64,
}

/// Decode budget for a source of `len` ids.
pub fn max_decode_len(len: usize) -> usize {
    2 * len + 10
}

/// Greedy-decodes `pairs` in batches and scores them against the targets.
pub fn evaluate<T: Scalar>(model: &Model<T>, pairs: &[Pair], batch_size: usize) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluate: no pairs"));
    }
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| pairs[i].source.len());
    let mut decoded = vec![Vec::new(); pairs.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|&i| pairs[i].source.clone()).collect();
        let longest = sources.iter().map(Vec::len).max().unwrap_or(1);
        for (&i, out) in chunk.iter().zip(greedy_decode(model, &sources, max_decode_len(longest))?) {
            decoded[i] = out;
        }
    }
    hyps.extend(decoded);
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target[..p.target.len() - 1].to_vec()).collect();
    Ok(Evaluation { token_accuracy: token_accuracy(&hyps, &refs)?, bleu: bleu(&hyps, &refs)? })
}

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the highest validation BLEU (the initial ones when no
    /// validation ran).
    pub best: Model<T>,
    pub best_step: usize,
    pub best_evaluation: Option<Evaluation>,
    pub last: Model<T>,
    pub log: Vec<LogRow>,
    pub steps_run: usize,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<Error>,
    pub reached_target: bool,
}

impl<T> TrainOutcome<T> {
    pub fn log_tsv(&self) -> String {
        let mut s = String::new();
        for row in &self.log {
            let _ = writeln!(s, "{}", row.to_tsv());
        }
        s
    }
}

/// Shuffled length-bucketed batches covering the corpus once.
fn epoch_batches(pairs: &[Pair], batch: usize, bucket: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch * bucket.max(1)) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| (pairs[i].source.len(), pairs[i].target.len()));
        batches.extend(chunk.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains `model` for `config.steps` updates with Adam and teacher forcing.
/// Validation runs at every epoch end (or every `eval_every` updates) and
/// once more after the last update if it was not just evaluated; the best
/// validation BLEU wins, earlier on ties. `on_row` sees every log row as it
/// is produced.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &ParallelCorpus,
    valid_set: &ParallelCorpus,
    config: &TrainConfig,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::contract("train: training and validation sets must be nonempty"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let valid = &valid_set.pairs[..config.eval_limit.unwrap_or(usize::MAX).min(valid_set.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout = Dropout::train(model.config().dropout, config.seed.wrapping_add(0x9e37_79b9));
    let mut adam = Adam::new(model.params(), config.adam);
    let mut outcome = TrainOutcome {
        best: model.clone(),
        best_step: 0,
        best_evaluation: None,
        last: model,
        log: Vec::new(),
        steps_run: 0,
        diverged: None,
        reached_target: false,
    };
    let mut emit = |outcome: &mut TrainOutcome<T>, row: LogRow| {
        on_row(&row);
        outcome.log.push(row);
    };
    let mut epoch = 0;
    let mut batches = Vec::new().into_iter();
    let mut step = 0;
    while step < config.steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = epoch_batches(&train_set.pairs, config.batch_size, config.bucket_batches, &mut rng).into_iter();
                continue;
            }
        };
        let sources: Vec<Vec<usize>> = batch.iter().map(|&i| train_set.pairs[i].source.clone()).collect();
        let targets: Vec<Vec<usize>> = batch.iter().map(|&i| train_set.pairs[i].target.clone()).collect();
        let model = &mut outcome.last;
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let loss = model.sequence_loss(&mut g, &p, &sources, &targets, &mut dropout)?;
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            outcome.diverged = Some(Error::NonFiniteGradient { param: format!("loss at step {}", step + 1) });
            break;
        }
        g.backward(loss)?;
        let mut grads = model.params().gradients(&g, &p);
        drop(g);
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        if let Err(e) = adam.step(model.params_mut(), &grads) {
            outcome.diverged = Some(e);
            break;
        }
        step += 1;
        outcome.steps_run = step;
        emit(&mut outcome, LogRow::Train { step, epoch, loss: loss_value });
        let due = match config.eval_every {
            Some(k) => step % k.max(1) == 0,
            None => batches.len() == 0,
        };
        if due || step == config.steps {
            let ev = evaluate(&outcome.last, valid, config.batch_size)?;
            emit(&mut outcome, LogRow::Valid { step, epoch, token_accuracy: ev.token_accuracy, bleu: ev.bleu });
            if outcome.best_evaluation.is_none_or(|b| ev.bleu > b.bleu) {
                outcome.best = outcome.last.clone();
                outcome.best_step = step;
                outcome.best_evaluation = Some(ev);
            }
            if config.target_accuracy.is_some_and(|t| ev.token_accuracy >= t) {
                outcome.reached_target = true;
                break;
            }
        }
    }
    Ok(outcome)
}
