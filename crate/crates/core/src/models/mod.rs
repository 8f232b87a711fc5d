//! The four architectures over one batched interface.
//!
//! Every model maps a batch of source id sequences to an [`EpisodeState`]
//! with [`Model::encode`], then advances it one target token at a time with
//! [`Model::decode_step`]. Sequences in a batch may differ in length; shorter
//! rows are padded and their state is frozen over the padding.

mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{Architecture, ModelConfig};

use crate::addressing::{address_graph, read_graph, squash_head, write_graph, HeadLayout, HeadVars, MEMORY_INIT};
use crate::attention::{context_graph, luong_weights_graph, ntm_attention_graph, SourceBatch};
use crate::autodiff::{Bound, Graph, LstmStack, LstmState, ParamId, ParamStore, Tensor, Var};
use crate::data::{EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Logit given to location 0 of the initial head weighting; the others
/// start at 0, so the softmax is one-hot at 0 to about 1e-9.
pub const INITIAL_HEAD_LOGIT: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Read,
    Write,
    Attention,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Read => "read",
            HeadKind::Write => "write",
            HeadKind::Attention => "attention",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encoding,
    Decoding,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Encoding => "encoding",
            Phase::Decoding => "decoding",
        }
    }
}

/// Graph handles of one head's address computation at one timestep.
/// Parameters a head kind does not emit are `None` (plain Luong attention
/// has no gate, shift or sharpening).
#[derive(Clone, Copy, Debug)]
pub struct HeadStep {
    pub kind: HeadKind,
    /// `[B, N]` (or `[B, S]`) final weighting.
    pub weights: Var,
    /// `[B, N]` content weighting.
    pub content: Var,
    pub gate: Option<Var>,
    pub shift: Option<Var>,
    pub beta: Option<Var>,
    pub gamma: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub phase: Phase,
    pub heads: Vec<HeadStep>,
}

/// Recurrent state of a batch of episodes on one graph.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    batch: usize,
    controller: LstmState,
    source: Option<SourceBatch>,
    /// Previous NTM-style attention weights `[B, S]`.
    attention: Option<Var>,
    /// `[B, N, W]`
    memory: Option<Var>,
    /// Previous weighting per memory head, reads first.
    head_weights: Vec<Var>,
    /// Concatenated read vectors of the previous step `[B, R·W]`.
    reads: Option<Var>,
    encode_steps: usize,
    decode_steps: usize,
    trace: Option<Vec<StepRecord>>,
}

impl EpisodeState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Controller steps taken while reading the source (pure-mann only;
    /// encoder-decoder models report the padded source length).
    pub fn encode_steps(&self) -> usize {
        self.encode_steps
    }

    pub fn decode_steps(&self) -> usize {
        self.decode_steps
    }

    pub fn memory(&self) -> Option<Var> {
        self.memory
    }

    pub fn source(&self) -> Option<&SourceBatch> {
        self.source.as_ref()
    }

    /// Current weighting of each memory head, reads first.
    pub fn head_weights(&self) -> &[Var] {
        &self.head_weights
    }

    /// Current NTM-style attention weights `[B, S]`.
    pub fn attention(&self) -> Option<Var> {
        self.attention
    }

    /// Top-layer controller output.
    pub fn hidden(&self) -> Var {
        self.controller.top()
    }

    /// Per-step head records, if tracing was requested at encode time.
    pub fn trace(&self) -> Option<&[StepRecord]> {
        self.trace.as_deref()
    }

    /// Rows `rows` of every batched quantity, in that order (rows may
    /// repeat). Used to reorder beams.
    pub fn select<T: Scalar>(&self, g: &mut Graph<T>, rows: &[usize]) -> Result<Self> {
        let mut pick = |v: Var| g.gather_rows(v, rows);
        let controller = LstmState {
            h: self.controller.h.iter().map(|&v| pick(v)).collect::<Result<_>>()?,
            c: self.controller.c.iter().map(|&v| pick(v)).collect::<Result<_>>()?,
        };
        let attention = self.attention.map(&mut pick).transpose()?;
        let memory = self.memory.map(&mut pick).transpose()?;
        let reads = self.reads.map(&mut pick).transpose()?;
        let head_weights = self.head_weights.iter().map(|&v| pick(v)).collect::<Result<_>>()?;
        let trace = match &self.trace {
            None => None,
            Some(records) => {
                let mut out = Vec::with_capacity(records.len());
                for r in records {
                    let mut heads = Vec::with_capacity(r.heads.len());
                    for h in &r.heads {
                        heads.push(HeadStep {
                            kind: h.kind,
                            weights: pick(h.weights)?,
                            content: pick(h.content)?,
                            gate: h.gate.map(&mut pick).transpose()?,
                            shift: h.shift.map(&mut pick).transpose()?,
                            beta: h.beta.map(&mut pick).transpose()?,
                            gamma: h.gamma.map(&mut pick).transpose()?,
                        });
                    }
                    out.push(StepRecord { phase: r.phase, heads });
                }
                Some(out)
            }
        };
        let source = match &self.source {
            Some(s) => Some(s.select(g, rows)?),
            None => None,
        };
        Ok(EpisodeState {
            batch: rows.len(),
            controller,
            source,
            attention,
            memory,
            head_weights,
            reads,
            encode_steps: self.encode_steps,
            decode_steps: self.decode_steps,
            trace,
        })
    }
}

/// Inverted dropout with its own random stream; a no-op when built with
/// [`Dropout::off`] or a zero rate.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else { return Ok(v) };
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let mask = (0..g.value(v).numel()).map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep }).collect();
        g.dropout_mask_apply(v, mask)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, range: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: store.add_uniform(format!("{name}.weight"), &[input, output], range, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[output]),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    forward: LstmStack,
    backward: Option<LstmStack>,
    merge: Option<Linear>,
}

#[derive(Clone, Debug)]
struct MemoryHeads {
    layouts: Vec<HeadLayout>,
    projection: Linear,
    bias_row: ParamId,
    initial_logits: Vec<ParamId>,
}

#[derive(Clone, Debug)]
struct Parts {
    source_embedding: ParamId,
    target_embedding: ParamId,
    encoder: Option<Encoder>,
    /// Decoder, or the controller of a pure MANN.
    decoder: LstmStack,
    attention_projection: Option<ParamId>,
    attention_head: Option<Linear>,
    memory: Option<MemoryHeads>,
    combine: Linear,
    output: Linear,
}

/// Parameter counts by component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub total: usize,
    /// Scalars in the recurrent stacks, excluding the first layer's input
    /// weights (whose size depends on what feeds the stack).
    pub recurrent_core: usize,
    pub recurrent_stacks: usize,
    pub components: Vec<(String, usize)>,
}

/// Parameters plus the wiring of one architecture.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    parts: Parts,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: weights uniform in `±init_range`, biases zero, initial
    /// head logits `[20, 0, …]`, memory bias row zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = c.init_range;
        let mut store = ParamStore::new();
        let (h, e) = (c.hidden, c.embedding);
        let source_embedding = store.add_uniform("source_embedding", &[c.source_vocab, e], r, &mut rng);
        let target_embedding = store.add_uniform("target_embedding", &[c.target_vocab, e], r, &mut rng);
        let encoder = c.architecture.has_encoder().then(|| {
            let forward = LstmStack::new(&mut store, "encoder.forward", e, h, c.layers, r, &mut rng);
            let (backward, merge) = if c.bidirectional {
                let b = LstmStack::new(&mut store, "encoder.backward", e, h, c.layers, r, &mut rng);
                (Some(b), Some(Linear::new(&mut store, "encoder.merge", 2 * h, h, r, &mut rng)))
            } else {
                (None, None)
            };
            Encoder { forward, backward, merge }
        });
        let reads_width = if c.architecture.has_memory() { c.read_heads * c.memory_width } else { 0 };
        let decoder = LstmStack::new(&mut store, "decoder", e + reads_width, h, c.layers, r, &mut rng);
        let attention_projection =
            c.architecture.has_encoder().then(|| store.add_uniform("attention.projection", &[h, h], r, &mut rng));
        let attention_layout = HeadLayout { key: 0, write: false };
        let attention_head = (c.architecture == Architecture::NtmAttention)
            .then(|| Linear::new(&mut store, "attention.head", h, attention_layout.width(), r, &mut rng));
        let memory = c.architecture.has_memory().then(|| {
            let layouts: Vec<HeadLayout> = (0..c.read_heads)
                .map(|_| HeadLayout { key: c.memory_width, write: false })
                .chain((0..c.write_heads).map(|_| HeadLayout { key: c.memory_width, write: true }))
                .collect();
            let width = layouts.iter().map(HeadLayout::width).sum();
            let projection = Linear::new(&mut store, "memory.heads", h, width, r, &mut rng);
            let bias_row = store.add_zeros("memory.bias", &[c.memory_width]);
            let initial_logits = (0..layouts.len())
                .map(|i| {
                    let mut logits = vec![T::zero(); c.memory_locations];
                    logits[0] = T::lit(INITIAL_HEAD_LOGIT);
                    store.add(format!("memory.head{i}.initial"), Tensor::vector(&logits))
                })
                .collect();
            MemoryHeads { layouts, projection, bias_row, initial_logits }
        });
        let extras = match c.architecture {
            Architecture::Baseline | Architecture::NtmAttention => h,
            Architecture::Mad => h + reads_width,
            Architecture::PureMann => reads_width,
        };
        let combine = Linear::new(&mut store, "output.combine", h + extras, h, r, &mut rng);
        let output = Linear::new(&mut store, "output.projection", h, c.target_vocab, r, &mut rng);
        let parts = Parts {
            source_embedding,
            target_embedding,
            encoder,
            decoder,
            attention_projection,
            attention_head,
            memory,
            combine,
            output,
        };
        Ok(Model { config, params: store, parts })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Heads traced per step, in record order.
    pub fn head_kinds(&self) -> Vec<HeadKind> {
        let mut kinds = Vec::new();
        if self.config.architecture.has_encoder() {
            kinds.push(HeadKind::Attention);
        }
        if self.config.architecture.has_memory() {
            kinds.extend((0..self.config.read_heads).map(|_| HeadKind::Read));
            kinds.extend((0..self.config.write_heads).map(|_| HeadKind::Write));
        }
        kinds
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let mut stacks: Vec<(&str, &LstmStack)> = vec![("decoder", &self.parts.decoder)];
        if let Some(enc) = &self.parts.encoder {
            stacks.push(("encoder.forward", &enc.forward));
            if let Some(b) = &enc.backward {
                stacks.push(("encoder.backward", b));
            }
        }
        let core = |s: &LstmStack| s.parameter_count(&self.params) - s.layers[0].input * 4 * s.hidden();
        let mut components: Vec<(String, usize)> =
            stacks.iter().map(|(n, s)| (n.to_string(), s.parameter_count(&self.params))).collect();
        let stacked: usize = components.iter().map(|c| c.1).sum();
        components.push(("other".into(), self.params.count() - stacked));
        ParameterReport {
            total: self.params.count(),
            recurrent_core: stacks.iter().map(|(_, s)| core(s)).sum(),
            recurrent_stacks: stacks.len(),
            components,
        }
    }

    fn check_ids(&self, what: &str, seqs: &[Vec<usize>], vocab: usize) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::contract(format!("{what}: empty batch")));
        }
        for (b, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::contract(format!("{what}: sequence {b} is empty")));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab) {
                return Err(Error::contract(format!("{what}: id {bad} in sequence {b} is outside a vocabulary of {vocab}")));
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<T>, p: &Bound, table: ParamId, ids: &[usize]) -> Result<Var> {
        g.gather_rows(p.var(table), ids)
    }

    /// Encodes a batch. Sources get an EOS appended unless they already end
    /// with one. With `trace`, per-step head records are kept in the state.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sources: &[Vec<usize>],
        dropout: &mut Dropout,
        trace: bool,
    ) -> Result<EpisodeState> {
        self.check_ids("encode", sources, self.config.source_vocab)?;
        let sources: Vec<Vec<usize>> = sources
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if s.last() != Some(&EOS) {
                    s.push(EOS);
                }
                s
            })
            .collect();
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let steps = *lens.iter().max().expect("nonempty batch");
        let ids_at = |t: usize| -> Vec<usize> { sources.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect() };
        let batch = sources.len();
        match &self.parts.encoder {
            Some(enc) => {
                let embedded: Vec<Var> =
                    (0..steps).map(|t| self.embed(g, p, self.parts.source_embedding, &ids_at(t))).collect::<Result<_>>()?;
                let run = |g: &mut Graph<T>, stack: &LstmStack, order: &mut dyn Iterator<Item = usize>, dropout: &mut Dropout| {
                    let mut state = stack.zero_state(g, batch);
                    let mut outputs = vec![None; steps];
                    for t in order {
                        let next = stack.step(g, p, embedded[t], &state, |g, v| dropout.apply(g, v))?;
                        outputs[t] = Some(next.top());
                        let live: Vec<bool> = lens.iter().map(|&l| t < l).collect();
                        state = blend_state(g, &state, &next, &live)?;
                    }
                    Ok::<_, Error>((state, outputs.into_iter().map(|o| o.expect("every step visited")).collect::<Vec<_>>()))
                };
                let (mut fstate, fout) = run(g, &enc.forward, &mut (0..steps), dropout)?;
                let per_step: Vec<Var> = match (&enc.backward, &enc.merge) {
                    (Some(bstack), Some(merge)) => {
                        let (bstate, bout) = run(g, bstack, &mut (0..steps).rev(), dropout)?;
                        for l in 0..fstate.h.len() {
                            fstate.h[l] = g.add(fstate.h[l], bstate.h[l])?;
                            fstate.c[l] = g.add(fstate.c[l], bstate.c[l])?;
                        }
                        let mut merged = Vec::with_capacity(steps);
                        for t in 0..steps {
                            let both = g.concat(&[fout[t], bout[t]], 1)?;
                            merged.push(merge.apply(g, p, both)?);
                        }
                        merged
                    }
                    _ => fout,
                };
                let h = self.config.hidden;
                let rows: Vec<Var> = per_step.iter().map(|&v| g.reshape(v, &[batch, 1, h])).collect::<Result<_>>()?;
                let states = g.concat(&rows, 1)?;
                let source = SourceBatch::new(g, states, lens.clone())?;
                let attention = (self.config.architecture == Architecture::NtmAttention).then(|| {
                    let mut w = vec![T::zero(); batch * steps];
                    for b in 0..batch {
                        w[b * steps] = T::one();
                    }
                    g.constant(Tensor::from_parts(vec![batch, steps], w))
                });
                let mut state = EpisodeState {
                    batch,
                    controller: fstate,
                    source: Some(source),
                    attention,
                    memory: None,
                    head_weights: Vec::new(),
                    reads: None,
                    encode_steps: steps,
                    decode_steps: 0,
                    trace: trace.then(Vec::new),
                };
                if self.config.architecture == Architecture::Mad {
                    self.init_memory(g, p, &mut state)?;
                }
                Ok(state)
            }
            None => {
                let mut state = EpisodeState {
                    batch,
                    controller: self.parts.decoder.zero_state(g, batch),
                    source: None,
                    attention: None,
                    memory: None,
                    head_weights: Vec::new(),
                    reads: None,
                    encode_steps: 0,
                    decode_steps: 0,
                    trace: trace.then(Vec::new),
                };
                self.init_memory(g, p, &mut state)?;
                for t in 0..steps {
                    let x = self.embed(g, p, self.parts.source_embedding, &ids_at(t))?;
                    let (_, next) = self.mann_step(g, p, &state, x, dropout, Phase::Encoding)?;
                    let live: Vec<bool> = lens.iter().map(|&l| t < l).collect();
                    state = blend_episode(g, &state, next, &live)?;
                }
                state.encode_steps = steps;
                Ok(state)
            }
        }
    }

    fn init_memory(&self, g: &mut Graph<T>, p: &Bound, state: &mut EpisodeState) -> Result<()> {
        let mem = self.parts.memory.as_ref().expect("memory architecture");
        let (b, n, w) = (state.batch, self.config.memory_locations, self.config.memory_width);
        let base = g.constant(Tensor::full(&[b, n, w], T::lit(MEMORY_INIT)));
        state.memory = Some(g.add(base, p.var(mem.bias_row))?);
        let ones = g.constant(Tensor::full(&[b, 1], T::one()));
        state.head_weights = mem
            .initial_logits
            .iter()
            .map(|&id| {
                let logits = g.reshape(p.var(id), &[1, n])?;
                let w0 = g.softmax(logits, 1)?;
                g.mul(ones, w0)
            })
            .collect::<Result<_>>()?;
        state.reads = Some(g.constant(Tensor::zeros(&[b, self.config.read_heads * w])));
        Ok(())
    }

    /// Emits head parameters from `h`, reads from the previous memory with
    /// every read head, then applies each write head in order. Returns the
    /// concatenated reads.
    fn memory_access(&self, g: &mut Graph<T>, p: &Bound, h: Var, state: &mut EpisodeState) -> Result<(Var, Vec<HeadStep>)> {
        let mem = self.parts.memory.as_ref().expect("memory architecture");
        let raw = mem.projection.apply(g, p, h)?;
        let memory = state.memory.expect("memory initialised");
        let mut offset = 0;
        let mut heads: Vec<(HeadVars, Var)> = Vec::with_capacity(mem.layouts.len());
        let mut records = Vec::with_capacity(mem.layouts.len());
        for (i, layout) in mem.layouts.iter().enumerate() {
            let slice = g.slice(raw, 1, offset, layout.width())?;
            offset += layout.width();
            let vars = squash_head(g, slice, *layout)?;
            let parts = address_graph(g, &vars, memory, state.head_weights[i])?;
            records.push(HeadStep {
                kind: if layout.write { HeadKind::Write } else { HeadKind::Read },
                weights: parts.weights,
                content: parts.content,
                gate: Some(vars.gate),
                shift: Some(vars.shift),
                beta: Some(vars.beta),
                gamma: Some(vars.gamma),
            });
            state.head_weights[i] = parts.weights;
            heads.push((vars, parts.weights));
        }
        let reads: Vec<Var> = heads
            .iter()
            .filter(|(v, _)| v.erase.is_none())
            .map(|&(_, w)| read_graph(g, memory, w))
            .collect::<Result<_>>()?;
        let mut memory = memory;
        for (vars, w) in heads.iter().filter(|(v, _)| v.erase.is_some()) {
            memory = write_graph(g, memory, *w, vars.erase.expect("write head"), vars.add.expect("write head"))?;
        }
        state.memory = Some(memory);
        let reads = if reads.len() == 1 { reads[0] } else { g.concat(&reads, 1)? };
        state.reads = Some(reads);
        Ok((reads, records))
    }

    /// One pure-MANN controller step on embedded input `x`.
    fn mann_step(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: &EpisodeState,
        x: Var,
        dropout: &mut Dropout,
        phase: Phase,
    ) -> Result<(Var, EpisodeState)> {
        let mut next = state.clone();
        let input = g.concat(&[x, state.reads.expect("memory initialised")], 1)?;
        next.controller = self.parts.decoder.step(g, p, input, &state.controller, |g, v| dropout.apply(g, v))?;
        let h = next.controller.top();
        let (reads, records) = self.memory_access(g, p, h, &mut next)?;
        if let Some(t) = next.trace.as_mut() {
            t.push(StepRecord { phase, heads: records });
        }
        let features = g.concat(&[h, reads], 1)?;
        match phase {
            Phase::Encoding => next.encode_steps += 1,
            Phase::Decoding => next.decode_steps += 1,
        }
        Ok((features, next))
    }

    /// Logits `[B, V_target]` for the next token given the previous target
    /// tokens (SOS at the first step).
    pub fn decode_step(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: &EpisodeState,
        previous: &[usize],
        dropout: &mut Dropout,
    ) -> Result<(Var, EpisodeState)> {
        if previous.len() != state.batch {
            return Err(Error::contract(format!("decode_step: {} tokens for a batch of {}", previous.len(), state.batch)));
        }
        if let Some(&bad) = previous.iter().find(|&&t| t >= self.config.target_vocab) {
            return Err(Error::contract(format!("decode_step: id {bad} outside a vocabulary of {}", self.config.target_vocab)));
        }
        let x = self.embed(g, p, self.parts.target_embedding, previous)?;
        let (features, next) = match self.config.architecture {
            Architecture::PureMann => self.mann_step(g, p, state, x, dropout, Phase::Decoding)?,
            arch => {
                let mut next = state.clone();
                let input = match arch {
                    Architecture::Mad => g.concat(&[x, state.reads.expect("memory initialised")], 1)?,
                    _ => x,
                };
                next.controller = self.parts.decoder.step(g, p, input, &state.controller, |g, v| dropout.apply(g, v))?;
                let h = next.controller.top();
                let source = state.source.as_ref().expect("encoder output");
                let projection = p.var(self.parts.attention_projection.expect("attention"));
                let mut records = Vec::new();
                let weights = match &self.parts.attention_head {
                    Some(head) => {
                        let raw = head.apply(g, p, h)?;
                        let vars = squash_head(g, raw, HeadLayout { key: 0, write: false })?;
                        let previous = state.attention.expect("attention state");
                        let parts = ntm_attention_graph(g, h, projection, source, &vars, previous)?;
                        next.attention = Some(parts.weights);
                        records.push(HeadStep {
                            kind: HeadKind::Attention,
                            weights: parts.weights,
                            content: parts.content,
                            gate: Some(vars.gate),
                            shift: Some(vars.shift),
                            beta: Some(vars.beta),
                            gamma: Some(vars.gamma),
                        });
                        parts.weights
                    }
                    None => {
                        let w = luong_weights_graph(g, h, projection, source, None)?;
                        records.push(HeadStep {
                            kind: HeadKind::Attention,
                            weights: w,
                            content: w,
                            gate: None,
                            shift: None,
                            beta: None,
                            gamma: None,
                        });
                        w
                    }
                };
                let context = context_graph(g, weights, source.states)?;
                let features = if arch == Architecture::Mad {
                    let (reads, mem_records) = self.memory_access(g, p, h, &mut next)?;
                    records.extend(mem_records);
                    g.concat(&[h, context, reads], 1)?
                } else {
                    g.concat(&[h, context], 1)?
                };
                if let Some(t) = next.trace.as_mut() {
                    t.push(StepRecord { phase: Phase::Decoding, heads: records });
                }
                next.decode_steps += 1;
                (features, next)
            }
        };
        let combined = self.parts.combine.apply(g, p, features)?;
        let combined = g.tanh(combined);
        let combined = dropout.apply(g, combined)?;
        let logits = self.parts.output.apply(g, p, combined)?;
        Ok((logits, next))
    }

    /// Teacher-forced cross-entropy, averaged over every target token in the
    /// batch. Targets must end with EOS.
    pub fn sequence_loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        self.check_ids("sequence_loss", targets, self.config.target_vocab)?;
        if sources.len() != targets.len() {
            return Err(Error::contract(format!("sequence_loss: {} sources, {} targets", sources.len(), targets.len())));
        }
        if let Some(b) = targets.iter().position(|t| t.last() != Some(&EOS)) {
            return Err(Error::contract(format!("sequence_loss: target {b} does not end with EOS")));
        }
        let mut state = self.encode(g, p, sources, dropout, false)?;
        let steps = targets.iter().map(Vec::len).max().expect("nonempty batch");
        let tokens: usize = targets.iter().map(Vec::len).sum();
        let mut previous = vec![SOS; targets.len()];
        let mut terms = Vec::with_capacity(steps);
        for t in 0..steps {
            let (logits, next) = self.decode_step(g, p, &state, &previous, dropout)?;
            state = next;
            let gold: Vec<usize> = targets.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let logp = g.log_softmax(logits, 1)?;
            let picked = g.pick(logp, &gold)?;
            let term = if targets.iter().all(|s| t < s.len()) {
                picked
            } else {
                let mask: Vec<T> = targets.iter().map(|s| if t < s.len() { T::one() } else { T::zero() }).collect();
                let mask = g.constant(Tensor::new(&[targets.len()], mask)?);
                g.mul(picked, mask)?
            };
            terms.push(term);
            previous = gold;
        }
        let all = g.concat(&terms, 0)?;
        let total = g.sum_all(all);
        Ok(g.scale(total, T::lit(-1.0 / tokens as f64)))
    }
}

/// `old + m·(new − old)` with `m` 1 for live rows and 0 for padded ones.
fn blend<T: Scalar>(g: &mut Graph<T>, old: Var, new: Var, live: &[bool]) -> Result<Var> {
    if live.iter().all(|&l| l) {
        return Ok(new);
    }
    let mut shape = vec![1; g.shape(new).len()];
    shape[0] = live.len();
    let mask = g.constant(Tensor::new(&shape, live.iter().map(|&l| if l { T::one() } else { T::zero() }).collect())?);
    let diff = g.sub(new, old)?;
    let step = g.mul(mask, diff)?;
    g.add(old, step)
}

fn blend_state<T: Scalar>(g: &mut Graph<T>, old: &LstmState, new: &LstmState, live: &[bool]) -> Result<LstmState> {
    let mut out = LstmState { h: Vec::with_capacity(new.h.len()), c: Vec::with_capacity(new.c.len()) };
    for l in 0..new.h.len() {
        out.h.push(blend(g, old.h[l], new.h[l], live)?);
        out.c.push(blend(g, old.c[l], new.c[l], live)?);
    }
    Ok(out)
}

fn blend_episode<T: Scalar>(g: &mut Graph<T>, old: &EpisodeState, mut new: EpisodeState, live: &[bool]) -> Result<EpisodeState> {
    if live.iter().all(|&l| l) {
        return Ok(new);
    }
    new.controller = blend_state(g, &old.controller, &new.controller, live)?;
    if let (Some(o), Some(n)) = (old.memory, new.memory) {
        new.memory = Some(blend(g, o, n, live)?);
    }
    if let (Some(o), Some(n)) = (old.reads, new.reads) {
        new.reads = Some(blend(g, o, n, live)?);
    }
    for i in 0..new.head_weights.len() {
        new.head_weights[i] = blend(g, old.head_weights[i], new.head_weights[i], live)?;
    }
    Ok(new)
}
