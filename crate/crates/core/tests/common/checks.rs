//! Measurements behind the acceptance criteria, shared with the module
//! tests. Each returns numbers; callers decide what passes.

use mannmt::addressing::{self, address_graph, read_graph, squash_head, write_graph, AddressWeights, HeadLayout, HeadParameters, MemoryMatrix};
use mannmt::attention::{self, context_graph, luong_weights_graph, ntm_attention_graph, AttentionState, EncodedSource, SourceBatch};
use mannmt::autodiff::{check_gradients, check_gradients_sampled, Graph, LstmStack, ParamStore, Tensor, Var};
use mannmt::data::EOS;
use mannmt::decode::{beam_decode, beam_search, greedy_decode, Hypothesis, StepScorer};
use mannmt::models::{Architecture, Dropout, HeadKind, Model, ModelConfig};
use mannmt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("consistent shape")
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `Σ out ∘ c` for a fixed random `c`, so every output element matters.
pub fn weigh(g: &mut Graph<f64>, out: Var, c: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(c.clone());
    let p = g.mul(out, c)?;
    Ok(g.sum_all(p))
}

// ------------------------------------------------------------ oracles

/// Largest deviation of address, read and write from the straight-line
/// versions over `cases` random draws.
pub fn address_oracle_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=8);
        let mem = matrix(&mut rng, n, w);
        let prev = simplex(&mut rng, n);
        let h = random_head(&mut rng, w);
        let memory = MemoryMatrix::from_rows(&mem)?;
        let head = HeadParameters::read(h.key.clone(), h.beta, h.gate, h.shift, h.gamma)?;
        let got = addressing::address(&head, &memory, &AddressWeights::new(prev.clone())?)?;
        let want = address(&h, &mem, &prev);
        worst = worst.max(max_abs_diff(got.as_slice(), &want));
        let r = addressing::read(&memory, &got)?;
        worst = worst.max(max_abs_diff(&r, &read(&mem, got.as_slice())));
        let erase: Vec<f64> = (0..w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let add = normal_vec(&mut rng, w);
        let written = addressing::write(&memory, &got, &erase, &add)?;
        let expect = write(&mem, got.as_slice(), &erase, &add);
        worst = worst.max(max_abs_diff(written.as_tensor().data(), &flatten(&expect)));
    }
    Ok(worst)
}

pub struct AttentionCase {
    pub query: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub valid: usize,
    pub projection: Vec<Vec<f64>>,
    pub head: Head,
    pub previous: Vec<f64>,
}

impl AttentionCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let s = rng.gen_range(1..=10);
        let valid = rng.gen_range(1..=s);
        let h = rng.gen_range(1..=6);
        let mut previous = simplex(rng, valid);
        previous.resize(s, 0.0);
        AttentionCase {
            query: normal_vec(rng, h),
            states: matrix(rng, s, h),
            valid,
            projection: matrix(rng, h, h),
            head: random_head(rng, 0),
            previous,
        }
    }

    pub fn source(&self) -> EncodedSource<f64> {
        let (s, h) = (self.states.len(), self.query.len());
        EncodedSource::new(tensor(&[s, h], flatten(&self.states)), self.valid).expect("valid source")
    }

    pub fn state(&self) -> AttentionState<f64> {
        let h = self.query.len();
        AttentionState { previous: AddressWeights::raw(self.previous.clone()), projection: tensor(&[h, h], flatten(&self.projection)) }
    }

    pub fn head_parameters(&self) -> HeadParameters<f64> {
        let h = &self.head;
        HeadParameters::read(Vec::new(), h.beta, h.gate, h.shift, h.gamma).expect("valid head")
    }
}

/// Largest deviation of Luong weights and NTM-style attention (weights and
/// context) from the straight-line versions, with random padding.
pub fn attention_oracle_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = AttentionCase::random(&mut rng);
        let source = c.source();
        let lw = attention::luong_weights(&c.query, &source, c.head.beta, &c.state())?;
        let want = luong_weights(&c.query, &c.states, c.valid, &c.projection, c.head.beta);
        worst = worst.max(max_abs_diff(lw.as_slice(), &want));
        let mut state = c.state();
        let (w, ctx) = attention::ntm_style_attention(&c.query, &source, &c.head_parameters(), &mut state)?;
        let (want_w, want_ctx) = ntm_attention(&c.query, &c.states, c.valid, &c.projection, &c.head, &c.previous);
        worst = worst.max(max_abs_diff(w.as_slice(), &want_w));
        worst = worst.max(max_abs_diff(&ctx, &want_ctx));
        worst = worst.max(max_abs_diff(state.previous.as_slice(), &want_w));
    }
    Ok(worst)
}

/// NTM-style attention with g = 1, identity kernel and γ = 1 against Luong
/// attention at the same β.
pub fn reduction_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut c = AttentionCase::random(&mut rng);
        c.head.gate = 1.0;
        c.head.shift = [0.0, 1.0, 0.0];
        c.head.gamma = 1.0;
        let source = c.source();
        let luong = attention::luong_weights(&c.query, &source, c.head.beta, &c.state())?;
        let (ntm, _) = attention::ntm_style_attention(&c.query, &source, &c.head_parameters(), &mut c.state())?;
        worst = worst.max(max_abs_diff(luong.as_slice(), ntm.as_slice()));
    }
    Ok(worst)
}

// ------------------------------------------------------------ simplex

#[derive(Clone, Copy, Debug, Default)]
pub struct SimplexReport {
    pub vectors: usize,
    pub worst_sum_error: f64,
    pub most_negative: f64,
    pub padded_mass: f64,
}

impl SimplexReport {
    pub fn observe(&mut self, w: &[f64], valid: usize) {
        self.vectors += 1;
        let sum: f64 = w.iter().sum();
        self.worst_sum_error = self.worst_sum_error.max((sum - 1.0).abs());
        self.most_negative = w.iter().copied().fold(self.most_negative, f64::min);
        self.padded_mass = self.padded_mass.max(w[valid..].iter().map(|x| x.abs()).sum());
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.worst_sum_error <= tol && self.most_negative >= 0.0 && self.padded_mass == 0.0
    }
}

pub fn tiny_config(arch: Architecture, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::new(arch, vocab, vocab);
    c.embedding = 4;
    c.hidden = 5;
    c.memory_locations = 4;
    c.memory_width = 3;
    c.dropout = 0.0;
    c
}

/// Address and attention weights from the single-episode functions and
/// from traced batched model episodes with padding.
pub fn simplex_fuzz(cases: usize, seed: u64) -> Result<SimplexReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SimplexReport::default();
    for case in 0..cases {
        let n = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=8);
        let mem = matrix(&mut rng, n, w);
        let h = random_head(&mut rng, w);
        let memory = MemoryMatrix::from_rows(&mem)?;
        let head = HeadParameters::read(h.key.clone(), h.beta, h.gate, h.shift, h.gamma)?;
        let prev = AddressWeights::new(simplex(&mut rng, n))?;
        let content = addressing::content_weights(&h.key, &memory, h.beta)?;
        rep.observe(content.as_slice(), n);
        rep.observe(addressing::address(&head, &memory, &prev)?.as_slice(), n);

        let c = AttentionCase::random(&mut rng);
        let source = c.source();
        rep.observe(attention::luong_weights(&c.query, &source, c.head.beta, &c.state())?.as_slice(), c.valid);
        let (aw, _) = attention::ntm_style_attention(&c.query, &source, &c.head_parameters(), &mut c.state())?;
        rep.observe(aw.as_slice(), c.valid);

        if case % 50 == 0 {
            model_weights(&mut rng, &mut rep)?;
        }
    }
    Ok(rep)
}

fn model_weights(rng: &mut ChaCha8Rng, rep: &mut SimplexReport) -> Result<()> {
    let arch = Architecture::ALL[rng.gen_range(0..4)];
    let mut config = tiny_config(arch, 9);
    config.init_range = 1.0;
    let model = Model::<f64>::new(config, rng.gen())?;
    let sources: Vec<Vec<usize>> = (0..3).map(|_| (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(4..9)).collect()).collect();
    let mut g = Graph::inference();
    let p = model.params().bind(&mut g);
    let mut state = model.encode(&mut g, &p, &sources, &mut Dropout::off(), true)?;
    for _ in 0..3 {
        let prev: Vec<usize> = (0..3).map(|_| rng.gen_range(2..9)).collect();
        state = model.decode_step(&mut g, &p, &state, &prev, &mut Dropout::off())?.1;
    }
    for record in state.trace().expect("traced") {
        for head in &record.heads {
            for v in [head.weights, head.content] {
                let t = g.value(v);
                for b in 0..3 {
                    let valid = match head.kind {
                        HeadKind::Attention => sources[b].len() + 1,
                        _ => t.shape()[1],
                    };
                    rep.observe(&t.row(b).to_vec(), valid);
                }
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------ gradients

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance of a primitive: its inputs and a scalar loss.
fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder) {
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=4);
    let any = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape, -2.0, 2.0);
    let wt = any(rng, &[r, c]);
    macro_rules! unary {
        ($op:ident, $lo:expr, $hi:expr) => {{
            let x = random_tensor(rng, &[r, c], $lo, $hi);
            (vec![x], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.$op(v[0]);
                weigh(g, y, &wt)
            }) as Builder)
        }};
    }
    macro_rules! binary {
        ($op:ident, $lo:expr, $hi:expr) => {{
            let shape: Vec<usize> = match rng.gen_range(0..3) {
                0 => vec![r, c],
                1 => vec![c],
                _ => vec![r, 1],
            };
            let a = random_tensor(rng, &[r, c], -2.0, 2.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let b = random_tensor(rng, &shape, $lo, $hi).map(|x| x * sign);
            (vec![a, b], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.$op(v[0], v[1])?;
                weigh(g, y, &wt)
            }) as Builder)
        }};
    }
    match name {
        "matmul" => {
            let (a, b) = (any(rng, &[r, k]), any(rng, &[k, c]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weigh(g, y, &wt)
            }))
        }
        "batched-matmul" => {
            let n = rng.gen_range(1..=3);
            let (a, b) = (random_tensor(rng, &[n, r, k], -2.0, 2.0), random_tensor(rng, &[n, k, c], -2.0, 2.0));
            let w3 = random_tensor(rng, &[n, r, c], -1.0, 1.0);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weigh(g, y, &w3)
            }))
        }
        "add" => binary!(add, -2.0, 2.0),
        "sub" => binary!(sub, -2.0, 2.0),
        "mul" => binary!(mul, -2.0, 2.0),
        "divide" => binary!(div, 0.5, 2.0),
        "power" => {
            let base = random_tensor(rng, &[r, c], 0.2, 2.0);
            let expo = if rng.gen_bool(0.5) { random_tensor(rng, &[r, 1], 1.0, 4.0) } else { random_tensor(rng, &[r, c], -1.5, 3.0) };
            (vec![base, expo], Box::new(move |g, v| {
                let y = g.pow(v[0], v[1])?;
                weigh(g, y, &wt)
            }))
        }
        "exp" => unary!(exp, -2.0, 2.0),
        "log" => unary!(log, 0.2, 3.0),
        "sigmoid" => unary!(sigmoid, -3.0, 3.0),
        "tanh" => unary!(tanh, -2.0, 2.0),
        "softplus" => unary!(softplus, -3.0, 3.0),
        "neg" => unary!(neg, -2.0, 2.0),
        "one-minus" => unary!(one_minus, -2.0, 2.0),
        "scale" => {
            let x = any(rng, &[r, c]);
            let s: f64 = rng.gen_range(-3.0..3.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.scale(v[0], s);
                let y = g.add_scalar(y, 0.7);
                weigh(g, y, &wt)
            }))
        }
        "softmax" | "log-softmax" => {
            let axis = rng.gen_range(0..2);
            let x = any(rng, &[r, c]);
            let log = name == "log-softmax";
            (vec![x], Box::new(move |g, v| {
                let y = if log { g.log_softmax(v[0], axis)? } else { g.softmax(v[0], axis)? };
                weigh(g, y, &wt)
            }))
        }
        "concat" => {
            let axis = rng.gen_range(0..2);
            let (a, b) = if axis == 0 { (any(rng, &[r, c]), any(rng, &[k, c])) } else { (any(rng, &[r, c]), any(rng, &[r, k])) };
            let w = if axis == 0 { any(rng, &[r + k, c]) } else { any(rng, &[r, c + k]) };
            (vec![a, b], Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]], axis)?;
                weigh(g, y, &w)
            }))
        }
        "slice" => {
            let x = any(rng, &[r, c + 2]);
            let start = rng.gen_range(0..=2);
            let len = rng.gen_range(1..=c + 2 - start);
            let w = any(rng, &[r, len]);
            (vec![x], Box::new(move |g, v| {
                let y = g.slice(v[0], 1, start, len)?;
                weigh(g, y, &w)
            }))
        }
        "sum-axis" => {
            let axis = rng.gen_range(0..2);
            let x = any(rng, &[r, c]);
            let w = if axis == 0 { any(rng, &[1, c]) } else { any(rng, &[r, 1]) };
            (vec![x], Box::new(move |g, v| {
                let y = g.sum_axis(v[0], axis)?;
                weigh(g, y, &w)
            }))
        }
        "reshape" => {
            let x = any(rng, &[r, c]);
            let w = any(rng, &[c, r]);
            (vec![x], Box::new(move |g, v| {
                let y = g.reshape(v[0], &[c, r])?;
                weigh(g, y, &w)
            }))
        }
        "gather-rows" => {
            let x = any(rng, &[r, c]);
            let idx: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..r)).collect();
            let w = any(rng, &[k + 1, c]);
            (vec![x], Box::new(move |g, v| {
                let y = g.gather_rows(v[0], &idx)?;
                weigh(g, y, &w)
            }))
        }
        "pick" => {
            let x = any(rng, &[r, c]);
            let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let w = any(rng, &[r]);
            (vec![x], Box::new(move |g, v| {
                let y = g.pick(v[0], &idx)?;
                weigh(g, y, &w)
            }))
        }
        "circular-convolve" => {
            let n = c + 1;
            let (x, s) = (random_tensor(rng, &[r, n], 0.0, 1.0), random_tensor(rng, &[r, 3], 0.0, 1.0));
            let lens: Option<Vec<usize>> = rng.gen_bool(0.5).then(|| (0..r).map(|_| rng.gen_range(1..=n)).collect());
            let w = any(rng, &[r, n]);
            (vec![x, s], Box::new(move |g, v| {
                let y = g.circular_convolve(v[0], v[1], lens.as_deref())?;
                weigh(g, y, &w)
            }))
        }
        "cosine-similarity" => {
            // at width 1 the similarity is ±1 up to ε and its gradient is
            // pure rounding noise
            let k = k + 1;
            let (keys, rows) = (any(rng, &[r, k]), any(rng, &[r, c, k]));
            (vec![keys, rows], Box::new(move |g, v| {
                let y = g.cosine_similarity(v[0], v[1], 1e-8)?;
                weigh(g, y, &wt)
            }))
        }
        "dropout" => {
            let x = any(rng, &[r, c]);
            let mask: Vec<f64> = (0..r * c).map(|_| if rng.gen_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
            (vec![x], Box::new(move |g, v| {
                let y = g.dropout_mask_apply(v[0], mask.clone())?;
                weigh(g, y, &wt)
            }))
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "batched-matmul",
    "add",
    "sub",
    "mul",
    "divide",
    "power",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "softplus",
    "neg",
    "one-minus",
    "scale",
    "softmax",
    "log-softmax",
    "concat",
    "slice",
    "sum-axis",
    "reshape",
    "gather-rows",
    "pick",
    "circular-convolve",
    "cosine-similarity",
    "dropout",
];

/// Worst relative error of each primitive over `trials` random instances.
pub fn primitive_gradients(trials: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for name in PRIMITIVES {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (inputs, f) = primitive_case(name, &mut rng);
            let rep = check_gradients(|g: &mut Graph<f64>, v: &[Var]| f(g, v), &inputs, 1e-5, 1e-6)?;
            worst = worst.max(rep.max_relative_error());
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}

/// Squash → address → read → write on one write head, N = 8, W = 6.
pub fn addressing_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, w) = (8, 6);
    let layout = HeadLayout { key: w, write: true };
    let inputs = vec![
        random_tensor(&mut rng, &[1, n, w], -1.0, 1.0),
        random_tensor(&mut rng, &[1, layout.width()], -1.5, 1.5),
        random_tensor(&mut rng, &[1, n], -1.0, 1.0),
    ];
    let (cr, cm, cw) =
        (random_tensor(&mut rng, &[1, w], -1.0, 1.0), random_tensor(&mut rng, &[1, n, w], -1.0, 1.0), random_tensor(&mut rng, &[1, n], -1.0, 1.0));
    let rep = check_gradients(
        |g: &mut Graph<f64>, v: &[Var]| {
            let head = squash_head(g, v[1], layout)?;
            let prev = g.softmax(v[2], 1)?;
            let parts = address_graph(g, &head, v[0], prev)?;
            let r = read_graph(g, v[0], parts.weights)?;
            let m = write_graph(g, v[0], parts.weights, head.erase.unwrap(), head.add.unwrap())?;
            let (a, b, c) = (weigh(g, r, &cr)?, weigh(g, m, &cm)?, weigh(g, parts.weights, &cw)?);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &inputs,
        1e-5,
        1e-4,
    )?;
    Ok(rep.max_relative_error())
}

/// Attention plus context on S = 7, H = 5 for a batch of two sources, the
/// second padded to length 4. `ntm` selects the NTM-style variant.
pub fn attention_gradient(ntm: bool, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, h) = (7, 5);
    let layout = HeadLayout { key: 0, write: false };
    let inputs = vec![
        random_tensor(&mut rng, &[2, h], -1.0, 1.0),
        random_tensor(&mut rng, &[h, h], -1.0, 1.0),
        random_tensor(&mut rng, &[2, s, h], -1.0, 1.0),
        random_tensor(&mut rng, &[2, layout.width()], -1.5, 1.5),
    ];
    let mut prev = vec![0.0; 2 * s];
    prev[..s].copy_from_slice(&simplex(&mut rng, s));
    prev[s..s + 4].copy_from_slice(&simplex(&mut rng, 4));
    let prev = tensor(&[2, s], prev);
    let (cc, cw) = (random_tensor(&mut rng, &[2, h], -1.0, 1.0), random_tensor(&mut rng, &[2, s], -1.0, 1.0));
    let rep = check_gradients(
        |g: &mut Graph<f64>, v: &[Var]| {
            let source = SourceBatch::new(g, v[2], vec![s, 4])?;
            let w = if ntm {
                let head = squash_head(g, v[3], layout)?;
                let p = g.constant(prev.clone());
                ntm_attention_graph(g, v[0], v[1], &source, &head, p)?.weights
            } else {
                luong_weights_graph(g, v[0], v[1], &source, None)?
            };
            let ctx = context_graph(g, w, source.states)?;
            let (a, b) = (weigh(g, ctx, &cc)?, weigh(g, w, &cw)?);
            g.add(a, b)
        },
        &inputs,
        1e-5,
        1e-4,
    )?;
    Ok(rep.max_relative_error())
}

/// Three-step LSTM unroll, two layers, gradients of every parameter and
/// input.
pub fn lstm_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let stack = LstmStack::new(&mut store, "lstm", 3, 4, 2, 0.5, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let np = inputs.len();
    for _ in 0..3 {
        inputs.push(random_tensor(&mut rng, &[2, 3], -1.0, 1.0));
    }
    let wt = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let rep = check_gradients(
        |g: &mut Graph<f64>, v: &[Var]| {
            let p = store.rebind(&v[..np])?;
            let mut state = stack.zero_state(g, 2);
            for t in 0..3 {
                state = stack.step(g, &p, v[np + t], &state, |_, x| Ok(x))?;
            }
            let hc = g.add(state.h[1], state.c[0])?;
            weigh(g, hc, &wt)
        },
        &inputs,
        1e-5,
        1e-5,
    )?;
    Ok(rep.max_relative_error())
}

/// Tiny configuration for whole-model gradient checks.
pub fn gradient_config(arch: Architecture) -> ModelConfig {
    let mut c = tiny_config(arch, 8);
    c.init_range = 0.5;
    if arch == Architecture::Mad {
        c.read_heads = 2;
        c.write_heads = 2;
    }
    c
}

/// Full unrolled sequence loss, 5-token source and target (plus EOS) in a
/// batch with a shorter padded pair, against every parameter. With
/// `dropout` a fixed-seed mask is rebuilt on every evaluation.
/// A zero bias row leaves memory at 1e-6, far below the difference step,
/// where cosine lookups curve too sharply for central differences to
/// resolve. The checks run at a random row instead.
fn spread_memory_bias(model: &mut Model<f64>, seed: u64) {
    if let Some(id) = model.params().id("memory.bias") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.params().get(id).numel();
        model.params_mut().get_mut(id).data_mut().copy_from_slice(&normal_vec(&mut rng, n));
    }
}

pub fn model_gradient(config: ModelConfig, dropout: Option<f64>, seed: u64) -> Result<f64> {
    let mut model = Model::<f64>::new(config, seed)?;
    spread_memory_bias(&mut model, seed);
    let sources = vec![vec![4, 5, 6, 7, 5], vec![6, 4, 7]];
    let targets = vec![vec![7, 6, 5, 4, 4, EOS], vec![5, 5, 6, EOS]];
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let rep = check_gradients(
        |g: &mut Graph<f64>, v: &[Var]| {
            let p = model.params().rebind(v)?;
            let mut d = dropout.map_or(Dropout::off(), |r| Dropout::train(r, seed));
            model.sequence_loss(g, &p, &sources, &targets, &mut d)
        },
        &inputs,
        1e-5,
        1e-4,
    )?;
    Ok(rep.max_relative_error())
}

/// Loss of the first decode step after encoding, vocabulary 11, hidden 16,
/// N = W = 8, sampled over parameters.
pub fn decode_step_gradient(arch: Architecture, seed: u64) -> Result<f64> {
    let mut c = ModelConfig::new(arch, 11, 11);
    c.embedding = 6;
    c.hidden = 16;
    c.memory_locations = 8;
    c.memory_width = 8;
    c.dropout = 0.0;
    c.init_range = 0.3;
    let mut model = Model::<f64>::new(c, seed)?;
    spread_memory_bias(&mut model, seed);
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let rep = check_gradients_sampled(
        |g: &mut Graph<f64>, v: &[Var]| {
            let p = model.params().rebind(v)?;
            let state = model.encode(g, &p, &[vec![5, 9, 4, 10]], &mut Dropout::off(), false)?;
            let (logits, _) = model.decode_step(g, &p, &state, &[mannmt::data::SOS], &mut Dropout::off())?;
            let logp = g.log_softmax(logits, 1)?;
            let picked = g.pick(logp, &[8])?;
            let s = g.sum_all(picked);
            Ok(g.neg(s))
        },
        &inputs,
        1e-5,
        1e-4,
        12,
        seed,
    )?;
    Ok(rep.max_relative_error())
}

// ------------------------------------------------------------ beam search

/// Width-1 beam search against batched greedy decoding on random tiny
/// models. Returns the number of disagreements.
pub fn beam_one_vs_greedy(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let arch = Architecture::ALL[rng.gen_range(0..4)];
        let mut config = tiny_config(arch, 9);
        config.init_range = 1.0;
        let model = Model::<f64>::new(config, rng.gen())?;
        let source: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(4..9)).collect();
        let greedy = greedy_decode(&model, std::slice::from_ref(&source), 12)?.remove(0);
        let beam = beam_decode(&model, &source, 1, 12)?;
        if greedy != beam {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Next-token distributions that depend on the whole prefix, drawn from a
/// hash of it.
pub struct PrefixScorer {
    pub vocab: usize,
    pub seed: u64,
    rows: Vec<Vec<usize>>,
}

impl PrefixScorer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        PrefixScorer { vocab, seed, rows: vec![Vec::new()] }
    }

    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let raw: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
        raw.iter().map(|x| x - z).collect()
    }
}

impl StepScorer for PrefixScorer {
    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<usize>> = parents
            .iter()
            .zip(tokens)
            .map(|(&p, &t)| {
                let mut r = self.rows[p].clone();
                r.push(t);
                r
            })
            .collect();
        self.rows = rows;
        Ok(self.rows.iter().map(|r| self.log_probs(r)).collect())
    }
}

/// Best EOS-terminated sequence of at most `max_len` tokens by mean
/// log-probability, by enumeration. The scorer sees SOS first.
pub fn exhaustive_best(scorer: &PrefixScorer, max_len: usize) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut frontier = vec![(vec![mannmt::data::SOS], Vec::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (prefix, tokens, lp) in frontier {
            let dist = scorer.log_probs(&prefix);
            for (t, &l) in dist.iter().enumerate() {
                let mut toks: Vec<usize> = tokens.clone();
                toks.push(t);
                let h = Hypothesis { tokens: toks.clone(), log_prob: lp + l, finished: t == EOS };
                if t == EOS {
                    if best.as_ref().is_none_or(|b| h.score() > b.score()) {
                        best = Some(h);
                    }
                } else {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push((p, toks, lp + l));
                }
            }
        }
        frontier = next;
    }
    best.expect("EOS is always reachable")
}

#[derive(Debug, Default, PartialEq)]
pub struct BeamReport {
    pub cases: usize,
    /// Full-width beam differs from enumeration.
    pub wrong: usize,
    /// Some narrower width returned a finished hypothesis that outscores
    /// the full-width result.
    pub beaten_by_narrower: usize,
    /// Widening by one lowered the returned score somewhere in 1..=V^L.
    pub non_monotone: usize,
    /// The same, counting only steps where both results are finished.
    pub non_monotone_finished: usize,
}

/// Beam search against enumeration on V = 4, L = 3 toys, at every width
/// from 1 to V^L.
pub fn beam_exhaustive(cases: usize, seed: u64) -> Result<BeamReport> {
    let (v, l) = (4usize, 3usize);
    let full = v.pow(l as u32);
    let mut rep = BeamReport { cases, ..Default::default() };
    for case in 0..cases {
        let s = seed.wrapping_add(case as u64 * 7919);
        let want = exhaustive_best(&PrefixScorer::new(v, s), l);
        let results: Vec<Hypothesis> =
            (1..=full).map(|w| beam_search(&mut PrefixScorer::new(v, s), w, l)).collect::<Result<_>>()?;
        let got = &results[full - 1];
        if got.tokens != want.tokens || (got.score() - want.score()).abs() > 1e-12 {
            rep.wrong += 1;
        }
        if results.iter().any(|h| h.finished && h.score() > got.score() + 1e-12) {
            rep.beaten_by_narrower += 1;
        }
        let drops = |finished_only: bool| {
            results.windows(2).any(|p| {
                (!finished_only || (p[0].finished && p[1].finished)) && p[1].score() < p[0].score() - 1e-12
            })
        };
        rep.non_monotone += drops(false) as usize;
        rep.non_monotone_finished += drops(true) as usize;
    }
    Ok(rep)
}

// ------------------------------------------------------------ BLEU

/// Constructed candidate/reference pairs with corpus BLEU from sacrebleu
/// 2.6.0 (`tokenize='none'`, `smooth_method='none'`), each scored as a
/// one-sentence corpus.
pub const BLEU_CASES: &[(&str, &str, f64)] = &[
    ("the cat sat on the mat", "the cat sat on the mat", 100.0),
    ("a b c d", "w x y z", 0.0),
    ("the cat sat", "the cat sat here", 0.0),
    ("the cat sat on the mat today", "the cat sat on the mat", 80.91067115702207),
    ("the cat sat on a mat", "the cat sat on the mat", 53.7284965911771),
    ("one two three four five six seven", "one two three four five six eight", 80.91067115702207),
    ("he reads the old book by the window", "he reads an old book by the window", 59.4603557501361),
    ("s1 s2 s3 s4 s5 s6 s7 s8", "s1 s2 s3 s4 s5 s6 s7 s8 s9 s10", 77.88007830714052),
    ("the the the the the the", "the cat is on the mat", 0.0),
    ("we will go to the market tomorrow morning", "tomorrow morning we will go to the market", 76.520588325569),
    ("t4 t9 t1 t1 t7 t2 t8", "t4 t9 t1 t7 t1 t2 t8", 0.0),
    ("a b c d e f g h i j", "a b c d e f g h i k", 88.01117367933934),
    ("i like green tea and black coffee", "i like black tea and green coffee", 0.0),
    ("x y z w x y z w", "x y z w x y z w", 100.0),
    ("the quick brown fox jumps over the lazy dog", "the quick brown fox jumped over the lazy dog", 59.694917920196445),
    ("a a b b c c d d", "a b c d a b c d", 0.0),
    ("one two three four", "one two three four five six seven eight", 36.78794411714425),
    ("data moves through the memory one step at a time", "data moves through memory one step at a time", 65.80370064762461),
    ("p q r s t u", "p q r s t u v", 84.64817248906144),
    ("alpha beta gamma delta epsilon zeta eta theta", "alpha beta gamma delta zeta epsilon eta theta", 44.17918226831576),
];

/// sacrebleu on all twenty pairs as one corpus.
pub const BLEU_CORPUS: f64 = 63.72411983619784;

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Worst absolute deviation of `mannmt::metrics::bleu` from the reference
/// values, per pair and over the whole corpus.
pub fn bleu_deviation() -> Result<f64> {
    let mut worst = 0.0f64;
    for &(c, r, want) in BLEU_CASES {
        let got = mannmt::metrics::bleu(&[words(c)], &[words(r)])?;
        worst = worst.max((got - want).abs());
    }
    let cands: Vec<Vec<&str>> = BLEU_CASES.iter().map(|c| words(c.0)).collect();
    let refs: Vec<Vec<&str>> = BLEU_CASES.iter().map(|c| words(c.1)).collect();
    worst = worst.max((mannmt::metrics::bleu(&cands, &refs)? - BLEU_CORPUS).abs());
    Ok(worst)
}
