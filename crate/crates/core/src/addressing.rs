//! NTM head mathematics: content lookup, interpolation, circular shift,
//! sharpening, read and erase/add write.
//!
//! The `*_graph` functions are the differentiable, batched forms used by the
//! models (`B` episodes at once, memory `[B, N, W]`, weights `[B, N]`). The
//! plain functions operate on a single [`MemoryMatrix`] and
//! [`AddressWeights`] and evaluate the same graph code without recording.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added to each norm in the cosine similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Guard for the renormalisation denominator of sharpening.
pub const SHARPEN_EPS: f64 = 1e-12;
/// Shift kernel support: offsets −1, 0, +1, in that order.
pub const SHIFT_WIDTH: usize = 3;
/// Constant every memory cell starts from before the learned bias row.
pub const MEMORY_INIT: f64 = 1e-6;

/// `N × W` external memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryMatrix<T> {
    contents: Tensor<T>,
}

impl<T: Scalar> MemoryMatrix<T> {
    pub fn new(locations: usize, width: usize, values: Vec<T>) -> Result<Self> {
        Ok(MemoryMatrix { contents: Tensor::new(&[locations, width], values)? })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("memory", "ragged rows"));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn filled(locations: usize, width: usize, value: T) -> Self {
        MemoryMatrix { contents: Tensor::full(&[locations, width], value) }
    }

    pub fn locations(&self) -> usize {
        self.contents.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.contents.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.contents.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.contents
    }

    pub fn is_finite(&self) -> bool {
        self.contents.all_finite()
    }
}

/// A simplex weighting over memory locations or source positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AddressWeights<T>(Vec<T>);

impl<T: Scalar> AddressWeights<T> {
    /// Accepts `w` if it is nonnegative and sums to one within `1e-9`.
    pub fn new(w: Vec<T>) -> Result<Self> {
        if !is_simplex(&w, 1e-9) {
            return Err(Error::contract(format!("address weights must be a simplex vector: {w:?}")));
        }
        Ok(AddressWeights(w))
    }

    /// Unchecked; for intermediate weightings such as an all-zero input to
    /// [`sharpen`].
    pub fn raw(w: Vec<T>) -> Self {
        AddressWeights(w)
    }

    pub fn one_hot(len: usize, at: usize) -> Self {
        let mut w = vec![T::zero(); len];
        w[at] = T::one();
        AddressWeights(w)
    }

    pub fn uniform(len: usize) -> Self {
        AddressWeights(vec![T::one() / T::lit(len as f64); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

/// Nonnegative and summing to one within `tol`.
pub fn is_simplex<T: Scalar>(w: &[T], tol: f64) -> bool {
    !w.is_empty()
        && w.iter().all(|&x| x >= T::zero() && x.is_finite())
        && (w.iter().copied().sum::<T>().as_f64() - 1.0).abs() <= tol
}

/// Per-head emission after squashing.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters<T> {
    pub key: Vec<T>,
    /// Key strength β ≥ 0.
    pub beta: T,
    /// Interpolation gate g ∈ [0, 1].
    pub gate: T,
    /// Weights on offsets −1, 0, +1.
    pub shift: [T; SHIFT_WIDTH],
    /// Sharpening γ ≥ 1.
    pub gamma: T,
    /// Erase vector in [0, 1]^W (write heads).
    pub erase: Option<Vec<T>>,
    /// Add vector (write heads).
    pub add: Option<Vec<T>>,
}

impl<T: Scalar> HeadParameters<T> {
    /// Read-head parameters; checks the documented ranges.
    pub fn read(key: Vec<T>, beta: T, gate: T, shift: [T; SHIFT_WIDTH], gamma: T) -> Result<Self> {
        let p = HeadParameters { key, beta, gate, shift, gamma, erase: None, add: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_write(mut self, erase: Vec<T>, add: Vec<T>) -> Result<Self> {
        self.erase = Some(erase);
        self.add = Some(add);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("head parameters: {what}")));
        if !(self.beta >= T::zero()) {
            return bad("β must be ≥ 0");
        }
        if !(self.gate >= T::zero() && self.gate <= T::one()) {
            return bad("g must lie in [0, 1]");
        }
        if !is_simplex(&self.shift, 1e-9) {
            return bad("shift kernel must be a simplex vector");
        }
        if !(self.gamma >= T::one()) {
            return bad("γ must be ≥ 1");
        }
        if let Some(e) = &self.erase {
            if e.len() != self.key.len() || e.iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
                return bad("erase vector must lie in [0, 1]^W");
            }
        }
        if let Some(a) = &self.add {
            if a.len() != self.key.len() {
                return bad("add vector must have length W");
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ graph

/// Content weighting `softmax_i(β·K[k, M(i)])` for keys `[B, W]`, memory
/// `[B, N, W]` and strengths `[B, 1]`.
pub fn content_weights_graph<T: Scalar>(g: &mut Graph<T>, key: Var, memory: Var, beta: Var) -> Result<Var> {
    let sim = g.cosine_similarity(key, memory, T::lit(COSINE_EPS))?;
    let scaled = g.mul(sim, beta)?;
    g.softmax(scaled, 1)
}

/// `g·w_content + (1 − g)·w_previous` with gates `[B, 1]`.
pub fn interpolate_graph<T: Scalar>(g: &mut Graph<T>, content: Var, previous: Var, gate: Var) -> Result<Var> {
    if g.shape(content) != g.shape(previous) {
        return Err(Error::contract(format!(
            "interpolate: weight lengths differ {:?} vs {:?}",
            g.shape(content),
            g.shape(previous)
        )));
    }
    let diff = g.sub(content, previous)?;
    let moved = g.mul(gate, diff)?;
    g.add(previous, moved)
}

/// Circular shift of `[B, N]` weights by kernels `[B, 3]`; with `lens` the
/// rotation wraps within each row's valid prefix.
pub fn shift_graph<T: Scalar>(g: &mut Graph<T>, w: Var, kernel: Var, lens: Option<&[usize]>) -> Result<Var> {
    g.circular_convolve(w, kernel, lens)
}

/// `w^γ / Σ w^γ` with exponents `[B, 1]`, evaluated on `w / max w` per
/// row. The ratio is scale-free, so this only keeps the sum away from
/// underflow: any row with mass has a denominator of at least 1. A row
/// whose sum still falls below ε gets ε added, so an all-zero row maps to
/// zeros. The row maxima are treated as constants.
pub fn sharpen_graph<T: Scalar>(g: &mut Graph<T>, w: Var, gamma: Var) -> Result<Var> {
    let value = g.value(w);
    let rows = match value.shape() {
        [b, _] => *b,
        s => return Err(Error::shape("sharpen", format!("{s:?}"))),
    };
    let maxima: Vec<T> = (0..rows)
        .map(|r| {
            let m = value.row(r).iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
            if m > T::zero() { m } else { T::one() }
        })
        .collect();
    let scale = g.constant(Tensor::new(&[rows, 1], maxima)?);
    let unit = g.div(w, scale)?;
    let p = g.pow(unit, gamma)?;
    let total = g.sum_axis(p, 1)?;
    let eps = T::lit(SHARPEN_EPS);
    let guard: Vec<T> = g.value(total).data().iter().map(|&z| if z < eps { eps } else { T::zero() }).collect();
    let guard = g.constant(Tensor::new(&[rows, 1], guard)?);
    let total = g.add(total, guard)?;
    g.div(p, total)
}

/// Graph handles for the squashed parameters of one head over a batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[B, W]`; absent for source-attention heads, which use the decoder
    /// state as their query.
    pub key: Option<Var>,
    pub beta: Var,
    pub gate: Var,
    pub shift: Var,
    pub gamma: Var,
    pub erase: Option<Var>,
    pub add: Option<Var>,
}

/// Intermediate weightings of one address computation.
#[derive(Clone, Copy, Debug)]
pub struct AddressParts {
    pub content: Var,
    pub gated: Var,
    pub shifted: Var,
    pub weights: Var,
}

/// Full pipeline: content → interpolate → shift → sharpen.
pub fn address_graph<T: Scalar>(g: &mut Graph<T>, head: &HeadVars, memory: Var, previous: Var) -> Result<AddressParts> {
    let key = head.key.ok_or_else(|| Error::contract("memory head without a key"))?;
    let content = content_weights_graph(g, key, memory, head.beta)?;
    address_from_content(g, head, content, previous, None)
}

/// Interpolate, shift and sharpen an existing content weighting.
pub fn address_from_content<T: Scalar>(
    g: &mut Graph<T>,
    head: &HeadVars,
    content: Var,
    previous: Var,
    lens: Option<&[usize]>,
) -> Result<AddressParts> {
    let gated = interpolate_graph(g, content, previous, head.gate)?;
    let shifted = shift_graph(g, gated, head.shift, lens)?;
    let weights = sharpen_graph(g, shifted, head.gamma)?;
    Ok(AddressParts { content, gated, shifted, weights })
}

/// `r = Σ_i w(i)·M(i)` for weights `[B, N]`, memory `[B, N, W]` → `[B, W]`.
pub fn read_graph<T: Scalar>(g: &mut Graph<T>, memory: Var, w: Var) -> Result<Var> {
    let (b, n) = (g.shape(w)[0], g.shape(w)[1]);
    let width = g.shape(memory)[2];
    let row = g.reshape(w, &[b, 1, n])?;
    let r = g.matmul(row, memory)?;
    g.reshape(r, &[b, width])
}

/// `M'(i) = M(i)∘(1 − w(i)·e) + w(i)·a` with `e`, `a` as `[B, W]`.
pub fn write_graph<T: Scalar>(g: &mut Graph<T>, memory: Var, w: Var, erase: Var, add: Var) -> Result<Var> {
    let (b, n) = (g.shape(w)[0], g.shape(w)[1]);
    let width = g.shape(memory)[2];
    let col = g.reshape(w, &[b, n, 1])?;
    let e = g.reshape(erase, &[b, 1, width])?;
    let a = g.reshape(add, &[b, 1, width])?;
    let erase_mask = g.matmul(col, e)?;
    let keep = g.one_minus(erase_mask);
    let kept = g.mul(memory, keep)?;
    let added = g.matmul(col, a)?;
    g.add(kept, added)
}

/// Layout of one head's slice of the controller's head projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    /// Key width; 0 for source-attention heads.
    pub key: usize,
    pub write: bool,
}

impl HeadLayout {
    /// Raw values consumed: key, β, g, 3 shift logits, γ, then erase and add.
    pub fn width(&self) -> usize {
        self.key + 3 + SHIFT_WIDTH + if self.write { 2 * self.key } else { 0 }
    }
}

/// Squashes raw projections `[B, layout.width()]` into valid head
/// parameters: k = tanh, β = softplus, g = σ, s = softmax, γ = 1 + softplus,
/// e = σ, a = tanh.
pub fn squash_head<T: Scalar>(g: &mut Graph<T>, raw: Var, layout: HeadLayout) -> Result<HeadVars> {
    if g.shape(raw).len() != 2 || g.shape(raw)[1] != layout.width() {
        return Err(Error::shape("squash_head", format!("{:?} for layout {layout:?}", g.shape(raw))));
    }
    let mut at = 0;
    let mut take = |g: &mut Graph<T>, len: usize| -> Result<Var> {
        let v = g.slice(raw, 1, at, len)?;
        at += len;
        Ok(v)
    };
    let key = if layout.key > 0 {
        let k = take(g, layout.key)?;
        Some(g.tanh(k))
    } else {
        None
    };
    let beta = take(g, 1)?;
    let beta = g.softplus(beta);
    let gate = take(g, 1)?;
    let gate = g.sigmoid(gate);
    let shift = take(g, SHIFT_WIDTH)?;
    let shift = g.softmax(shift, 1)?;
    let gamma = take(g, 1)?;
    let gamma = g.softplus(gamma);
    let gamma = g.add_scalar(gamma, T::one());
    let (erase, add) = if layout.write {
        let e = take(g, layout.key)?;
        let a = take(g, layout.key)?;
        (Some(g.sigmoid(e)), Some(g.tanh(a)))
    } else {
        (None, None)
    };
    Ok(HeadVars { key, beta, gate, shift, gamma, erase, add })
}

// ----------------------------------------------------------------- single

fn row_var<T: Scalar>(g: &mut Graph<T>, v: &[T]) -> Result<Var> {
    Ok(g.constant(Tensor::new(&[1, v.len()], v.to_vec())?))
}

fn scalar_var<T: Scalar>(g: &mut Graph<T>, x: T) -> Var {
    g.constant(Tensor::from_parts(vec![1, 1], vec![x]))
}

fn memory_var<T: Scalar>(g: &mut Graph<T>, m: &MemoryMatrix<T>) -> Var {
    let t = m.contents.clone().reshaped(&[1, m.locations(), m.width()]).expect("same element count");
    g.constant(t)
}

fn check_len<T>(what: &str, w: &AddressWeights<T>, n: usize) -> Result<()> {
    if w.0.len() != n {
        return Err(Error::contract(format!("{what}: weights of length {} for {n} locations", w.0.len())));
    }
    Ok(())
}

/// `u·v / ((‖u‖+ε)(‖v‖+ε))`
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape("cosine_similarity", format!("[{}] vs [{}]", u.len(), v.len())));
    }
    let mut g = Graph::inference();
    let a = row_var(&mut g, u)?;
    let b = g.constant(Tensor::new(&[1, 1, v.len()], v.to_vec())?);
    let s = g.cosine_similarity(a, b, T::lit(COSINE_EPS))?;
    Ok(g.value(s).item())
}

pub fn content_weights<T: Scalar>(key: &[T], memory: &MemoryMatrix<T>, beta: T) -> Result<AddressWeights<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::contract("content_weights: β must be ≥ 0"));
    }
    if key.len() != memory.width() {
        return Err(Error::shape("content_weights", format!("key [{}] vs memory {:?}", key.len(), memory.contents.shape())));
    }
    let mut g = Graph::inference();
    let (k, m, b) = (row_var(&mut g, key)?, memory_var(&mut g, memory), scalar_var(&mut g, beta));
    let w = content_weights_graph(&mut g, k, m, b)?;
    Ok(AddressWeights(g.value(w).data().to_vec()))
}

pub fn interpolate<T: Scalar>(content: &AddressWeights<T>, previous: &AddressWeights<T>, gate: T) -> Result<AddressWeights<T>> {
    if !(gate >= T::zero() && gate <= T::one()) {
        return Err(Error::contract("interpolate: g must lie in [0, 1]"));
    }
    check_len("interpolate", previous, content.len())?;
    let mut g = Graph::inference();
    let (c, p, gt) = (row_var(&mut g, &content.0)?, row_var(&mut g, &previous.0)?, scalar_var(&mut g, gate));
    let w = interpolate_graph(&mut g, c, p, gt)?;
    Ok(AddressWeights(g.value(w).data().to_vec()))
}

/// Circular convolution with a kernel over offsets −1, 0, +1.
pub fn shift<T: Scalar>(w: &AddressWeights<T>, kernel: &[T; SHIFT_WIDTH]) -> Result<AddressWeights<T>> {
    let mut g = Graph::inference();
    let (wv, s) = (row_var(&mut g, &w.0)?, row_var(&mut g, kernel)?);
    let out = shift_graph(&mut g, wv, s, None)?;
    Ok(AddressWeights(g.value(out).data().to_vec()))
}

pub fn sharpen<T: Scalar>(w: &AddressWeights<T>, gamma: T) -> Result<AddressWeights<T>> {
    if !(gamma >= T::one()) {
        return Err(Error::contract("sharpen: γ must be ≥ 1"));
    }
    if w.0.iter().any(|&x| x < T::zero()) {
        return Err(Error::contract("sharpen: weights must be nonnegative"));
    }
    if w.0.iter().all(|&x| x == T::zero()) {
        return Err(Error::contract("sharpen: cannot renormalise an all-zero weighting"));
    }
    let mut g = Graph::inference();
    let (wv, gm) = (row_var(&mut g, &w.0)?, scalar_var(&mut g, gamma));
    let out = sharpen_graph(&mut g, wv, gm)?;
    Ok(AddressWeights(g.value(out).data().to_vec()))
}

/// `sharpen(shift(interpolate(content_weights(k, M, β), w_prev, g), s), γ)`
pub fn address<T: Scalar>(
    head: &HeadParameters<T>,
    memory: &MemoryMatrix<T>,
    previous: &AddressWeights<T>,
) -> Result<AddressWeights<T>> {
    head.validate()?;
    check_len("address", previous, memory.locations())?;
    let content = content_weights(&head.key, memory, head.beta)?;
    let gated = interpolate(&content, previous, head.gate)?;
    let shifted = shift(&gated, &head.shift)?;
    sharpen(&shifted, head.gamma)
}

pub fn read<T: Scalar>(memory: &MemoryMatrix<T>, w: &AddressWeights<T>) -> Result<Vec<T>> {
    check_len("read", w, memory.locations())?;
    let mut g = Graph::inference();
    let (m, wv) = (memory_var(&mut g, memory), row_var(&mut g, &w.0)?);
    let r = read_graph(&mut g, m, wv)?;
    Ok(g.value(r).data().to_vec())
}

pub fn write<T: Scalar>(memory: &MemoryMatrix<T>, w: &AddressWeights<T>, erase: &[T], add: &[T]) -> Result<MemoryMatrix<T>> {
    check_len("write", w, memory.locations())?;
    if erase.len() != memory.width() || add.len() != memory.width() {
        return Err(Error::shape("write", format!("erase [{}], add [{}] for width {}", erase.len(), add.len(), memory.width())));
    }
    if erase.iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
        return Err(Error::contract("write: erase vector must lie in [0, 1]^W"));
    }
    let mut g = Graph::inference();
    let (m, wv) = (memory_var(&mut g, memory), row_var(&mut g, &w.0)?);
    let (e, a) = (row_var(&mut g, erase)?, row_var(&mut g, add)?);
    let out = write_graph(&mut g, m, wv, e, a)?;
    let t = g.value(out).clone().reshaped(&[memory.locations(), memory.width()])?;
    Ok(MemoryMatrix { contents: t })
}
