//! Append-only computation graph with reverse-mode gradients.
//!
//! Nodes are created in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::autodiff::tensor::{broadcast_shape, for_each_broadcast, split_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var, usize),
    SumAll(Var),
    Reshape(Var),
    CircConv { signal: Var, kernel: Var, lens: Option<Vec<usize>> },
    Cosine { keys: Var, rows: Var, eps: T },
    Dropout(Var, Vec<T>),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of primitive applications together with the values they produced.
///
/// Built in recording mode ([`Graph::new`]) every node whose inputs require
/// a gradient keeps its operation for [`Graph::backward`]. An inference graph
/// ([`Graph::inference`]) stores values only.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shapes(ts: &[&[usize]]) -> String {
    ts.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), recording: true }
    }

    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was
    /// reached by the backward sweep.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// A value that takes part in gradient accumulation.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let rg = self.recording;
        self.push_node(value, Op::Leaf, rg)
    }

    /// A value treated as constant by the backward pass.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_node(value, op, rg)
    }

    // ---------------------------------------------------------------- linear

    /// `[m,k]·[k,n] -> [m,n]`, or batched `[b,m,k]·[b,k,n] -> [b,m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => return Err(Error::shape("matmul", shapes(&[sa, sb]))),
        };
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for p in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[p * m * k..],
                    (k as isize, 1),
                    &db[p * k * n..],
                    (n as isize, 1),
                    &mut out[p * m * n..],
                    (n as isize, 1),
                    false,
                );
            }
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, shapes(&[sa, sb])))?;
        let total: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); total];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for_each_broadcast(sa, sb, &out_shape, |o, i, j| out[o] = f(da[i], db[j]));
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `a^b` with broadcasting; `a` must be nonnegative where
    /// the exponent is not an integer.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("pow", a, b, |x, y| x.powf(y), Op::Pow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, T::one())
    }

    // ----------------------------------------------------------- elementwise

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// Inverted dropout: `mask` holds 0 for dropped elements and `1/(1-rate)`
    /// for kept ones.
    pub fn dropout_mask_apply(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape(
                "dropout",
                format!("{:?} vs mask of {}", self.shape(a), mask.len()),
            ));
        }
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::from_parts(src.shape().to_vec(), data);
        Ok(self.push(v, Op::Dropout(a, mask), &[a]))
    }

    // ------------------------------------------------------------- reductions

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape(name, format!("axis {axis} of {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let src = self.value(a);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| out[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let v = Tensor::from_parts(src.shape().to_vec(), out);
        Ok(self.push(v, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let src = self.value(a);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| out[at(j)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..n).map(|j| (out[at(j)] - max).exp()).sum::<T>().ln();
                for j in 0..n {
                    out[at(j)] -= lse;
                }
            }
        }
        let v = Tensor::from_parts(src.shape().to_vec(), out);
        Ok(self.push(v, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Sum along `axis`, keeping it as a dimension of size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let src = self.value(a);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let d = src.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[o * n * inner + j * inner + i];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sum(a, axis), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    // ------------------------------------------------------------------ shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                let all: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(Error::shape("concat", shapes(&all)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let src = self.value(a);
        if len == 0 || start + len > src.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of axis {axis} in {:?}", start + len, src.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { src: a, axis, start }, &[a]))
    }

    /// Selects rows along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let rows = src.shape()[0];
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather", format!("indices {indices:?} into {:?}", src.shape())));
        }
        let w = src.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&src.data()[i * w..(i + 1) * w]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// `out[b] = a[b, indices[b]]` for a `[B, V]` input.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        match src.shape() {
            [b, v] if *b == indices.len() && indices.iter().all(|&i| i < *v) => {
                let out = indices.iter().enumerate().map(|(r, &i)| src.data()[r * v + i]).collect();
                let t = Tensor::from_parts(vec![*b], out);
                Ok(self.push(t, Op::Pick(a, indices.to_vec()), &[a]))
            }
            s => Err(Error::shape("pick", format!("{s:?} with indices {indices:?}"))),
        }
    }

    // ------------------------------------------------------------ addressing

    /// Circular 1-D convolution of each row of `signal` (`[B, N]`) with the
    /// matching row of `kernel` (`[B, K]`, `K` odd).
    ///
    /// Kernel entry `k` carries offset `k - K/2`: `out(i) = Σ_k s(k)·w(i - off_k)`
    /// with indices taken modulo the row's valid length. Mass placed on the
    /// last entry moves the weighting forward by one position. When `lens` is
    /// given, row `b` only uses its first `lens[b]` positions and the rest of
    /// the output row is zero.
    pub fn circular_convolve(&mut self, signal: Var, kernel: Var, lens: Option<&[usize]>) -> Result<Var> {
        let (ss, sk) = (self.shape(signal), self.shape(kernel));
        let (b, n, k) = match (ss, sk) {
            ([b, n], [b2, k]) if b == b2 && k % 2 == 1 => (*b, *n, *k),
            _ => return Err(Error::shape("circular_convolve", shapes(&[ss, sk]))),
        };
        if let Some(l) = lens {
            if l.len() != b || l.iter().any(|&x| x == 0 || x > n) {
                return Err(Error::shape("circular_convolve", format!("lengths {l:?} for {ss:?}")));
            }
        }
        let (w, s) = (self.value(signal).data(), self.value(kernel).data());
        let mut out = vec![T::zero(); b * n];
        let half = (k / 2) as isize;
        for r in 0..b {
            let len = lens.map_or(n, |l| l[r]);
            for i in 0..len {
                let mut acc = T::zero();
                for kk in 0..k {
                    let off = kk as isize - half;
                    let j = (i as isize - off).rem_euclid(len as isize) as usize;
                    acc += w[r * n + j] * s[r * k + kk];
                }
                out[r * n + i] = acc;
            }
        }
        let op = Op::CircConv { signal, kernel, lens: lens.map(<[usize]>::to_vec) };
        Ok(self.push(Tensor::from_parts(vec![b, n], out), op, &[signal, kernel]))
    }

    /// Cosine similarity of each key (`[B, W]`) against every row of the
    /// matching matrix (`[B, N, W]`), giving `[B, N]`.
    ///
    /// Both norms are offset by `eps` so zero vectors give similarity 0.
    pub fn cosine_similarity(&mut self, keys: Var, rows: Var, eps: T) -> Result<Var> {
        let (sk, sr) = (self.shape(keys), self.shape(rows));
        let (b, n, w) = match (sk, sr) {
            ([b, w], [b2, n, w2]) if b == b2 && w == w2 => (*b, *n, *w),
            _ => return Err(Error::shape("cosine_similarity", shapes(&[sk, sr]))),
        };
        let (kd, md) = (self.value(keys).data(), self.value(rows).data());
        let mut out = vec![T::zero(); b * n];
        for r in 0..b {
            let key = &kd[r * w..(r + 1) * w];
            let nk = norm(key);
            for i in 0..n {
                let row = &md[(r * n + i) * w..(r * n + i + 1) * w];
                out[r * n + i] = dot(key, row) / ((nk + eps) * (norm(row) + eps));
            }
        }
        let op = Op::Cosine { keys, rows, eps };
        Ok(self.push(Tensor::from_parts(vec![b, n], out), op, &[keys, rows]))
    }

    // --------------------------------------------------------------- backward

    /// Accumulates `∂loss/∂v` into every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        // Taken out so that gradient buffers can be borrowed mutably while
        // input values are read; restored afterwards.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let Graph { nodes, grads, .. } = self;
        let nodes: &[Node<T>] = nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let out = &nodes[idx].value;
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => back_matmul(nodes, grads, *a, *b, g),
            Op::Add(a, b) => back_binary(nodes, grads, out, *a, *b, g, |_, _, _| (T::one(), T::one())),
            Op::Sub(a, b) => back_binary(nodes, grads, out, *a, *b, g, |_, _, _| (T::one(), -T::one())),
            Op::Mul(a, b) => back_binary(nodes, grads, out, *a, *b, g, |x, y, _| (y, x)),
            Op::Div(a, b) => back_binary(nodes, grads, out, *a, *b, g, |_, y, z| (T::one() / y, -z / y)),
            Op::Pow(a, b) => back_binary(nodes, grads, out, *a, *b, g, |x, y, z| {
                let da = if y == T::zero() { T::zero() } else { y * x.powf(y - T::one()) };
                let db = if x > T::zero() { z * x.ln() } else { T::zero() };
                (da, db)
            }),
            Op::Scale(a, k) => back_unary(nodes, grads, out, *a, g, |_, _| *k),
            Op::AddScalar(a) => back_unary(nodes, grads, out, *a, g, |_, _| T::one()),
            Op::Exp(a) => back_unary(nodes, grads, out, *a, g, |_, y| y),
            Op::Log(a) => back_unary(nodes, grads, out, *a, g, |x, _| T::one() / x),
            Op::Sigmoid(a) => back_unary(nodes, grads, out, *a, g, |_, y| y * (T::one() - y)),
            Op::Tanh(a) => back_unary(nodes, grads, out, *a, g, |_, y| T::one() - y * y),
            Op::Softplus(a) => back_unary(nodes, grads, out, *a, g, |x, _| sigmoid(x)),
            Op::Dropout(a, mask) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Softmax(a, axis) => back_softmax(nodes, grads, out, *a, *axis, g, false),
            Op::LogSoftmax(a, axis) => back_softmax(nodes, grads, out, *a, *axis, g, true),
            Op::Sum(a, axis) => {
                let (outer, n, inner) = split_axis(shp(*a), *axis);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                ga[o * n * inner + j * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for o in 0..outer {
                            let from = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], from);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let len = out.shape()[*axis];
                let (outer, n, inner) = split_axis(shp(*src), *axis);
                if let Some(gs) = slot(nodes, grads, *src) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        add_into(&mut gs[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Gather(a, indices) => {
                let w = nodes[a.0].value.numel() / shp(*a)[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Pick(a, indices) => {
                let v = shp(*a)[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, &i) in indices.iter().enumerate() {
                        ga[r * v + i] += g[r];
                    }
                }
            }
            Op::CircConv { signal, kernel, lens } => {
                let (b, n) = (shp(*signal)[0], shp(*signal)[1]);
                let k = shp(*kernel)[1];
                let half = (k / 2) as isize;
                let (w, s) = (val(*signal), val(*kernel));
                let mut gw = vec![T::zero(); b * n];
                let mut gs = vec![T::zero(); b * k];
                for r in 0..b {
                    let len = lens.as_ref().map_or(n, |l| l[r]);
                    for i in 0..len {
                        let gi = g[r * n + i];
                        for kk in 0..k {
                            let j = (i as isize - (kk as isize - half)).rem_euclid(len as isize) as usize;
                            gw[r * n + j] += gi * s[r * k + kk];
                            gs[r * k + kk] += gi * w[r * n + j];
                        }
                    }
                }
                if let Some(acc) = slot(nodes, grads, *signal) {
                    add_into(acc, &gw);
                }
                if let Some(acc) = slot(nodes, grads, *kernel) {
                    add_into(acc, &gs);
                }
            }
            Op::Cosine { keys, rows, eps } => {
                let sr = shp(*rows);
                let (b, n, w) = (sr[0], sr[1], sr[2]);
                let (kd, md) = (val(*keys), val(*rows));
                let mut gk = vec![T::zero(); b * w];
                let mut gm = vec![T::zero(); b * n * w];
                for r in 0..b {
                    let key = &kd[r * w..(r + 1) * w];
                    let nk = norm(key);
                    for i in 0..n {
                        let row = &md[(r * n + i) * w..(r * n + i + 1) * w];
                        let nm = norm(row);
                        let (dk, dm) = (nk + *eps, nm + *eps);
                        let d = dot(key, row);
                        let gi = g[r * n + i];
                        let denom = dk * dm;
                        // ∂/∂k = m/(dk·dm) − d·k/(nk·dk²·dm); the second term vanishes at nk = 0.
                        let ck = if nk > T::zero() { d / (nk * dk * dk * dm) } else { T::zero() };
                        let cm = if nm > T::zero() { d / (nm * dm * dm * dk) } else { T::zero() };
                        for c in 0..w {
                            gk[r * w + c] += gi * (row[c] / denom - ck * key[c]);
                            gm[(r * n + i) * w + c] += gi * (key[c] / denom - cm * row[c]);
                        }
                    }
                }
                if let Some(acc) = slot(nodes, grads, *keys) {
                    add_into(acc, &gk);
                }
                if let Some(acc) = slot(nodes, grads, *rows) {
                    add_into(acc, &gm);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Gradient buffer of `v`, created on first use; `None` for constants.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
}

fn back_unary<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out: &Tensor<T>,
    a: Var,
    g: &[T],
    d: impl Fn(T, T) -> T,
) {
    let x = nodes[a.0].value.data();
    if let Some(ga) = slot(nodes, grads, a) {
        for (((acc, &xi), &yi), &gi) in ga.iter_mut().zip(x).zip(out.data()).zip(g) {
            *acc += gi * d(xi, yi);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn back_binary<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    d: impl Fn(T, T, T) -> (T, T),
) {
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let (need_a, need_b) = (nodes[a.0].requires_grad, nodes[b.0].requires_grad);
    let mut ga = vec![T::zero(); if need_a { ta.numel() } else { 0 }];
    let mut gb = vec![T::zero(); if need_b { tb.numel() } else { 0 }];
    let (da, db, dz) = (ta.data(), tb.data(), out.data());
    for_each_broadcast(ta.shape(), tb.shape(), out.shape(), |o, i, j| {
        let (pa, pb) = d(da[i], db[j], dz[o]);
        if need_a {
            ga[i] += g[o] * pa;
        }
        if need_b {
            gb[j] += g[o] * pb;
        }
    });
    if let Some(acc) = slot(nodes, grads, a) {
        add_into(acc, &ga);
    }
    if let Some(acc) = slot(nodes, grads, b) {
        add_into(acc, &gb);
    }
}

fn back_matmul<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], a: Var, b: Var, g: &[T]) {
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let sa = ta.shape();
    let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
    let n = *tb.shape().last().unwrap();
    let (ki, ni) = (k as isize, n as isize);
    if let Some(ga) = slot(nodes, grads, a) {
        for p in 0..batch {
            // dA = dC · Bᵀ
            let bv = &tb.data()[p * k * n..];
            T::gemm(m, n, k, &g[p * m * n..], (ni, 1), bv, (1, ni), &mut ga[p * m * k..], (ki, 1), true);
        }
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for p in 0..batch {
            // dB = Aᵀ · dC
            let av = &ta.data()[p * m * k..];
            T::gemm(k, m, n, av, (1, ki), &g[p * m * n..], (ni, 1), &mut gb[p * k * n..], (ni, 1), true);
        }
    }
}

fn back_softmax<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out: &Tensor<T>,
    a: Var,
    axis: usize,
    g: &[T],
    log: bool,
) {
    let y = out.data();
    let (outer, n, inner) = split_axis(out.shape(), axis);
    let Some(ga) = slot(nodes, grads, a) else { return };
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            if log {
                let gsum: T = (0..n).map(|j| g[at(j)]).sum();
                for j in 0..n {
                    ga[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                }
            } else {
                let dotp: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                for j in 0..n {
                    ga[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
