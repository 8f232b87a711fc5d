//! Luong "general" attention and NTM-style attention over an encoded source.
//!
//! Both score source positions with `h_tᵀ·W_a·ĥ_s`, scale by β and apply a
//! softmax restricted to the valid (unpadded) positions. NTM-style attention
//! then runs the interpolate → shift → sharpen tail of the NTM addressing
//! pipeline, with the shift wrapping inside each sentence's valid length.

use crate::addressing::{address_from_content, AddressParts, AddressWeights, HeadParameters, HeadVars};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Logit added at padded positions before the softmax.
pub const MASK_LOGIT: f64 = -1e30;

/// Encoder states for one sentence, possibly padded past `valid`.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    states: Tensor<T>,
    valid: usize,
}

impl<T: Scalar> EncodedSource<T> {
    /// `states` is `[S, H]`; the first `valid` rows are real tokens.
    pub fn new(states: Tensor<T>, valid: usize) -> Result<Self> {
        if states.ndim() != 2 {
            return Err(Error::shape("encoded_source", format!("{:?}", states.shape())));
        }
        if valid == 0 {
            return Err(Error::contract("encoded source has no valid positions"));
        }
        if valid > states.shape()[0] {
            return Err(Error::contract(format!("valid length {valid} exceeds {} states", states.shape()[0])));
        }
        Ok(EncodedSource { states, valid })
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    pub fn width(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn states(&self) -> &Tensor<T> {
        &self.states
    }

    /// `true` for valid positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|s| s < self.valid).collect()
    }
}

/// Previous weighting over the source and the score projection `W_a`.
#[derive(Clone, Debug)]
pub struct AttentionState<T> {
    pub previous: AddressWeights<T>,
    pub projection: Tensor<T>,
}

impl<T: Scalar> AttentionState<T> {
    /// Starts attending at position 0.
    pub fn new(source: &EncodedSource<T>, projection: Tensor<T>) -> Result<Self> {
        let h = source.width();
        if projection.shape() != [h, h] {
            return Err(Error::shape("attention_state", format!("W_a {:?} for width {h}", projection.shape())));
        }
        Ok(AttentionState { previous: AddressWeights::one_hot(source.len(), 0), projection })
    }
}

// ------------------------------------------------------------------ graph

/// Batched encoder output with its padding mask.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    /// `[B, S, H]`
    pub states: Var,
    pub lens: Vec<usize>,
    /// `[B, S]`: 0 at valid positions, [`MASK_LOGIT`] at padding.
    pub mask_bias: Var,
}

impl SourceBatch {
    pub fn new<T: Scalar>(g: &mut Graph<T>, states: Var, lens: Vec<usize>) -> Result<Self> {
        let shape = g.shape(states).to_vec();
        if shape.len() != 3 || shape[0] != lens.len() {
            return Err(Error::shape("source_batch", format!("{shape:?} with {} lengths", lens.len())));
        }
        if lens.iter().any(|&l| l == 0 || l > shape[1]) {
            return Err(Error::contract(format!("source lengths {lens:?} for padded length {}", shape[1])));
        }
        let s = shape[1];
        let bias: Vec<T> = lens
            .iter()
            .flat_map(|&l| (0..s).map(move |i| if i < l { T::zero() } else { T::lit(MASK_LOGIT) }))
            .collect();
        let mask_bias = g.constant(Tensor::new(&[lens.len(), s], bias)?);
        Ok(SourceBatch { states, lens, mask_bias })
    }

    pub fn padded_len<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.states)[1]
    }

    /// Rows selected (and possibly repeated) by `rows`.
    pub fn select<T: Scalar>(&self, g: &mut Graph<T>, rows: &[usize]) -> Result<Self> {
        Ok(SourceBatch {
            states: g.gather_rows(self.states, rows)?,
            lens: rows.iter().map(|&r| self.lens[r]).collect(),
            mask_bias: g.gather_rows(self.mask_bias, rows)?,
        })
    }
}

/// `h_tᵀ·W_a·ĥ_s` for queries `[B, H]` against states `[B, S, H]` → `[B, S]`.
pub fn luong_scores_graph<T: Scalar>(g: &mut Graph<T>, query: Var, projection: Var, states: Var) -> Result<Var> {
    let projected = g.matmul(query, projection)?;
    let (b, h) = (g.shape(projected)[0], g.shape(projected)[1]);
    let s = g.shape(states)[1];
    let col = g.reshape(projected, &[b, h, 1])?;
    let scores = g.matmul(states, col)?;
    g.reshape(scores, &[b, s])
}

/// Softmax over valid positions of `β·scores`; `beta` is `[B, 1]` or `None`
/// for β = 1.
pub fn luong_weights_graph<T: Scalar>(
    g: &mut Graph<T>,
    query: Var,
    projection: Var,
    source: &SourceBatch,
    beta: Option<Var>,
) -> Result<Var> {
    let scores = luong_scores_graph(g, query, projection, source.states)?;
    let scaled = match beta {
        Some(b) => g.mul(scores, b)?,
        None => scores,
    };
    let masked = g.add(scaled, source.mask_bias)?;
    g.softmax(masked, 1)
}

/// Luong content weights followed by interpolation, shift and sharpening.
/// Returns every intermediate weighting; `parts.weights` is the new attention.
pub fn ntm_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    query: Var,
    projection: Var,
    source: &SourceBatch,
    head: &HeadVars,
    previous: Var,
) -> Result<AddressParts> {
    let content = luong_weights_graph(g, query, projection, source, Some(head.beta))?;
    address_from_content(g, head, content, previous, Some(&source.lens))
}

/// `Σ_s w(s)·ĥ_s` for weights `[B, S]` → `[B, H]`.
pub fn context_graph<T: Scalar>(g: &mut Graph<T>, weights: Var, states: Var) -> Result<Var> {
    let (b, s) = (g.shape(weights)[0], g.shape(weights)[1]);
    let h = g.shape(states)[2];
    let row = g.reshape(weights, &[b, 1, s])?;
    let ctx = g.matmul(row, states)?;
    g.reshape(ctx, &[b, h])
}

// ----------------------------------------------------------------- single

fn single_source<T: Scalar>(g: &mut Graph<T>, source: &EncodedSource<T>) -> Result<SourceBatch> {
    let states = g.constant(source.states.clone().reshaped(&[1, source.len(), source.width()])?);
    SourceBatch::new(g, states, vec![source.valid])
}

fn query_vars<T: Scalar>(g: &mut Graph<T>, query: &[T], state: &AttentionState<T>, width: usize) -> Result<(Var, Var)> {
    if query.len() != width {
        return Err(Error::shape("attention", format!("query [{}] for width {width}", query.len())));
    }
    let q = g.constant(Tensor::new(&[1, width], query.to_vec())?);
    let p = g.constant(state.projection.clone());
    Ok((q, p))
}

/// `h_tᵀ·W_a·ĥ_s`
pub fn luong_score<T: Scalar>(query: &[T], state_s: &[T], projection: &Tensor<T>) -> Result<T> {
    let h = query.len();
    if state_s.len() != h || projection.shape() != [h, h] {
        return Err(Error::shape("luong_score", format!("[{h}], [{}], W_a {:?}", state_s.len(), projection.shape())));
    }
    let mut g = Graph::inference();
    let q = g.constant(Tensor::new(&[1, h], query.to_vec())?);
    let p = g.constant(projection.clone());
    let s = g.constant(Tensor::new(&[1, 1, h], state_s.to_vec())?);
    let out = luong_scores_graph(&mut g, q, p, s)?;
    Ok(g.value(out).item())
}

pub fn luong_weights<T: Scalar>(
    query: &[T],
    source: &EncodedSource<T>,
    beta: T,
    state: &AttentionState<T>,
) -> Result<AddressWeights<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::contract("luong_weights: β must be ≥ 0"));
    }
    let mut g = Graph::inference();
    let src = single_source(&mut g, source)?;
    let (q, p) = query_vars(&mut g, query, state, source.width())?;
    let b = g.constant(Tensor::from_parts(vec![1, 1], vec![beta]));
    let w = luong_weights_graph(&mut g, q, p, &src, Some(b))?;
    Ok(AddressWeights::raw(g.value(w).data().to_vec()))
}

/// One NTM-style attention step; replaces `state.previous` with the result.
pub fn ntm_style_attention<T: Scalar>(
    query: &[T],
    source: &EncodedSource<T>,
    head: &HeadParameters<T>,
    state: &mut AttentionState<T>,
) -> Result<(AddressWeights<T>, Vec<T>)> {
    head.validate()?;
    if state.previous.len() != source.len() {
        return Err(Error::contract(format!(
            "previous weights of length {} for source of length {}",
            state.previous.len(),
            source.len()
        )));
    }
    let mut g = Graph::inference();
    let src = single_source(&mut g, source)?;
    let (q, p) = query_vars(&mut g, query, state, source.width())?;
    let scalar = |g: &mut Graph<T>, x: T| g.constant(Tensor::from_parts(vec![1, 1], vec![x]));
    let vars = HeadVars {
        key: None,
        beta: scalar(&mut g, head.beta),
        gate: scalar(&mut g, head.gate),
        shift: g.constant(Tensor::new(&[1, head.shift.len()], head.shift.to_vec())?),
        gamma: scalar(&mut g, head.gamma),
        erase: None,
        add: None,
    };
    let prev = g.constant(Tensor::new(&[1, source.len()], state.previous.as_slice().to_vec())?);
    let parts = ntm_attention_graph(&mut g, q, p, &src, &vars, prev)?;
    let ctx = context_graph(&mut g, parts.weights, src.states)?;
    let w = AddressWeights::raw(g.value(parts.weights).data().to_vec());
    state.previous = w.clone();
    Ok((w, g.value(ctx).data().to_vec()))
}
