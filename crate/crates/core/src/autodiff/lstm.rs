use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One LSTM layer: a single `[input + hidden, 4·hidden]` weight over the
/// concatenated `[x; h]` and a `4·hidden` bias. Gate blocks are ordered
/// input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        init_range: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[input + hidden, 4 * hidden], init_range, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[4 * hidden]);
        LstmLayer { weight, bias, input, hidden }
    }
}

/// Standard LSTM recurrence for a batch: `x` is `[B, input]`, `h` and `c`
/// are `[B, hidden]`. Returns `(h', c')`.
pub fn lstm_cell_step<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    layer: &LstmLayer,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let (sx, sh, sc) = (g.shape(x), g.shape(h), g.shape(c));
    let ok = sx.len() == 2
        && sx[1] == layer.input
        && sh == [sx[0], layer.hidden]
        && sc == sh;
    if !ok {
        return Err(Error::contract(format!(
            "lstm_cell_step: input {sx:?}, hidden {sh:?}, cell {sc:?} for layer {}→{}",
            layer.input, layer.hidden
        )));
    }
    let hd = layer.hidden;
    let xh = g.concat(&[x, h], 1)?;
    let pre = g.matmul(xh, params.var(layer.weight))?;
    let pre = g.add(pre, params.var(layer.bias))?;
    let i = g.slice(pre, 1, 0, hd)?;
    let f = g.slice(pre, 1, hd, hd)?;
    let o = g.slice(pre, 1, 2 * hd, hd)?;
    let cand = g.slice(pre, 1, 3 * hd, hd)?;
    let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Per-layer recurrent state of an [`LstmStack`].
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    /// Output of the top layer.
    pub fn top(&self) -> Var {
        *self.h.last().expect("non-empty stack")
    }
}

/// Layers fed bottom to top within one timestep.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
        init_range: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{name}.l{l}"), inp, hidden, init_range, rng)
            })
            .collect();
        LstmStack { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, batch: usize) -> LstmState {
        let z = g.constant(crate::autodiff::Tensor::zeros(&[batch, self.hidden()]));
        LstmState { h: vec![z; self.layers.len()], c: vec![z; self.layers.len()] }
    }

    /// One timestep through every layer. `between` is applied to each
    /// layer's output before it feeds the next layer (dropout).
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        x: Var,
        state: &LstmState,
        mut between: impl FnMut(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<LstmState> {
        let mut input = x;
        let mut next = LstmState { h: Vec::with_capacity(self.layers.len()), c: Vec::with_capacity(self.layers.len()) };
        for (l, layer) in self.layers.iter().enumerate() {
            let (h, c) = lstm_cell_step(g, params, layer, input, state.h[l], state.c[l])?;
            next.h.push(h);
            next.c.push(c);
            if l + 1 < self.layers.len() {
                input = between(g, h)?;
            }
        }
        Ok(next)
    }

    /// Scalar parameter count of the stack.
    pub fn parameter_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.layers.iter().map(|l| store.get(l.weight).numel() + store.get(l.bias).numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_parameters_zero_state_gives_zero_hidden() {
        let mut store = ParamStore::<f64>::new();
        let layer = LstmLayer::new(&mut store, "cell", 3, 4, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let (h, c) = lstm_cell_step(&mut g, &p, &layer, x, z, z).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_and_closed_input_gate_preserve_cell() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LstmLayer::new(&mut store, "cell", 2, 3, 0.1, &mut rng);
        // Zero weights so gates depend on the bias only.
        store.get_mut(layer.weight).data_mut().iter_mut().for_each(|w| *w = 0.0);
        let bias = store.get_mut(layer.bias).data_mut();
        for j in 0..3 {
            bias[j] = -20.0; // input gate closed
            bias[3 + j] = 20.0; // forget gate open
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[0.5, -0.5]).unwrap());
        let h = g.constant(Tensor::from_f64(&[1, 3], &[0.1, 0.2, 0.3]).unwrap());
        let c0 = [0.7, -1.3, 2.5];
        let c = g.constant(Tensor::from_f64(&[1, 3], &c0).unwrap());
        let (_, c1) = lstm_cell_step(&mut g, &p, &layer, x, h, c).unwrap();
        for (a, b) in g.value(c1).data().iter().zip(c0) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let mut store = ParamStore::<f64>::new();
        let layer = LstmLayer::new(&mut store, "cell", 3, 4, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let z = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(lstm_cell_step(&mut g, &p, &layer, x, z, z), Err(Error::Contract(_))));
    }
}
