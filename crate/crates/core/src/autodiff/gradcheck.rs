use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// One compared element.
#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub elements: Vec<ElementCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.elements.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    /// Elements whose relative error exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &ElementCheck> {
        self.elements.iter().filter(move |e| !(e.relative_error <= self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn worst(&self) -> Option<&ElementCheck> {
        self.elements.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>], record: bool) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = if record { Graph::new() } else { Graph::inference() };
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract(format!("gradient check needs a scalar function, got {:?}", g.shape(out))));
    }
    Ok((g, vars, out))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every element of every input.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], perturbation: f64, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_gradients_sampled(f, inputs, perturbation, tolerance, usize::MAX, 0)
}

/// As [`check_gradients`], but compares at most `per_input` randomly chosen
/// elements of each input.
pub fn check_gradients_sampled<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    perturbation: f64,
    tolerance: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(perturbation > 0.0) {
        return Err(Error::contract(format!("perturbation must be positive, got {perturbation}")));
    }
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = T::lit(perturbation);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut elements = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let mut idx: Vec<usize> = if per_input >= n { (0..n).collect() } else { sample(&mut rng, n, per_input).into_vec() };
        idx.sort_unstable();
        for i in idx {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = evaluate(&f, &work, false)?;
            let fp = plus.0.value(plus.2).item().as_f64();
            work[k].data_mut()[i] = orig - h;
            let minus = evaluate(&f, &work, false)?;
            let fm = minus.0.value(minus.2).item().as_f64();
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * perturbation);
            let a = analytic[k].data()[i].as_f64();
            elements.push(ElementCheck { input: k, index: i, analytic: a, numeric, relative_error: relative_error(a, numeric) });
        }
    }
    Ok(GradCheckReport { tolerance, elements })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_rounding() {
        let x = Tensor::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
        let rep = check_gradients(
            |g: &mut Graph<f64>, v: &[Var]| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum_all(sq))
            },
            &[x],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.passed(), "max rel err {}", rep.max_relative_error());
        assert!(rep.max_relative_error() < 1e-7);
        assert_eq!(rep.elements.len(), 6);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let rep = check_gradients(
            |g: &mut Graph<f64>, _v: &[Var]| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(rep.elements.iter().all(|e| e.analytic == 0.0 && e.numeric == 0.0 && e.relative_error == 0.0));
    }

    #[test]
    fn wrong_gradient_is_reported_not_raised() {
        // d/dx of a constant-folded value: the tape sees a constant, the
        // finite difference sees the real dependence.
        let x = Tensor::from_f64(&[1], &[2.0]).unwrap();
        let rep = check_gradients(
            |g: &mut Graph<f64>, v: &[Var]| {
                let val = g.value(v[0]).item();
                Ok(g.constant(Tensor::scalar(val * val)))
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.failures().count(), 1);
    }

    #[test]
    fn rejects_non_positive_perturbation() {
        let x = Tensor::from_f64(&[1], &[2.0]).unwrap();
        let r = check_gradients(|g: &mut Graph<f64>, v: &[Var]| Ok(g.sum_all(v[0])), &[x], 0.0, 1e-6);
        assert!(r.is_err());
    }
}
