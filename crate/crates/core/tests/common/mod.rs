//! Straight-line reference implementations and random case generators
//! shared by the integration tests and the acceptance runner. Nothing here
//! goes through the tape.
#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const COSINE_EPS: f64 = 1e-8;
pub const SHARPEN_EPS: f64 = 1e-12;
pub const MASKED: f64 = -1e30;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / ((norm(u) + COSINE_EPS) * (norm(v) + COSINE_EPS))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn content(key: &[f64], memory: &[Vec<f64>], beta: f64) -> Vec<f64> {
    let scores: Vec<f64> = memory.iter().map(|row| beta * cosine(key, row)).collect();
    softmax(&scores)
}

pub fn interpolate(c: &[f64], prev: &[f64], g: f64) -> Vec<f64> {
    (0..c.len()).map(|i| prev[i] + g * (c[i] - prev[i])).collect()
}

/// `w̃(i) = Σ_j w(j)·s(i − j)` over offsets −1, 0, +1 (kernel entries 0, 1,
/// 2), indices modulo `n`, visiting each (j, offset) pair explicitly.
pub fn shift(w: &[f64], s: &[f64; 3], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for i in 0..n {
        for j in 0..n {
            for (k, off) in [-1i64, 0, 1].into_iter().enumerate() {
                if (i as i64 - j as i64 - off).rem_euclid(n as i64) == 0 {
                    out[i] += w[j] * s[k];
                }
            }
        }
    }
    out
}

/// Evaluated on `w / max w` with the ε guard only below ε, as documented
/// for the library.
pub fn sharpen(w: &[f64], gamma: f64) -> Vec<f64> {
    let mut m = 0.0;
    for &x in w {
        if x > m {
            m = x;
        }
    }
    if m == 0.0 {
        m = 1.0;
    }
    let p: Vec<f64> = w.iter().map(|x| (x / m).powf(gamma)).collect();
    let mut z: f64 = p.iter().sum();
    if z < SHARPEN_EPS {
        z += SHARPEN_EPS;
    }
    p.iter().map(|x| x / z).collect()
}

#[derive(Clone, Debug)]
pub struct Head {
    pub key: Vec<f64>,
    pub beta: f64,
    pub gate: f64,
    pub shift: [f64; 3],
    pub gamma: f64,
}

pub fn address(h: &Head, memory: &[Vec<f64>], prev: &[f64]) -> Vec<f64> {
    let c = content(&h.key, memory, h.beta);
    let gated = interpolate(&c, prev, h.gate);
    let shifted = shift(&gated, &h.shift, memory.len());
    sharpen(&shifted, h.gamma)
}

pub fn read(memory: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; memory[0].len()];
    for (i, row) in memory.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            r[k] += w[i] * v;
        }
    }
    r
}

pub fn write(memory: &[Vec<f64>], w: &[f64], erase: &[f64], add: &[f64]) -> Vec<Vec<f64>> {
    memory
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(k, m)| m * (1.0 - w[i] * erase[k]) + w[i] * add[k]).collect())
        .collect()
}

pub fn luong_score(q: &[f64], s: &[f64], wa: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        for j in 0..s.len() {
            total += q[i] * wa[i][j] * s[j];
        }
    }
    total
}

/// Softmax of `β·score` over the first `valid` positions, zeros after.
pub fn luong_weights(q: &[f64], states: &[Vec<f64>], valid: usize, wa: &[Vec<f64>], beta: f64) -> Vec<f64> {
    let scores: Vec<f64> = states[..valid].iter().map(|s| beta * luong_score(q, s, wa)).collect();
    let mut w = softmax(&scores);
    w.resize(states.len(), 0.0);
    w
}

/// NTM-style attention; the shift wraps over the valid prefix only.
pub fn ntm_attention(
    q: &[f64],
    states: &[Vec<f64>],
    valid: usize,
    wa: &[Vec<f64>],
    h: &Head,
    prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = luong_weights(q, states, valid, wa, h.beta);
    let gated = interpolate(&c, prev, h.gate);
    let mut shifted = shift(&gated[..valid], &h.shift, valid);
    shifted.resize(states.len(), 0.0);
    let w = sharpen(&shifted, h.gamma);
    let ctx = read(states, &w);
    (w, ctx)
}

// ------------------------------------------------------------ generators

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| normal_vec(rng, cols)).collect()
}

pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
    let z: f64 = raw.iter().sum();
    if z < 1e-12 {
        let mut w = vec![0.0; n];
        w[0] = 1.0;
        return w;
    }
    raw.iter().map(|x| x / z).collect()
}

pub fn random_head(rng: &mut ChaCha8Rng, width: usize) -> Head {
    let s = simplex(rng, 3);
    Head {
        key: normal_vec(rng, width),
        beta: rng.gen_range(0.0..20.0),
        gate: rng.gen_range(0.0..1.0),
        shift: [s[0], s[1], s[2]],
        gamma: rng.gen_range(1.0..6.0),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
