//! Scalar-loop reference implementations shared by the integration tests.
//!
//! Everything here is written index by index from the textbook definitions
//! and deliberately shares no code with the library.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random instance: `m` experts over `c` classes, label `y`, counts.
#[derive(Clone, Debug)]
pub struct Instance {
    pub logits: Vec<Vec<f64>>,
    pub y: usize,
    pub counts: Vec<usize>,
}

impl Instance {
    pub fn refs(&self) -> Vec<&[f64]> {
        self.logits.iter().map(Vec::as_slice).collect()
    }
}

pub fn random_instance(r: &mut ChaCha8Rng, max_m: usize, max_c: usize) -> Instance {
    let m = r.random_range(1..=max_m);
    let c = r.random_range(2..=max_c);
    let scale = r.random_range(0.1..6.0);
    let logits = (0..m)
        .map(|_| (0..c).map(|_| r.random_range(-scale..scale)).collect())
        .collect();
    let mut counts: Vec<usize> = (0..c).map(|_| r.random_range(1..500)).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    Instance {
        logits,
        y: r.random_range(0..c),
        counts,
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut mx = z[0];
    for &v in z {
        if v > mx {
            mx = v;
        }
    }
    let mut e = vec![0.0; z.len()];
    let mut s = 0.0;
    for i in 0..z.len() {
        e[i] = (z[i] - mx).exp();
        s += e[i];
    }
    for v in e.iter_mut() {
        *v /= s;
    }
    e
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    s
}

pub fn ce(logits: &[Vec<f64>], y: usize) -> f64 {
    let mut total = 0.0;
    for z in logits {
        total -= softmax(z)[y].ln();
    }
    total
}

/// `sum_j sum_{k != j} KL(p_j || p_k)`.
pub fn mutual(logits: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for j in 0..logits.len() {
        for k in 0..logits.len() {
            if j != k {
                total += kl(&softmax(&logits[j]), &softmax(&logits[k]));
            }
        }
    }
    total
}

pub fn nontarget(z: &[f64], y: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, &v) in z.iter().enumerate() {
        if i != y {
            out.push(v);
        }
    }
    out
}

/// Grand teacher over the non-target positions and the consensus index.
pub fn teacher(logits: &[Vec<f64>], y: usize) -> (Vec<f64>, usize) {
    let nts: Vec<Vec<f64>> = logits.iter().map(|z| nontarget(z, y)).collect();
    let k = nts[0].len();
    let mut mean = vec![0.0; k];
    for nt in &nts {
        for i in 0..k {
            mean[i] += nt[i];
        }
    }
    for v in mean.iter_mut() {
        *v /= nts.len() as f64;
    }
    let mut hard = 0;
    for i in 1..k {
        if mean[i] > mean[hard] {
            hard = i;
        }
    }
    let mut t = vec![0.0; k];
    for i in 0..k {
        if i == hard {
            t[i] = mean[i];
        } else {
            let mut mx = f64::NEG_INFINITY;
            for nt in &nts {
                if nt[i] > mx {
                    mx = nt[i];
                }
            }
            t[i] = mx;
        }
    }
    (t, hard)
}

/// `sum_m KL(p~_teacher || p~_m)` over non-target classes.
pub fn nt_loss(logits: &[Vec<f64>], y: usize) -> f64 {
    let (t, _) = teacher(logits, y);
    let pt = softmax(&t);
    let mut total = 0.0;
    for z in logits {
        total += kl(&pt, &softmax(&nontarget(z, y)));
    }
    total
}

/// Non-target loss with the teacher taken from `frozen` and students from `live`.
pub fn nt_loss_detached(frozen: &[Vec<f64>], live: &[Vec<f64>], y: usize) -> f64 {
    let (t, _) = teacher(frozen, y);
    let pt = softmax(&t);
    live.iter().map(|z| kl(&pt, &softmax(&nontarget(z, y)))).sum()
}

/// Mutual loss with teachers from `frozen` and students from `live`.
pub fn mutual_detached(frozen: &[Vec<f64>], live: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for j in 0..frozen.len() {
        for k in 0..live.len() {
            if j != k {
                total += kl(&softmax(&frozen[j]), &softmax(&live[k]));
            }
        }
    }
    total
}

/// `-sum_m log(n_y e^{z_y} / sum_j n_j e^{z_j})`, evaluated directly.
pub fn bsce(logits: &[Vec<f64>], y: usize, counts: &[usize]) -> f64 {
    let mut total = 0.0;
    for z in logits {
        let mut mx = z[0];
        for &v in z.iter() {
            mx = mx.max(v);
        }
        let mut den = 0.0;
        for j in 0..z.len() {
            den += counts[j] as f64 * (z[j] - mx).exp();
        }
        let num = counts[y] as f64 * (z[y] - mx).exp();
        total -= (num / den).ln();
    }
    total
}

/// Central finite difference of `f` with respect to `logits[m][i]`.
pub fn central_diff(logits: &[Vec<f64>], m: usize, i: usize, h: f64, f: &dyn Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut up = logits.to_vec();
    let mut down = logits.to_vec();
    up[m][i] += h;
    down[m][i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

/// Relative error with a floor on the denominator so gradients near zero
/// are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
