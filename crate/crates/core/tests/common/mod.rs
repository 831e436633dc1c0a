//! Literal loop implementations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use car_core::LabelMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Per-class means over supervised pixels; absent rows are zero.
pub fn centers_oracle(x: &[f64], labels: &[Option<usize>], n: usize, c: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut mu = vec![vec![0.0; c]; n];
    let mut counts = vec![0; n];
    for (i, l) in labels.iter().enumerate() {
        if let Some(k) = *l {
            counts[k] += 1;
            for j in 0..c {
                mu[k][j] += x[i * c + j];
            }
        }
    }
    for k in 0..n {
        if counts[k] > 0 {
            for j in 0..c {
                mu[k][j] /= counts[k] as f64;
            }
        }
    }
    (mu, counts)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn intra_oracle(x: &[f64], labels: &[Option<usize>], mu: &[Vec<f64>], c: usize) -> f64 {
    let mut s = 0.0;
    let mut n_valid = 0;
    for (i, l) in labels.iter().enumerate() {
        if let Some(k) = *l {
            n_valid += 1;
            for j in 0..c {
                let d = (mu[k][j] - x[i * c + j]).abs();
                s += d * d;
            }
        }
    }
    s / (n_valid * c) as f64
}

pub fn c2c_oracle(mu: &[Vec<f64>], counts: &[usize], eps0: f64) -> f64 {
    let p: Vec<usize> = (0..mu.len()).filter(|&k| counts[k] > 0).collect();
    let n = p.len();
    if n < 2 {
        return 0.0;
    }
    let c = mu[0].len() as f64;
    let mut total = 0.0;
    for &a in &p {
        let logits: Vec<f64> = p.iter().map(|&b| dot(&mu[a], &mu[b]) / c.sqrt()).collect();
        let s = softmax(&logits);
        let mut r = 0.0;
        for (bi, &b) in p.iter().enumerate() {
            if b != a {
                r += (s[bi] - eps0 / (n - 1) as f64).max(0.0);
            }
        }
        total += r * r;
    }
    total / n as f64
}

pub fn c2p_oracle(
    x: &[f64],
    labels: &[Option<usize>],
    mu: &[Vec<f64>],
    counts: &[usize],
    eps1: f64,
    literal: bool,
) -> f64 {
    let c = mu[0].len();
    let p: Vec<usize> = (0..mu.len()).filter(|&k| counts[k] > 0).collect();
    let n = p.len();
    let n_valid = labels.iter().filter(|l| l.is_some()).count();
    if n < 2 || n_valid == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let Some(y) = *l else { continue };
        let xi = &x[i * c..(i + 1) * c];
        let logits: Vec<f64> = p
            .iter()
            .map(|&b| {
                let own = dot(&mu[b], &mu[b]);
                if b == y {
                    own
                } else if literal {
                    dot(xi, &mu[b]) + own
                } else {
                    dot(xi, &mu[b])
                }
            })
            .collect();
        let s = softmax(&logits);
        let mut r = 0.0;
        for (bi, &b) in p.iter().enumerate() {
            if b != y {
                r += (s[bi] - eps1 / (n - 1) as f64).max(0.0);
            }
        }
        total += r * r;
    }
    total / n_valid as f64
}

pub fn ce_oracle(logits: &[f64], labels: &[Option<usize>], n: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0;
    for (i, l) in labels.iter().enumerate() {
        if let Some(y) = *l {
            let row = &logits[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            s -= row[y] - lse;
            count += 1;
        }
    }
    s / count as f64
}

pub fn labels_of(mask: &LabelMask) -> Vec<Option<usize>> {
    (0..mask.len()).map(|i| mask.class_at(i)).collect()
}

pub fn conv_oracle(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    (bn, h, wd, ci, co, k): (usize, usize, usize, usize, usize, usize),
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; bn * h * wd * co];
    for b in 0..bn {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..co {
                    let mut s = bias[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            for i in 0..ci {
                                s += x[((b * h + sy as usize) * wd + sx as usize) * ci + i]
                                    * w[((ky * k + kx) * ci + i) * co + o];
                            }
                        }
                    }
                    out[((b * h + y) * wd + xx) * co + o] = s;
                }
            }
        }
    }
    out
}

