// Brute-force reference computations used as test oracles.
#![allow(dead_code)]

use dpcqa_core::cellular::CellularStream;
use dpcqa_core::{ParamStore, Tensor};

pub fn pearson_naive(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

// rank = (#smaller) + (#equal + 1) / 2
pub fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let eq = v.iter().filter(|&&b| b == a).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_naive(x: &[f64], y: &[f64]) -> f64 {
    pearson_naive(&ranks_by_counting(x), &ranks_by_counting(y))
}

// H = (N−1) Σ n_i (r̄_i − r̄)² / Σ (r_ij − r̄)², which absorbs ties directly.
pub fn kruskal_naive(groups: &[Vec<f64>]) -> f64 {
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let ranks = ranks_by_counting(&pooled);
    let n = pooled.len() as f64;
    let rbar = (n + 1.0) / 2.0;
    let mut between = 0.0;
    let mut at = 0;
    for g in groups {
        let r = &ranks[at..at + g.len()];
        let m = r.iter().sum::<f64>() / g.len() as f64;
        between += g.len() as f64 * (m - rbar).powi(2);
        at += g.len();
    }
    let total: f64 = ranks.iter().map(|r| (r - rbar).powi(2)).sum();
    (n - 1.0) * between / total
}

pub fn dice_naive(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..a.len() {
        if a[i] {
            total += 1.0;
        }
        if b[i] {
            total += 1.0;
        }
        if a[i] && b[i] {
            inter += 1.0;
        }
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

/// Every output of the bidirectional WKV mix as an explicit softmax over all
/// tokens, quadratic in `n`.
pub fn wkv_quadratic(k: &[f64], v: &[f64], w: &[f64], u: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d];
    for t in 0..n {
        for c in 0..d {
            let logits: Vec<f64> = (0..n)
                .map(|i| {
                    if i == t {
                        u[c] + k[t * d + c]
                    } else {
                        k[i * d + c] - w[c] * t.abs_diff(i) as f64
                    }
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            y[t * d + c] = (0..n).map(|i| e[i] * v[i * d + c]).sum::<f64>() / z;
        }
    }
    y
}

/// Aggr-RWKV over a `[n×d]` token matrix evaluated with plain loops.
pub fn aggregate_quadratic(stream: &CellularStream, p: &ParamStore<f64>, tokens: &Tensor<f64>) -> Vec<f64> {
    let d = stream.config.cell_dim;
    let hidden = stream.config.hidden;
    let n = tokens.shape()[0];
    let get = |s: &str| p.get(s).unwrap().data().to_vec();
    let x = tokens.data();
    let r = matmul(x, &get("cell.aggr.wkv.r.w"), n, d, d);
    let k = matmul(x, &get("cell.aggr.wkv.k.w"), n, d, d);
    let v = matmul(x, &get("cell.aggr.wkv.v.w"), n, d, d);
    let w: Vec<f64> = get("cell.aggr.wkv.decay").iter().map(|&x| softplus(x)).collect();
    let u = get("cell.aggr.wkv.bonus");
    let mix = wkv_quadratic(&k, &v, &w, &u, n, d);
    let gated: Vec<f64> = r.iter().zip(&mix).map(|(&a, &b)| sigmoid(a) * b).collect();
    let out = matmul(&gated, &get("cell.aggr.wkv.out.w"), n, d, d);
    let pooled: Vec<f64> = (0..d).map(|c| (0..n).map(|i| out[i * d + c]).sum::<f64>() / n as f64).collect();
    let proj = matmul(&pooled, &get("cell.aggr.proj.w"), 1, d, hidden);
    proj.iter().zip(get("cell.aggr.proj.b")).map(|(a, b)| a + b).collect()
}
