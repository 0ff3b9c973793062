//! Training objective: score regression, pairwise differences, wavelet
//! fidelity of the auxiliary reconstruction, and permutation consistency of
//! the cell aggregation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cellular::{CellEmbeddings, CellularStream};
use crate::error::{Error, Result};
use crate::params::Bindings;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.1,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{n} = {v} must be a finite non-negative weight")));
            }
        }
        Ok(())
    }
}

fn column<T: Real>(values: &[f64]) -> Tensor<T> {
    Tensor::new(&[values.len(), 1], values.iter().map(|&v| T::c(v)).collect()).expect("column shape")
}

/// Mean `|s − s*|` over a `[B×1]` score column.
pub fn loss_reg<T: Real>(g: &mut Graph<T>, scores: Var, targets: &[f64]) -> Result<Var> {
    if g.shape(scores) != [targets.len(), 1] || targets.is_empty() {
        return Err(Error::shape("loss_reg", format!("{:?} vs {} targets", g.shape(scores), targets.len())));
    }
    let t = g.constant(column(targets));
    let d = g.sub(scores, t)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Disjoint pairs `(perm[2m], perm[2m+1])` from a seeded shuffle of
/// `0..batch`; with an odd batch the last shuffled element is left out.
pub fn pairing(batch: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..batch).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Mean over pairs of `| |S*_i − S*_j| − |S_i − S_j| |`.
pub fn loss_diff<T: Real>(g: &mut Graph<T>, scores: Var, targets: &[f64], pairs: &[(usize, usize)]) -> Result<Var> {
    let b = targets.len();
    if g.shape(scores) != [b, 1] {
        return Err(Error::shape("loss_diff", format!("{:?} vs {b} targets", g.shape(scores))));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("loss_diff needs at least one pair (batch of 2 or more)"));
    }
    let mut sel = vec![T::zero(); pairs.len() * b];
    let mut want = Vec::with_capacity(pairs.len());
    for (m, &(i, j)) in pairs.iter().enumerate() {
        if i >= b || j >= b || i == j {
            return Err(Error::invalid(format!("bad pair ({i}, {j}) for batch {b}")));
        }
        sel[m * b + i] += T::one();
        sel[m * b + j] -= T::one();
        want.push((targets[i] - targets[j]).abs());
    }
    let sel = g.constant(Tensor::new(&[pairs.len(), b], sel)?);
    let diff = g.matmul(sel, scores)?;
    let pred = g.abs(diff)?;
    let d = g.constant(column(&want));
    let gap = g.sub(d, pred)?;
    let a = g.abs(gap)?;
    g.mean(a)
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let m = g.abs(d)?;
    g.mean(m)
}

/// Sum over `levels` of the mean absolute difference of each detail band,
/// plus the final approximation band.
pub fn loss_wavelet<T: Real>(g: &mut Graph<T>, image: Var, recon: Var, levels: usize) -> Result<Var> {
    if g.shape(image) != g.shape(recon) {
        return Err(Error::shape(
            "loss_wavelet",
            format!("{:?} vs {:?}", g.shape(image), g.shape(recon)),
        ));
    }
    if levels == 0 {
        return Err(Error::invalid("wavelet loss needs at least one level"));
    }
    let (mut a, mut b) = (image, recon);
    let mut total: Option<Var> = None;
    for _ in 0..levels {
        let (ba, _) = g.dwt2(a)?;
        let (bb, _) = g.dwt2(b)?;
        for k in 1..4 {
            let t = mean_abs_diff(g, ba[k], bb[k])?;
            total = Some(match total {
                Some(s) => g.add(s, t)?,
                None => t,
            });
        }
        a = ba[0];
        b = bb[0];
    }
    let ll = mean_abs_diff(g, a, b)?;
    match total {
        Some(s) => g.add(s, ll),
        None => Ok(ll),
    }
}

/// Seeded permutation of the `2K` cell tokens.
pub fn token_permutation(tokens: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..tokens).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Mean `|Aggr(tokens) − Aggr(tokens permuted)|`; `None` when there are no cells.
pub fn loss_aggr<T: Real>(
    g: &mut Graph<T>,
    stream: &CellularStream,
    p: &Bindings,
    emb: &CellEmbeddings,
    seed: u64,
) -> Result<Option<Var>> {
    let Some(seq) = emb.sequence(g)? else {
        return Ok(None);
    };
    let perm = token_permutation(g.shape(seq)[0], seed);
    let canonical = stream.aggregate(g, p, Some(seq))?;
    let shuffled = g.permute_rows(seq, &perm)?;
    let other = stream.aggregate(g, p, Some(shuffled))?;
    Ok(Some(mean_abs_diff(g, canonical, other)?))
}

/// Loss components of one batch; disabled or inapplicable terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reg: Var,
    pub diff: Option<Var>,
    pub wavelet: Option<Var>,
    pub aggr: Option<Var>,
}

/// `L_reg + λ1·L_diff + λ2·L_wavelet + λ3·L_aggr`, skipping absent terms.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut total = terms.reg;
    for (term, lambda) in [(terms.diff, w.lambda1), (terms.wavelet, w.lambda2), (terms.aggr, w.lambda3)] {
        if let Some(t) = term {
            let s = g.scale(t, T::c(lambda))?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn combine(w: &LossWeights, reg: f64, diff: Option<f64>, wavelet: Option<f64>, aggr: Option<f64>) -> f64 {
    reg + w.lambda1 * diff.unwrap_or(0.0) + w.lambda2 * wavelet.unwrap_or(0.0) + w.lambda3 * aggr.unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new(&[v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn reg_examples() {
        let mut g = Graph::new();
        for (s, t, want) in [(0.7, 0.7, 0.0), (1.0, 0.0, 1.0)] {
            let sv = scores(&mut g, &[s]);
            let l = loss_reg(&mut g, sv, &[t]).unwrap();
            assert_eq!(g.scalar(l), want);
        }
        let sv = scores(&mut g, &[0.2, 0.9]);
        let l = loss_reg(&mut g, sv, &[0.5, 0.8]).unwrap();
        assert!((g.scalar(l) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn diff_examples() {
        let mut g = Graph::new();
        let sv = scores(&mut g, &[0.3, 0.9, 0.1]);
        let l = loss_diff(&mut g, sv, &[0.3, 0.9, 0.1], &pairing(3, 4)).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let sv = scores(&mut g, &[0.5, 0.5]);
        let l = loss_diff(&mut g, sv, &[0.0, 1.0], &[(0, 1)]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
    }

    #[test]
    fn odd_batches_drop_one() {
        let p = pairing(7, 1);
        assert_eq!(p.len(), 3);
        let mut seen: Vec<usize> = p.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert_eq!(pairing(7, 1), p);
    }

    #[test]
    fn weights_default_and_sum() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2, w.lambda3), (0.5, 0.1, 0.5));
        assert!((combine(&w, 1.0, Some(1.0), Some(1.0), Some(1.0)) - 2.1).abs() < 1e-15);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        assert_eq!(combine(&zero, 0.4, Some(3.0), Some(2.0), Some(1.0)), 0.4);
        assert!(LossWeights { lambda1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn wavelet_loss_of_identical_images_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 8, 8], 0.25));
        let y = g.constant(Tensor::full(&[1, 3, 8, 8], 0.25));
        let l = loss_wavelet(&mut g, x, y, 2).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}
