//! Correlation, rank tests, group analysis and segmentation metrics.

pub mod special;

use serde::Serialize;

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::invalid(format!("need at least {min} pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contain non-finite values"));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson(x, y)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Two-sided p-value of Spearman's ρ via `t = ρ√((n−2)/(1−ρ²))` on `n − 2`
/// degrees of freedom.
pub fn spearman_p(rho: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    (2.0 * special::student_t_sf(t.abs(), df)).min(1.0)
}

/// Exact two-sided permutation p-value of Spearman's ρ, enumerating all
/// `n!` orderings; limited to `n ≤ 10`.
pub fn spearman_p_exact(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    if x.len() > 10 {
        return Err(Error::invalid(format!("exact permutation test limited to n ≤ 10, got {}", x.len())));
    }
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let observed = pearson(&rx, &ry)?.abs();
    let n = ry.len();
    let (mut hits, mut total) = (0u64, 0u64);
    let mut count = |perm: &[f64]| {
        total += 1;
        if pearson(&rx, perm).is_ok_and(|r| r.abs() >= observed - 1e-12) {
            hits += 1;
        }
    };
    // Heap's algorithm
    let mut c = vec![0usize; n];
    count(&ry);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            count(&ry);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub dof: usize,
}

/// Kruskal–Wallis H with tie correction; p from the chi-square tail on
/// `k − 1` degrees of freedom.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    if groups.len() < 2 || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("Kruskal–Wallis needs at least two non-empty groups"));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.len() < 5 {
        return Err(Error::invalid(format!("Kruskal–Wallis needs n ≥ 5, got {}", pooled.len())));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in groups"));
    }
    let dof = groups.len() - 1;
    let n = pooled.len() as f64;
    let ranks = average_ranks(&pooled);
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0, dof });
    }
    let mean_rank = (n + 1.0) / 2.0;
    let mut start = 0;
    let mut s = 0.0;
    for g in groups {
        let rbar = ranks[start..start + g.len()].iter().sum::<f64>() / g.len() as f64;
        s += g.len() as f64 * (rbar - mean_rank).powi(2);
        start += g.len();
    }
    let h = (12.0 / (n * (n + 1.0)) * s / correction).max(0.0);
    Ok(KruskalWallis {
        h,
        p: special::chi2_sf(h, dof as f64),
        dof,
    })
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// `|pred − ref| / max(ref, 1)`
pub fn count_error(pred: usize, reference: usize) -> f64 {
    pred.abs_diff(reference) as f64 / reference.max(1) as f64
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { (s[m - 1] + s[m]) / 2.0 })
}

pub const BIN_EDGES: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 1.0];
pub const BIN_NAMES: [&str; 4] = ["G1", "G2", "G3", "G4"];

/// G1 `[0, 0.2)`, G2 `[0.2, 0.4)`, G3 `[0.4, 0.6)`, G4 `[0.6, 1]`.
pub fn bin_of(score: f64) -> Option<usize> {
    if !(0.0..=1.0).contains(&score) {
        return None;
    }
    Some((1..4).rev().find(|&i| score >= BIN_EDGES[i]).unwrap_or(0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinSummary {
    pub name: &'static str,
    pub count: usize,
    pub median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinReport {
    pub n: usize,
    pub rho: f64,
    pub rho_p: f64,
    pub bins: Vec<BinSummary>,
    pub kruskal_wallis: Option<KruskalWallis>,
    pub warnings: Vec<String>,
}

/// Bins metric values by score, reports per-bin medians, Spearman ρ over
/// all pairs, and Kruskal–Wallis across the non-empty bins.
pub fn bin_group_analysis(scores: &[f64], metrics: &[f64]) -> Result<BinReport> {
    check_pair(scores, metrics, 8)?;
    let mut groups: [Vec<f64>; 4] = Default::default();
    for (&s, &m) in scores.iter().zip(metrics) {
        let b = bin_of(s).ok_or_else(|| Error::invalid(format!("score {s} outside [0, 1]")))?;
        groups[b].push(m);
    }
    let mut warnings = Vec::new();
    let bins = groups
        .iter()
        .zip(BIN_NAMES)
        .map(|(g, name)| {
            if g.is_empty() {
                warnings.push(format!("bin {name} is empty and is excluded from Kruskal–Wallis"));
            }
            BinSummary {
                name,
                count: g.len(),
                median: median(g),
            }
        })
        .collect();
    let filled: Vec<Vec<f64>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    if filled.len() < 2 {
        return Err(Error::invalid("need at least two non-empty score bins"));
    }
    let rho = srcc(scores, metrics)?;
    Ok(BinReport {
        n: scores.len(),
        rho,
        rho_p: spearman_p(rho, scores.len()),
        bins,
        kruskal_wallis: Some(kruskal_wallis(&filled)?),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((plcc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 7.0).collect();
        assert!((plcc(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!((srcc(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(plcc(&x, &[1.0; 5]), Err(Error::Undefined(_))));
        assert!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn dice_and_count_examples() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&a, &[false, true, true, false]).unwrap(), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(count_error(10, 10), 0.0);
        assert!((count_error(8, 10) - 0.2).abs() < 1e-15);
        assert_eq!(count_error(3, 0), 3.0);
    }

    #[test]
    fn bins_are_half_open() {
        assert_eq!(bin_of(0.0), Some(0));
        assert_eq!(bin_of(0.2), Some(1));
        assert_eq!(bin_of(0.5999), Some(2));
        assert_eq!(bin_of(0.6), Some(3));
        assert_eq!(bin_of(1.0), Some(3));
        assert_eq!(bin_of(1.01), None);
    }

    #[test]
    fn constant_groups_are_degenerate() {
        let kw = kruskal_wallis(&[vec![2.0; 3], vec![2.0; 3]]).unwrap();
        assert_eq!((kw.h, kw.p), (0.0, 1.0));
    }

    #[test]
    fn exact_p_for_perfect_order() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        // only the identity and its reversal reach |ρ| = 1
        assert!((spearman_p_exact(&x, &x).unwrap() - 2.0 / 120.0).abs() < 1e-15);
    }
}
