//! Cross-attention between the cellular query and global tokens, the
//! sigmoid gate that mixes both streams, the score heads, and slide-level
//! aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::global::linear_params;
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `softmax(q·Kᵀ/√D)·V` with `q = f_cell·W_q`, `K = F·W_k`, `V = F·W_v`.
/// Returns `F_fusion [1×D]` and the weights `[1×N]`.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    f_cell: Var,
    f_global: Var,
) -> Result<(Var, Var)> {
    let gs = g.shape(f_global).to_vec();
    if gs.len() != 2 || gs[0] == 0 {
        return Err(Error::shape("cross_attention", format!("global tokens {gs:?}")));
    }
    if g.shape(f_cell) != [1, gs[1]] {
        return Err(Error::shape(
            "cross_attention",
            format!("query {:?} against tokens {gs:?}", g.shape(f_cell)),
        ));
    }
    let q = g.matmul(f_cell, p.get("fusion.q.w")?)?;
    let k = g.matmul(f_global, p.get("fusion.k.w")?)?;
    let v = g.matmul(f_global, p.get("fusion.v.w")?)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, T::one() / T::c(gs[1] as f64).sqrt())?;
    let weights = g.softmax(scaled)?;
    let fused = g.matmul(weights, v)?;
    Ok((fused, weights))
}

/// Stand-in when cross-attention is disabled: the plain mean of `F·W_v`,
/// with uniform weights reported for heatmaps.
pub fn mean_fusion<T: Real>(g: &mut Graph<T>, p: &Bindings, f_global: Var) -> Result<(Var, Var)> {
    let s = g.shape(f_global).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape("mean_fusion", format!("global tokens {s:?}")));
    }
    let v = g.matmul(f_global, p.get("fusion.v.w")?)?;
    let m = g.mean_rows(v)?;
    let fused = g.reshape(m, &[1, s[1]])?;
    let weights = g.constant(Tensor::full(&[1, s[0]], T::one() / T::c(s[0] as f64)));
    Ok((fused, weights))
}

/// `σ(W[a ∥ b] + c) ⊙ a + (1 − σ(·)) ⊙ b`, both inputs `[1×D]`.
pub fn gated_fusion<T: Real>(g: &mut Graph<T>, p: &Bindings, f_fusion: Var, f_cell: Var) -> Result<Var> {
    if g.shape(f_fusion) != g.shape(f_cell) {
        return Err(Error::shape(
            "gated_fusion",
            format!("{:?} vs {:?}", g.shape(f_fusion), g.shape(f_cell)),
        ));
    }
    let cat = g.concat(&[f_fusion, f_cell], 1)?;
    let pre = g.linear(cat, p.get("fusion.gate.w")?, Some(p.get("fusion.gate.b")?))?;
    let gate = g.sigmoid(pre)?;
    let keep = g.mul(gate, f_fusion)?;
    let rest = g.one_minus(gate)?;
    let other = g.mul(rest, f_cell)?;
    g.add(keep, other)
}

/// Two-layer MLP with ReLU and a final sigmoid: `[1×D] → [1×1]`.
pub fn regress_score<T: Real>(g: &mut Graph<T>, p: &Bindings, f_fused: Var) -> Result<Var> {
    let h = g.linear(f_fused, p.get("head.mlp1.w")?, Some(p.get("head.mlp1.b")?))?;
    let h = g.relu(h)?;
    let o = g.linear(h, p.get("head.mlp2.w")?, Some(p.get("head.mlp2.b")?))?;
    g.sigmoid(o)
}

/// Sigmoid of a linear read-out of mean-pooled tokens; with no cells the
/// read-out sees a zero vector.
pub fn sub_score<T: Real>(g: &mut Graph<T>, p: &Bindings, name: &str, tokens: Option<Var>, dim: usize) -> Result<Var> {
    let pooled = match tokens {
        Some(t) => {
            let m = g.mean_rows(t)?;
            g.reshape(m, &[1, dim])?
        }
        None => g.constant(Tensor::zeros(&[1, dim])),
    };
    let o = g.linear(pooled, p.get(&format!("head.{name}.w"))?, Some(p.get(&format!("head.{name}.b"))?))?;
    g.sigmoid(o)
}

pub fn init_fusion<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    hidden: usize,
    mlp_hidden: usize,
    cell_dim: usize,
    cross_attention: bool,
) {
    if cross_attention {
        linear_params(store, rng, "fusion.q", hidden, hidden, false);
        linear_params(store, rng, "fusion.k", hidden, hidden, false);
    }
    linear_params(store, rng, "fusion.v", hidden, hidden, false);
    linear_params(store, rng, "fusion.gate", 2 * hidden, hidden, true);
    linear_params(store, rng, "head.mlp1", hidden, mlp_hidden, true);
    linear_params(store, rng, "head.mlp2", mlp_hidden, 1, true);
    linear_params(store, rng, "head.nuc", cell_dim, 1, true);
    linear_params(store, rng, "head.mem", cell_dim, 1, true);
}

/// Per-patch scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub patch_id: String,
    pub s_stain: f64,
    pub s_nuc: f64,
    pub s_mem: f64,
    pub usable: bool,
}

impl QualityReport {
    pub fn new(patch_id: impl Into<String>, s_stain: f64, s_nuc: f64, s_mem: f64, threshold: f64) -> Result<Self> {
        for (n, v) in [("s_stain", s_stain), ("s_nuc", s_nuc), ("s_mem", s_mem)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{n} = {v} outside [0, 1]")));
            }
        }
        Ok(QualityReport {
            patch_id: patch_id.into(),
            s_stain,
            s_nuc,
            s_mem,
            usable: s_stain >= threshold,
        })
    }
}

/// Arithmetic mean of patch scores.
pub fn slide_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("slide score needs at least one patch"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        init_fusion(&mut s, &mut rng, d, 6, 3, true);
        s
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let s = store(4);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let q = g.constant(Tensor::from_f64(&[1, 4], &[0.3, -1.0, 2.0, 0.1]).unwrap());
        let f = g.constant(Tensor::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let (fused, w) = cross_attention(&mut g, &p, q, f).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        let v = g.matmul(f, p.get("fusion.v.w").unwrap()).unwrap();
        assert!(g.value(fused).max_abs_diff(g.value(v)) < 1e-15);
    }

    #[test]
    fn zero_gate_averages() {
        let mut s = store(3);
        for n in ["fusion.gate.w", "fusion.gate.b"] {
            let t = s.get_mut(n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let a = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1, 3], &[3.0, 0.0, -3.0]).unwrap());
        let y = gated_fusion(&mut g, &p, a, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_mlp_scores_one_half() {
        let mut s = store(4);
        for n in ["head.mlp1.w", "head.mlp1.b", "head.mlp2.w", "head.mlp2.b"] {
            s.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let y = regress_score(&mut g, &p, x).unwrap();
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn slide_score_examples() {
        assert!((slide_score(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(slide_score(&[0.37]).unwrap(), 0.37);
        assert!(slide_score(&[]).is_err());
    }

    #[test]
    fn usable_follows_threshold() {
        assert!(QualityReport::new("a", 0.5, 0.1, 0.1, 0.5).unwrap().usable);
        assert!(!QualityReport::new("a", 0.49, 0.1, 0.1, 0.5).unwrap().usable);
        assert!(QualityReport::new("a", 1.2, 0.1, 0.1, 0.5).is_err());
    }
}
