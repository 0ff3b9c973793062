//! Bidirectional receptance-weighted key-value mixing.
//!
//! For tokens `t` and channels `c`, with decay `w ≥ 0` and self bonus `u`:
//!
//! ```text
//! wkv_t = (Σ_{i≠t} e^{k_i − w·|t−i|} v_i + e^{u + k_t} v_t)
//!       / (Σ_{i≠t} e^{k_i − w·|t−i|}     + e^{u + k_t})
//! ```
//!
//! Both one-sided sums obey a first-order recurrence, so the forward and
//! backward passes cost `O(n·D)`. Every running sum is stored as a mantissa
//! plus the largest exponent seen so far; nothing is exponentiated with a
//! positive argument.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Output of [`forward`]. `ln_den` is `ln` of the full denominator and is
/// what the backward pass needs besides the output itself.
#[derive(Clone, Debug)]
pub struct WkvOutput<T> {
    pub y: Vec<T>,
    pub ln_den: Vec<T>,
}

#[inline]
fn exp_rel<T: Real>(x: T) -> T {
    // exp of a difference where the minuend may be -inf
    if x == T::neg_infinity() {
        T::zero()
    } else {
        x.exp()
    }
}

/// One-sided decayed sums `Σ_{i<t} e^{e_i − w(t−i)}·(a_i, b_i)` for every `t`,
/// plus the distance-weighted variants `Σ (t−i)·…` when `moments` is set.
/// Passing `reverse` walks from the end, giving the `i > t` side.
struct Sweep<T> {
    a: Vec<T>,
    b: Vec<T>,
    ma: Vec<T>,
    mb: Vec<T>,
    p: Vec<T>,
}

fn sweep<T: Real>(
    exps: &[T],
    a: &[T],
    b: Option<&[T]>,
    w: &[T],
    n: usize,
    d: usize,
    reverse: bool,
    moments: bool,
) -> Sweep<T> {
    let mut out = Sweep {
        a: vec![T::zero(); n * d],
        b: vec![T::zero(); n * d],
        ma: if moments { vec![T::zero(); n * d] } else { Vec::new() },
        mb: if moments { vec![T::zero(); n * d] } else { Vec::new() },
        p: vec![T::neg_infinity(); n * d],
    };
    let mut sa = vec![T::zero(); d];
    let mut sb = vec![T::zero(); d];
    let mut sma = vec![T::zero(); d];
    let mut smb = vec![T::zero(); d];
    let mut sp = vec![T::neg_infinity(); d];
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        let row = t * d;
        out.a[row..row + d].copy_from_slice(&sa);
        out.b[row..row + d].copy_from_slice(&sb);
        out.p[row..row + d].copy_from_slice(&sp);
        if moments {
            out.ma[row..row + d].copy_from_slice(&sma);
            out.mb[row..row + d].copy_from_slice(&smb);
        }
        for c in 0..d {
            let e = exps[row + c];
            let p_new = sp[c].max(e) - w[c];
            let f_old = exp_rel(sp[c] - w[c] - p_new);
            let f_new = (e - w[c] - p_new).exp();
            let av = a[row + c];
            let bv = b.map_or(T::one(), |b| b[row + c]);
            if moments {
                sma[c] = (sma[c] + sa[c]) * f_old + av * f_new;
                smb[c] = (smb[c] + sb[c]) * f_old + bv * f_new;
            }
            sa[c] = sa[c] * f_old + av * f_new;
            sb[c] = sb[c] * f_old + bv * f_new;
            sp[c] = p_new;
        }
    }
    out
}

fn check_shapes<T>(k: &[T], v: &[T], w: &[T], u: &[T], n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::shape("bi_wkv", "needs at least one token and channel"));
    }
    if k.len() != n * d || v.len() != n * d || w.len() != d || u.len() != d {
        return Err(Error::shape(
            "bi_wkv",
            format!(
                "k {} v {} w {} u {} for n={n}, d={d}",
                k.len(),
                v.len(),
                w.len(),
                u.len()
            ),
        ));
    }
    Ok(())
}

/// Linear-time forward pass. `k`, `v` are `[n×d]` row-major; `w`, `u` are `[d]`.
pub fn forward<T: Real>(k: &[T], v: &[T], w: &[T], u: &[T], n: usize, d: usize) -> Result<WkvOutput<T>> {
    check_shapes(k, v, w, u, n, d)?;
    if w.iter().any(|&x| x < T::zero()) {
        return Err(Error::invalid("bi_wkv decay must be non-negative"));
    }
    let left = sweep(k, v, None, w, n, d, false, false);
    let right = sweep(k, v, None, w, n, d, true, false);
    let mut y = vec![T::zero(); n * d];
    let mut ln_den = vec![T::zero(); n * d];
    for i in 0..n * d {
        let c = i % d;
        let e_self = u[c] + k[i];
        let p = left.p[i].max(right.p[i]).max(e_self);
        let fl = exp_rel(left.p[i] - p);
        let fr = exp_rel(right.p[i] - p);
        let fs = (e_self - p).exp();
        let num = left.a[i] * fl + right.a[i] * fr + v[i] * fs;
        let den = left.b[i] * fl + right.b[i] * fr + fs;
        y[i] = num / den;
        ln_den[i] = p + den.ln();
    }
    if !y.iter().chain(&ln_den).all(|x| x.is_finite()) {
        return Err(Error::NonFinite { op: "bi_wkv" });
    }
    Ok(WkvOutput { y, ln_den })
}

/// Gradients of [`forward`] with respect to `k`, `v`, `w` and `u`.
pub struct WkvGrads<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub w: Vec<T>,
    pub u: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    k: &[T],
    v: &[T],
    w: &[T],
    u: &[T],
    out: &WkvOutput<T>,
    gy: &[T],
    n: usize,
    d: usize,
) -> WkvGrads<T> {
    let (y, lnb) = (&out.y, &out.ln_den);
    // Σ_{t≠i} e^{−lnb_t − w|t−i|} · (gy_t, −gy_t·y_t)
    let neg_lnb: Vec<T> = lnb.iter().map(|&x| -x).collect();
    let gyy: Vec<T> = gy.iter().zip(y).map(|(&g, &yv)| -g * yv).collect();
    let gl = sweep(&neg_lnb, gy, Some(&gyy), w, n, d, false, false);
    let gr = sweep(&neg_lnb, gy, Some(&gyy), w, n, d, true, false);
    // distance-weighted sums over keys for the decay gradient
    let fl = sweep(k, v, None, w, n, d, false, true);
    let fr = sweep(k, v, None, w, n, d, true, true);

    let mut grads = WkvGrads {
        k: vec![T::zero(); n * d],
        v: vec![T::zero(); n * d],
        w: vec![T::zero(); d],
        u: vec![T::zero(); d],
    };
    for i in 0..n * d {
        let c = i % d;
        let el = exp_rel(gl.p[i] + k[i]);
        let er = exp_rel(gr.p[i] + k[i]);
        let g_sum = gl.a[i] * el + gr.a[i] * er;
        let h_sum = gl.b[i] * el + gr.b[i] * er;
        let self_w = (u[c] + k[i] - lnb[i]).exp();
        let self_g = self_w * gy[i] * (v[i] - y[i]);
        grads.v[i] = g_sum + self_w * gy[i];
        grads.k[i] = v[i] * g_sum + h_sum + self_g;
        grads.u[c] += self_g;

        let dl = exp_rel(fl.p[i] - lnb[i]);
        let dr = exp_rel(fr.p[i] - lnb[i]);
        let moment = (fl.ma[i] - y[i] * fl.mb[i]) * dl + (fr.ma[i] - y[i] * fr.mb[i]) * dr;
        grads.w[c] -= gy[i] * moment;
    }
    grads
}

/// Direct `O(n²·D)` evaluation of the same formula, with a per-output
/// max-shift. Serves as the reference for the recurrent implementation.
pub fn direct<T: Real>(k: &[T], v: &[T], w: &[T], u: &[T], n: usize, d: usize) -> Result<Vec<T>> {
    check_shapes(k, v, w, u, n, d)?;
    let mut y = vec![T::zero(); n * d];
    let mut ex = vec![T::zero(); n];
    for t in 0..n {
        for c in 0..d {
            for (i, e) in ex.iter_mut().enumerate() {
                *e = if i == t {
                    u[c] + k[t * d + c]
                } else {
                    k[i * d + c] - w[c] * T::c(t.abs_diff(i) as f64)
                };
            }
            let m = ex.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let (mut num, mut den) = (T::zero(), T::zero());
            for (i, &e) in ex.iter().enumerate() {
                let f = (e - m).exp();
                num += f * v[i * d + c];
                den += f;
            }
            y[t * d + c] = num / den;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let den = a.iter().chain(b).fold(1e-12f64, |m, x| m.max(x.abs()));
        num / den
    }

    #[test]
    fn single_token_returns_value() {
        let out = forward(&[0.3], &[-1.7], &[0.5], &[0.2], 1, 1).unwrap();
        assert!((out.y[0] + 1.7f64).abs() < 1e-15);
    }

    #[test]
    fn strong_decay_isolates_self_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (16, 4);
        let k = rand_vec(&mut rng, n * d, -1.0, 1.0);
        let v = rand_vec(&mut rng, n * d, -1.0, 1.0);
        let out = forward(&k, &v, &[50.0; 4], &[0.0; 4], n, d).unwrap();
        for (y, v) in out.y.iter().zip(&v) {
            assert!((y - v).abs() < 1e-18_f64.max(1e-15));
        }
    }

    #[test]
    fn recurrence_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(n, d) in &[(1, 1), (2, 3), (17, 8), (64, 8)] {
            let k = rand_vec(&mut rng, n * d, -3.0, 3.0);
            let v = rand_vec(&mut rng, n * d, -2.0, 2.0);
            let w = rand_vec(&mut rng, d, 0.0, 2.0);
            let u = rand_vec(&mut rng, d, -1.0, 1.0);
            let fast = forward(&k, &v, &w, &u, n, d).unwrap();
            let slow = direct(&k, &v, &w, &u, n, d).unwrap();
            assert!(rel_err(&fast.y, &slow) < 1e-10, "n={n} d={d}");
        }
    }

    #[test]
    fn large_keys_do_not_overflow() {
        let (n, d) = (8, 2);
        let k: Vec<f64> = (0..n * d).map(|i| 400.0 + i as f64).collect();
        let v: Vec<f64> = (0..n * d).map(|i| (i as f64).sin()).collect();
        let out = forward(&k, &v, &[0.1, 0.7], &[0.0, 1.0], n, d).unwrap();
        let slow = direct(&k, &v, &[0.1, 0.7], &[0.0, 1.0], n, d).unwrap();
        assert!(rel_err(&out.y, &slow) < 1e-10);
    }

    #[test]
    fn negative_decay_rejected() {
        assert!(forward(&[0.0], &[0.0], &[-0.1], &[0.0], 1, 1).is_err());
        assert!(forward::<f64>(&[], &[], &[], &[], 0, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (9, 3);
        let k = rand_vec(&mut rng, n * d, -2.0, 2.0);
        let v = rand_vec(&mut rng, n * d, -1.0, 1.0);
        let w = rand_vec(&mut rng, d, 0.1, 1.5);
        let u = rand_vec(&mut rng, d, -1.0, 1.0);
        let gy = rand_vec(&mut rng, n * d, -1.0, 1.0);
        let loss = |k: &[f64], v: &[f64], w: &[f64], u: &[f64]| -> f64 {
            let y = forward(k, v, w, u, n, d).unwrap().y;
            y.iter().zip(&gy).map(|(a, b)| a * b).sum()
        };
        let out = forward(&k, &v, &w, &u, n, d).unwrap();
        let g = backward(&k, &v, &w, &u, &out, &gy, n, d);
        let h = 1e-6;
        let fd = |which: usize, len: usize| -> Vec<f64> {
            (0..len)
                .map(|j| {
                    let mut args = [k.clone(), v.clone(), w.clone(), u.clone()];
                    args[which][j] += h;
                    let up = loss(&args[0], &args[1], &args[2], &args[3]);
                    args[which][j] -= 2.0 * h;
                    let dn = loss(&args[0], &args[1], &args[2], &args[3]);
                    (up - dn) / (2.0 * h)
                })
                .collect()
        };
        assert!(rel_err(&g.k, &fd(0, n * d)) < 1e-6);
        assert!(rel_err(&g.v, &fd(1, n * d)) < 1e-6);
        assert!(rel_err(&g.w, &fd(2, d)) < 1e-6);
        assert!(rel_err(&g.u, &fd(3, d)) < 1e-6);
    }
}
