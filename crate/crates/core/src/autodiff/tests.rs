use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, GradCheckOptions};
use super::*;
use crate::params::{Bindings, ParamStore};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let a = g.matmul(i, m).unwrap();
    assert_eq!(g.value(a).data(), &[1.0, 2.0, 3.0, 4.0]);
    let b = g.matmul(i, z).unwrap();
    assert_eq!(g.value(b).data(), &[0.0; 4]);
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.matmul(m, bad), Err(Error::Shape { .. })));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let mut want = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for p in 0..4 {
                want[i * 2 + j] += a.data()[i * 4 + p] * b.data()[p * 2 + j];
            }
        }
    }
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let c = g.matmul(av, bv).unwrap();
    assert!(close(g.value(c).data(), &want, 1e-12));
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, None, 1, (0, 0), 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_averaging_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 6, 6], 5.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = g.conv2d(x, w, None, 1, (0, 0), 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    assert!(g.value(y).data().iter().all(|v: &f64| (v - 5.0).abs() < 1e-12));
}

/// Direct nested-loop cross-correlation with zero padding.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cog = co / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cig {
                        let cin = (o / cog) * cig + c;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b_ * ci + cin) * h + iy as usize) * wd + ix as usize;
                                s += x.data()[xi] * w.data()[((o * cig + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn depthwise_conv_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 2, 8, 8]);
    let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), 1, (1, 1), 2).unwrap();
    assert!(close(g.value(y).data(), &conv_oracle(&x, &w, Some(&b), 1, 1, 2), 1e-12));
}

#[test]
fn strided_grouped_conv_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 4, 7, 9]);
    let w = rand_tensor(&mut rng, &[6, 2, 3, 2]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, (1, 1), 2).unwrap();
    assert!(close(g.value(y).data(), &conv_oracle(&x, &w, None, 2, 1, 2), 1e-12));
}

#[test]
fn conv_rejects_bad_groups_and_large_kernels() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, (1, 1), 2).is_err());
    let big = g.constant(Tensor::zeros(&[1, 3, 7, 7]));
    assert!(g.conv2d(x, big, None, 1, (1, 1), 1).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0], &[0.5, 0.5]),
        (&[2f64.ln(), 0.0], &[2.0 / 3.0, 1.0 / 3.0]),
        (&[1000.0, 0.0], &[1.0, 0.0]),
    ];
    for (input, want) in cases {
        let x = g.constant(t(&[2], input));
        let s = g.softmax(x).unwrap();
        assert!(close(g.value(s).data(), want, 1e-12), "{input:?}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[5, 7]).map(|v| 40.0 * v));
    let s = g.softmax(x).unwrap();
    for row in g.value(s).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sigmoid_concat_layer_norm() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.scalar(s), 0.5);

    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[3], &[3.0, 4.0, 5.0]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = g.constant(rand_tensor(&mut rng, &[1, 8]));
    let gamma = g.constant(Tensor::full(&[8], 1.0));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let v = g.value(y).data();
    let mean = v.iter().sum::<f64>() / 8.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[3], 0.3));
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_twice_needs_reset() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::Backward(_))));
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1], &[f64::MAX]));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let l = g.sum(p).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

// ---- finite-difference audit of every op --------------------------------

fn audit(
    shapes: &[(&str, &[usize])],
    seed: u64,
    loss: impl Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.insert(*name, rand_tensor(&mut rng, shape));
    }
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let report = check(&store, opts, loss).unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

/// Projects an arbitrary-shaped output to a scalar with fixed weights so
/// every output coordinate carries a distinct gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let shape = g.shape(y).to_vec();
    let w = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let wv = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

#[test]
fn grad_matmul_linear() {
    audit(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5])], 10, |g, p| {
        let y = g.linear(p.get("a")?, p.get("b")?, Some(p.get("c")?))?;
        probe(g, y)
    });
}

#[test]
fn grad_elementwise() {
    audit(&[("a", &[2, 3]), ("b", &[2, 3])], 11, |g, p| {
        let (a, b) = (p.get("a")?, p.get("b")?);
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let sc = g.scale(m, 1.7)?;
        let o = g.add_scalar(sc, 0.3)?;
        let sig = g.sigmoid(o)?;
        let om = g.one_minus(sig)?;
        let sp = g.softplus(om)?;
        let t = g.transpose(sp)?;
        probe(g, t)
    });
}

#[test]
fn grad_relu_abs() {
    audit(&[("a", &[4, 4])], 12, |g, p| {
        let a = p.get("a")?;
        let r = g.relu(a)?;
        let b = g.abs(a)?;
        let s = g.add(r, b)?;
        probe(g, s)
    });
}

#[test]
fn grad_reductions() {
    audit(&[("a", &[3, 5])], 13, |g, p| {
        let a = p.get("a")?;
        let m = g.mean_rows(a)?;
        let l1 = probe(g, m)?;
        let l2 = g.mean(a)?;
        let l3 = g.sum(a)?;
        let s = g.add(l1, l2)?;
        g.add(s, l3)
    });
}

#[test]
fn grad_concat_permute_reshape() {
    audit(&[("a", &[2, 3]), ("b", &[4, 3])], 14, |g, p| {
        let c = g.concat(&[p.get("a")?, p.get("b")?], 0)?;
        let q = g.permute_rows(c, &[3, 0, 5, 1, 4, 2])?;
        let r = g.reshape(q, &[3, 6])?;
        let d = g.concat(&[r, r], 1)?;
        probe(g, d)
    });
}

#[test]
fn grad_softmax() {
    audit(&[("a", &[3, 6])], 15, |g, p| {
        let s = g.softmax(p.get("a")?)?;
        probe(g, s)
    });
}

#[test]
fn grad_layer_norm() {
    audit(&[("x", &[3, 8]), ("gamma", &[8]), ("beta", &[8])], 16, |g, p| {
        let y = g.layer_norm(p.get("x")?, p.get("gamma")?, p.get("beta")?, 1e-5)?;
        probe(g, y)
    });
}

#[test]
fn grad_conv() {
    audit(&[("x", &[2, 4, 6, 5]), ("w", &[4, 2, 3, 3]), ("b", &[4])], 17, |g, p| {
        let y = g.conv2d(p.get("x")?, p.get("w")?, Some(p.get("b")?), 1, (1, 1), 2)?;
        probe(g, y)
    });
    audit(&[("x", &[1, 2, 7, 7]), ("w", &[3, 2, 1, 3])], 18, |g, p| {
        let y = g.conv2d(p.get("x")?, p.get("w")?, None, 2, (0, 1), 1)?;
        probe(g, y)
    });
}

#[test]
fn grad_spatial() {
    audit(&[("x", &[1, 2, 4, 6])], 19, |g, p| {
        let x = p.get("x")?;
        let pooled = g.avg_pool2(x)?;
        let up = g.upsample2(pooled)?;
        let l1 = probe(g, up)?;
        let gap = g.global_avg_pool(x)?;
        let l2 = probe(g, gap)?;
        g.add(l1, l2)
    });
}

#[test]
fn grad_wavelet() {
    audit(&[("x", &[1, 2, 5, 7])], 20, |g, p| {
        let (bands, pad) = g.dwt2(p.get("x")?)?;
        let sq = g.mul(bands[1], bands[2])?;
        let lb = probe(g, sq)?;
        let y = g.idwt2([bands[3], bands[0], bands[2], bands[1]], pad)?;
        let ly = probe(g, y)?;
        g.add(lb, ly)
    });
}

#[test]
fn grad_q_shift() {
    audit(&[("x", &[12, 8])], 21, |g, p| {
        let y = g.q_shift(p.get("x")?, 3, 4)?;
        probe(g, y)
    });
}

#[test]
fn grad_bi_wkv() {
    audit(&[("k", &[9, 4]), ("v", &[9, 4]), ("w", &[4]), ("u", &[4])], 22, |g, p| {
        let w = g.softplus(p.get("w")?)?;
        let y = g.bi_wkv(p.get("k")?, p.get("v")?, w, p.get("u")?)?;
        probe(g, y)
    });
}
