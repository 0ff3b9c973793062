//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order. [`Graph::backward`] replays it once in
//! reverse. Gradients never accumulate across steps: each training step
//! builds a fresh graph, and a second `backward` on the same graph without
//! [`Graph::zero_grad`] is rejected.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::wavelet::{self, Band, Pad};
use crate::wkv;

pub use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    HaarBand { x: Var, band: Band, pad: Pad },
    InverseHaar { bands: [Var; 4], pad: Pad },
    QShift { x: Var, h: usize, w: usize },
    BiWkv { k: Var, v: Var, w: Var, u: Var, ln_den: Vec<T> },
    PermuteRows { x: Var, perm: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `dLoss/dv` after [`Graph::backward`], if `v` takes part in the gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad mirrors value shape"))
    }

    /// Discards all gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(name, value, op, &[a, b])
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(&[m, n], c)?, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not a matrix")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(&[c, r], out)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over all leading axes.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("add_row", value, Op::AddRow(x, b), &[x, b])
    }

    /// `x·w + b` for `x[r×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 − x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -T::one())?;
        self.add_scalar(n, T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / T::c(n as f64)), Op::Mean(x), &[x])
    }

    /// Mean over the first axis of a matrix: `[r×n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("mean_rows", format!("{s:?}")));
        }
        let (r, n) = (s[0], s[1]);
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::c(r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("mean_rows", Tensor::new(&[n], out)?, Op::MeanRows(x), &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Row gather `y[r] = x[perm[r]]` for a matrix `x`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || perm.len() != s[0] {
            return Err(Error::shape("permute_rows", format!("{s:?} with {} indices", perm.len())));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("permute_rows expects a permutation"));
            }
        }
        let n = s[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for &p in perm {
            data.extend_from_slice(&src[p * n..(p + 1) * n]);
        }
        let value = Tensor::new(&s, data)?;
        self.push(
            "permute_rows",
            value,
            Op::PermuteRows {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    // ---- normalisation -------------------------------------------------

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::shape("softmax", "empty axis"));
        }
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Normalises the last axis to zero mean / unit variance, then applies
    /// `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let nf = T::c(n as f64);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| g[i % n] * v + b[i % n])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    // ---- spatial -------------------------------------------------------

    /// Batched cross-correlation. `x[N×C_in×H×W]`,
    /// `w[C_out×(C_in/groups)×kh×kw]`, zero padding `(pad_h, pad_w)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if groups == 0 || stride == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("{} input / {} output channels not divisible into {groups} groups", xs[1], ws[0]),
            ));
        }
        if ws[1] != xs[1] / groups {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} channels per group, input has {}", ws[1], xs[1] / groups),
            ));
        }
        if ws[2] > xs[2] + 2 * pad.0 || ws[3] > xs[3] + 2 * pad.1 {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
            groups,
        };
        let out = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[geom.batch, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// 2×2 average pooling with stride 2 over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.value(x).planes()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{:?} has odd extent", self.shape(x))));
        }
        let (h2, w2) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::c(0.25);
        let mut out = vec![T::zero(); planes * h2 * w2];
        for p in 0..planes {
            for i in 0..h2 {
                for j in 0..w2 {
                    let b = p * h * w + 2 * i * w + 2 * j;
                    out[p * h2 * w2 + i * w2 + j] = q * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                }
            }
        }
        let value = Tensor::new(&spatial_shape(self.shape(x), h2, w2), out)?;
        self.push("avg_pool2", value, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour ×2 upsampling over the last two axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.value(x).planes()?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * h2 * w2];
        for p in 0..planes {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[p * h2 * w2 + i * w2 + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(&spatial_shape(self.shape(x), h2, w2), out)?;
        self.push("upsample2", value, Op::Upsample2(x), &[x])
    }

    /// `[N×C×H×W] → [N×C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::c(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    // ---- wavelet ---------------------------------------------------------

    /// Differentiable Haar analysis, returning `[LL, LH, HL, HH]`.
    pub fn dwt2(&mut self, x: Var) -> Result<([Var; 4], Pad)> {
        let (planes, h, w) = self.value(x).planes()?;
        if (h % 2 == 1 && h < 2) || (w % 2 == 1 && w < 2) || h == 0 || w == 0 {
            return Err(Error::shape("dwt2", format!("{:?}", self.shape(x))));
        }
        let (hp, wp, pad) = wavelet::padded_extent(h, w);
        let padded = if pad.row || pad.col {
            Some(wavelet::reflect_pad(self.value(x).data(), planes, h, w, pad))
        } else {
            None
        };
        let shape = spatial_shape(self.shape(x), hp / 2, wp / 2);
        let mut out = [Var(0); 4];
        for (i, band) in Band::ALL.into_iter().enumerate() {
            let src = padded.as_deref().unwrap_or(self.value(x).data());
            let data = wavelet::analysis_band(src, planes, hp, wp, band);
            let value = Tensor::new(&shape, data)?;
            out[i] = self.push("dwt2", value, Op::HaarBand { x, band, pad }, &[x])?;
        }
        Ok((out, pad))
    }

    /// Differentiable Haar synthesis; `pad` is the value returned by
    /// [`Graph::dwt2`] and crops the reconstruction back.
    pub fn idwt2(&mut self, bands: [Var; 4], pad: Pad) -> Result<Var> {
        let shape = self.shape(bands[0]).to_vec();
        for b in &bands[1..] {
            if self.shape(*b) != shape.as_slice() {
                return Err(Error::shape("idwt2", format!("{shape:?} vs {:?}", self.shape(*b))));
            }
        }
        let (planes, h2, w2) = self.value(bands[0]).planes()?;
        let full = wavelet::synthesis(bands.map(|b| Some(self.value(b).data())), planes, h2, w2);
        let (hp, wp) = (2 * h2, 2 * w2);
        let data = if pad.row || pad.col {
            wavelet::crop(&full, planes, hp, wp, pad)
        } else {
            full
        };
        let out_shape = spatial_shape(&shape, hp - pad.row as usize, wp - pad.col as usize);
        let value = Tensor::new(&out_shape, data)?;
        self.push("idwt2", value, Op::InverseHaar { bands, pad }, &bands)
    }

    // ---- token mixing ----------------------------------------------------

    /// Quarter-channel single-pixel shift of a token grid `[h·w × D]`.
    pub fn q_shift(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != h * w || !s[1].is_multiple_of(4) {
            return Err(Error::shape("q_shift", format!("{s:?} on a {h}×{w} grid")));
        }
        let out = crate::global::q_shift_kernel(self.value(x).data(), h, w, s[1], false);
        let value = Tensor::new(&s, out)?;
        self.push("q_shift", value, Op::QShift { x, h, w }, &[x])
    }

    /// Bidirectional WKV over `k, v [n×D]` with decay `w [D]` (must be
    /// non-negative) and bonus `u [D]`.
    pub fn bi_wkv(&mut self, k: Var, v: Var, w: Var, u: Var) -> Result<Var> {
        let s = self.shape(k).to_vec();
        if s.len() != 2 || self.shape(v) != s.as_slice() {
            return Err(Error::shape("bi_wkv", format!("k {s:?}, v {:?}", self.shape(v))));
        }
        let (n, d) = (s[0], s[1]);
        let out = wkv::forward(
            self.value(k).data(),
            self.value(v).data(),
            self.value(w).data(),
            self.value(u).data(),
            n,
            d,
        )?;
        let value = Tensor::new(&s, out.y)?;
        self.push(
            "bi_wkv",
            value,
            Op::BiWkv {
                k,
                v,
                w,
                u,
                ln_den: out.ln_den,
            },
            &[k, v, w, u],
        )
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already populated; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[T]) -> Result<()> {
        let Graph { nodes, grads, .. } = self;
        let node = &nodes[idx];
        let val = |v: Var| nodes[v.0].value.data();
        // Accumulates into the gradient buffer of `v` when it is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            assert!(v.0 < idx, "tape order violated: {} feeds {}", v.0, idx);
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |da| kernels::matmul_backward(val(*a), val(*b), g, m, k, n, Some(da), None));
                acc(*b, &mut |db| kernels::matmul_backward(val(*a), val(*b), g, m, k, n, None, Some(db)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *c * g)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] += g[i];
                        } else if xv[i] < T::zero() {
                            d[i] -= g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => acc(*x, &mut |d| {
                let s = g[0] / T::c(d.len() as f64);
                d.iter_mut().for_each(|d| *d += s);
            }),
            Op::MeanRows(x) => {
                let n = g.len();
                acc(*x, &mut |d| {
                    let inv = T::one() / T::c((d.len() / n) as f64);
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i % n] * inv;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * len..(o + 1) * len], &g[o * total + offset..][..len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::PermuteRows { x, perm } => {
                let n = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, &p) in perm.iter().enumerate() {
                        add_into(&mut d[p * n..(p + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (c, r) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax axis");
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = *node.value.shape().last().expect("layer_norm axis");
                let gam = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        d[i % n] += gv * xh;
                    }
                });
                acc(*beta, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
                acc(*x, &mut |d| {
                    let nf = T::c(n as f64);
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * n..(r + 1) * n];
                        let rx = &xhat[r * n..(r + 1) * n];
                        let dxh: Vec<T> = rg.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(rx).map(|(&a, &b)| a * b).sum();
                        for i in 0..n {
                            d[r * n + i] += *is / nf * (nf * dxh[i] - s1 - rx[i] * s2);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::conv2d_backward(xv, wv, g, geom, Some(d), None, None));
                acc(*w, &mut |d| kernels::conv2d_backward(xv, wv, g, geom, None, Some(d), None));
                if let Some(b) = b {
                    acc(*b, &mut |d| kernels::conv2d_backward(xv, wv, g, geom, None, None, Some(d)));
                }
            }
            Op::AvgPool2(x) => {
                let (planes, h, w) = nodes[x.0].value.planes()?;
                let (h2, w2) = (h / 2, w / 2);
                let q = T::c(0.25);
                acc(*x, &mut |d| {
                    for p in 0..planes {
                        for i in 0..h {
                            for j in 0..w {
                                d[p * h * w + i * w + j] += q * g[p * h2 * w2 + (i / 2) * w2 + j / 2];
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (planes, h, w) = nodes[x.0].value.planes()?;
                let (h2, w2) = (2 * h, 2 * w);
                acc(*x, &mut |d| {
                    for p in 0..planes {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                d[p * h * w + (i / 2) * w + j / 2] += g[p * h2 * w2 + i * w2 + j];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::c(hw as f64);
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i / hw] * inv;
                    }
                });
            }
            Op::HaarBand { x, band, pad } => {
                let (planes, h, w) = nodes[x.0].value.planes()?;
                let (h2, w2) = (node.value.shape()[node.value.ndim() - 2], *node.value.shape().last().unwrap());
                let mut slots: [Option<&[T]>; 4] = [None; 4];
                slots[*band as usize] = Some(g);
                let full = wavelet::synthesis(slots, planes, h2, w2);
                let folded = if pad.row || pad.col {
                    wavelet::reflect_pad_adjoint(&full, planes, h, w, *pad)
                } else {
                    full
                };
                acc(*x, &mut |d| add_into(d, &folded));
            }
            Op::InverseHaar { bands, pad } => {
                let (planes, h2, w2) = nodes[bands[0].0].value.planes()?;
                let (hp, wp) = (2 * h2, 2 * w2);
                let full = if pad.row || pad.col {
                    wavelet::uncrop(g, planes, hp - pad.row as usize, wp - pad.col as usize, *pad)
                } else {
                    g.to_vec()
                };
                for (b, band) in bands.iter().zip(Band::ALL) {
                    let gb = wavelet::analysis_band(&full, planes, hp, wp, band);
                    acc(*b, &mut |d| add_into(d, &gb));
                }
            }
            Op::QShift { x, h, w } => {
                let d_ch = node.value.shape()[1];
                let back = crate::global::q_shift_kernel(g, *h, *w, d_ch, true);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::BiWkv { k, v, w, u, ln_den } => {
                let s = node.value.shape();
                let (n, d_ch) = (s[0], s[1]);
                let out = wkv::WkvOutput {
                    y: node.value.data().to_vec(),
                    ln_den: ln_den.clone(),
                };
                let gr = wkv::backward(val(*k), val(*v), val(*w), val(*u), &out, g, n, d_ch);
                acc(*k, &mut |d| add_into(d, &gr.k));
                acc(*v, &mut |d| add_into(d, &gr.v));
                acc(*w, &mut |d| add_into(d, &gr.w));
                acc(*u, &mut |d| add_into(d, &gr.u));
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn spatial_shape(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let nd = s.len();
    s[nd - 2] = h;
    s[nd - 1] = w;
    s
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests;
