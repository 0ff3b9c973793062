//! Orthonormal 2-D Haar analysis and synthesis.
//!
//! Each 2×2 block `(a b; c d)` maps to
//! `LL=(a+b+c+d)/2, LH=(a+b−c−d)/2, HL=(a−b+c−d)/2, HH=(a−b−c+d)/2`.
//! The transform works on the last two axes; all leading axes are
//! independent planes. Odd extents are reflect-padded by one row/column and
//! the pad is remembered so the inverse can crop back to the original support.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Band order used throughout: `[LL, LH, HL, HH]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    LL = 0,
    LH = 1,
    HL = 2,
    HH = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
    pub const DETAIL: [Band; 3] = [Band::LH, Band::HL, Band::HH];

    // signs of (a, b, c, d)
    #[inline]
    fn signs(self) -> [f64; 4] {
        match self {
            Band::LL => [1.0, 1.0, 1.0, 1.0],
            Band::LH => [1.0, 1.0, -1.0, -1.0],
            Band::HL => [1.0, -1.0, 1.0, -1.0],
            Band::HH => [1.0, -1.0, -1.0, 1.0],
        }
    }
}

/// Reflect padding applied before analysis: `(rows, cols)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pad {
    pub row: bool,
    pub col: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubBands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    pub pad: Pad,
}

impl<T: Real> SubBands<T> {
    pub fn band(&self, b: Band) -> &Tensor<T> {
        match b {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn energy(&self) -> T {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T> {
    /// Level 1 first; each level's `ll` is the input to the next.
    pub levels: Vec<SubBands<T>>,
}

impl<T: Real> WaveletPyramid<T> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn final_ll(&self) -> &Tensor<T> {
        &self.levels.last().expect("pyramid has at least one level").ll
    }

    /// The coefficient set `W_{j,k}`: detail bands of every level plus the
    /// final approximation band.
    pub fn coefficients(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self
            .levels
            .iter()
            .flat_map(|l| [&l.lh, &l.hl, &l.hh])
            .collect();
        out.push(self.final_ll());
        out
    }
}

pub(crate) fn padded_extent(h: usize, w: usize) -> (usize, usize, Pad) {
    let pad = Pad {
        row: h % 2 == 1,
        col: w % 2 == 1,
    };
    (h + pad.row as usize, w + pad.col as usize, pad)
}

/// Reflect-pads each plane by one trailing row/column where `pad` says so.
/// Reflection excludes the edge: `[a b c] -> [a b c b]`.
pub(crate) fn reflect_pad<T: Real>(x: &[T], planes: usize, h: usize, w: usize, pad: Pad) -> Vec<T> {
    let (hp, wp) = (h + pad.row as usize, w + pad.col as usize);
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
        for r in 0..hp {
            let sr = if r == h { h - 2 } else { r };
            for c in 0..wp {
                let sc = if c == w { w - 2 } else { c };
                dst[r * wp + c] = src[sr * w + sc];
            }
        }
    }
    out
}

/// Adjoint of [`reflect_pad`]: folds the gradient of the padded row/column
/// back onto its source.
pub(crate) fn reflect_pad_adjoint<T: Real>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    pad: Pad,
) -> Vec<T> {
    let (hp, wp) = (h + pad.row as usize, w + pad.col as usize);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * hp * wp..(p + 1) * hp * wp];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..hp {
            let dr = if r == h { h - 2 } else { r };
            for c in 0..wp {
                let dc = if c == w { w - 2 } else { c };
                dst[dr * w + dc] += src[r * wp + c];
            }
        }
    }
    out
}

/// One band of the analysis step over even-sized planes.
pub(crate) fn analysis_band<T: Real>(x: &[T], planes: usize, h: usize, w: usize, band: Band) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let half = T::c(0.5);
    let s = band.signs().map(T::c);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            let r0 = &src[2 * i * w..(2 * i + 1) * w];
            let r1 = &src[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..w2 {
                let (a, b, c, d) = (r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]);
                dst[i * w2 + j] = half * (s[0] * a + s[1] * b + s[2] * c + s[3] * d);
            }
        }
    }
    out
}

/// Synthesis from four bands (any of which may be absent, meaning zero).
/// Output planes are `2·h2 × 2·w2`.
pub(crate) fn synthesis<T: Real>(bands: [Option<&[T]>; 4], planes: usize, h2: usize, w2: usize) -> Vec<T> {
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::c(0.5);
    let mut out = vec![T::zero(); planes * h * w];
    for (bi, band) in Band::ALL.iter().enumerate() {
        let Some(coef) = bands[bi] else { continue };
        let s = band.signs().map(T::c);
        for p in 0..planes {
            let src = &coef[p * h2 * w2..(p + 1) * h2 * w2];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let v = half * src[i * w2 + j];
                    dst[2 * i * w + 2 * j] += s[0] * v;
                    dst[2 * i * w + 2 * j + 1] += s[1] * v;
                    dst[(2 * i + 1) * w + 2 * j] += s[2] * v;
                    dst[(2 * i + 1) * w + 2 * j + 1] += s[3] * v;
                }
            }
        }
    }
    out
}

/// Drops the trailing row/column introduced by padding.
pub(crate) fn crop<T: Real>(x: &[T], planes: usize, hp: usize, wp: usize, pad: Pad) -> Vec<T> {
    let (h, w) = (hp - pad.row as usize, wp - pad.col as usize);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let src = &x[p * hp * wp..(p + 1) * hp * wp];
        for r in 0..h {
            out.extend_from_slice(&src[r * wp..r * wp + w]);
        }
    }
    out
}

/// Zero-fills the trailing row/column removed by [`crop`].
pub(crate) fn uncrop<T: Real>(x: &[T], planes: usize, h: usize, w: usize, pad: Pad) -> Vec<T> {
    let (hp, wp) = (h + pad.row as usize, w + pad.col as usize);
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        for r in 0..h {
            out[p * hp * wp + r * wp..][..w].copy_from_slice(&x[p * h * w + r * w..][..w]);
        }
    }
    out
}

fn band_shape(shape: &[usize], h2: usize, w2: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let nd = s.len();
    s[nd - 2] = h2;
    s[nd - 1] = w2;
    s
}

pub fn dwt2<T: Real>(x: &Tensor<T>) -> Result<SubBands<T>> {
    if x.numel() == 0 {
        return Err(Error::invalid("dwt2 of an empty tensor"));
    }
    let (planes, h, w) = x.planes()?;
    if (h % 2 == 1 && h < 2) || (w % 2 == 1 && w < 2) {
        return Err(Error::shape("dwt2", format!("{:?} too small to reflect-pad", x.shape())));
    }
    let (hp, wp, pad) = padded_extent(h, w);
    let padded;
    let src: &[T] = if pad.row || pad.col {
        padded = reflect_pad(x.data(), planes, h, w, pad);
        &padded
    } else {
        x.data()
    };
    let shape = band_shape(x.shape(), hp / 2, wp / 2);
    let mk = |b| Tensor::new(&shape, analysis_band(src, planes, hp, wp, b));
    Ok(SubBands {
        ll: mk(Band::LL)?,
        lh: mk(Band::LH)?,
        hl: mk(Band::HL)?,
        hh: mk(Band::HH)?,
        pad,
    })
}

pub fn idwt2<T: Real>(b: &SubBands<T>) -> Result<Tensor<T>> {
    let shape = b.ll.shape();
    for other in [&b.lh, &b.hl, &b.hh] {
        if other.shape() != shape {
            return Err(Error::shape(
                "idwt2",
                format!("band shapes differ: {:?} vs {:?}", shape, other.shape()),
            ));
        }
    }
    let (planes, h2, w2) = b.ll.planes()?;
    let full = synthesis(
        [
            Some(b.ll.data()),
            Some(b.lh.data()),
            Some(b.hl.data()),
            Some(b.hh.data()),
        ],
        planes,
        h2,
        w2,
    );
    let (hp, wp) = (2 * h2, 2 * w2);
    let data = if b.pad.row || b.pad.col {
        crop(&full, planes, hp, wp, b.pad)
    } else {
        full
    };
    let out_shape = band_shape(shape, hp - b.pad.row as usize, wp - b.pad.col as usize);
    Tensor::new(&out_shape, data)
}

/// Recursive decomposition of the approximation band, `levels ≥ 1` deep.
pub fn wavelet_pyramid<T: Real>(x: &Tensor<T>, levels: usize) -> Result<WaveletPyramid<T>> {
    if levels == 0 {
        return Err(Error::invalid("wavelet pyramid needs at least one level"));
    }
    let (_, mut h, mut w) = x.planes()?;
    for j in 0..levels {
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!(
                "{levels} levels too deep for {:?} (level {} would be {h}×{w})",
                x.shape(),
                j + 1
            )));
        }
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = dwt2(x)?;
    for _ in 1..levels {
        let next = dwt2(&cur.ll)?;
        out.push(cur);
        cur = next;
    }
    out.push(cur);
    Ok(WaveletPyramid { levels: out })
}
