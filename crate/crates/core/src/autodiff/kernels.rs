//! Raw forward/backward loops over flat slices. The graph layer owns shape
//! checking; these functions assume consistent sizes.

use crate::tensor::Real;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Accumulates `da += g·bᵀ` and `db += aᵀ·g`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut s = T::zero();
                for (&gv, &bv) in grow.iter().zip(brow) {
                    s += gv * bv;
                }
                da[i * k + p] += s;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
}

/// Geometry of a batched 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output columns `ox` for which `ox*stride + kx - pad_w` lands inside the input.
    #[inline]
    fn valid_range(out: usize, k: usize, pad: usize, stride: usize, len: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - pad < len
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi_excl = if len + pad > k {
            ((len + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub fn conv2d<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let mut out = vec![T::zero(); g.batch * g.c_out * oh * ow];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let grp = co / cog;
            let obase = (n * g.c_out + co) * oh * ow;
            let oplane = &mut out[obase..obase + oh * ow];
            if let Some(b) = bias {
                oplane.iter_mut().for_each(|v| *v = b[co]);
            }
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let xplane = &x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeom::valid_range(oh, ky, g.pad_h, g.stride, g.h);
                    for kx in 0..g.kw {
                        let wv = wt[((co * cig + cl) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = ConvGeom::valid_range(ow, kx, g.pad_w, g.stride, g.w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad_h;
                            let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad_w;
                                for (o, &xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * g.stride + kx - g.pad_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    if let Some(db) = dbias {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                let base = (n * g.c_out + co) * oh * ow;
                db[co] += gout[base..base + oh * ow].iter().copied().sum::<T>();
            }
        }
    }
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let grp = co / cog;
            let gplane = &gout[(n * g.c_out + co) * oh * ow..][..oh * ow];
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let xoff = (n * g.c_in + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeom::valid_range(oh, ky, g.pad_h, g.stride, g.h);
                    for kx in 0..g.kw {
                        let widx = ((co * cig + cl) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (ox0, ox1) = ConvGeom::valid_range(ow, kx, g.pad_w, g.stride, g.w);
                        let mut wacc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad_h;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow_off = xoff + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad_w;
                                let gv = grow[ox];
                                wacc += gv * x[xrow_off + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xrow_off + ix] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // 3-wide kernel, pad 1, len 4, stride 1 -> 4 outputs
        assert_eq!(ConvGeom::valid_range(4, 0, 1, 1, 4), (1, 4));
        assert_eq!(ConvGeom::valid_range(4, 1, 1, 1, 4), (0, 4));
        assert_eq!(ConvGeom::valid_range(4, 2, 1, 1, 4), (0, 3));
        // stride 2, no pad, kernel 2, len 4 -> 2 outputs
        assert_eq!(ConvGeom::valid_range(2, 1, 0, 2, 4), (0, 2));
    }
}
