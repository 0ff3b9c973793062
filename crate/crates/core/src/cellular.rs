//! Cellular branch: nucleus/membrane masks, per-cell crops, the two crop
//! encoders, and WKV aggregation of the per-cell embeddings.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::global::{linear_params, BiWkvLayer};
use crate::params::{init_uniform, Bindings, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_CROP: usize = 24;

/// Binary dilation by a `(2r+1)²` square, computed separably.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        let src = &mask[y * w..(y + 1) * w];
        // distance to the most recent set pixel, scanning both ways
        let mut last: Option<usize> = None;
        for x in 0..w {
            if src[x] {
                last = Some(x);
            }
            if last.is_some_and(|l| x - l <= radius) {
                rows[y * w + x] = true;
            }
        }
        last = None;
        for x in (0..w).rev() {
            if src[x] {
                last = Some(x);
            }
            if last.is_some_and(|l| l - x <= radius) {
                rows[y * w + x] = true;
            }
        }
    }
    let mut out = vec![false; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if rows[y * w + x] {
                last = Some(y);
            }
            if last.is_some_and(|l| y - l <= radius) {
                out[y * w + x] = true;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if rows[y * w + x] {
                last = Some(y);
            }
            if last.is_some_and(|l| l - y <= radius) {
                out[y * w + x] = true;
            }
        }
    }
    out
}

/// `dilate(nuc, radius) ∧ ¬nuc`
pub fn derive_membrane_mask(nuc: &[bool], h: usize, w: usize, radius: usize) -> Result<Vec<bool>> {
    if radius == 0 {
        return Err(Error::invalid("dilation radius must be at least 1"));
    }
    if nuc.len() != h * w {
        return Err(Error::shape("derive_membrane_mask", format!("{} pixels for {h}×{w}", nuc.len())));
    }
    Ok(dilate(nuc, h, w, radius)
        .into_iter()
        .zip(nuc)
        .map(|(d, &n)| d && !n)
        .collect())
}

/// Instance labels plus the nucleus and membrane masks derived from them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub height: usize,
    pub width: usize,
    /// 0 is background, `1..=K` are cells.
    pub labels: Vec<u32>,
    pub nuc: Vec<bool>,
    pub mem: Vec<bool>,
    pub radius: usize,
}

impl MaskPair {
    /// Requires instance ids to be exactly `1..=K`.
    pub fn from_labels(labels: Vec<u32>, height: usize, width: usize, radius: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("mask", format!("{} labels for {height}×{width}", labels.len())));
        }
        let k = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; k + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=k).find(|&i| !seen[i]) {
            return Err(Error::invalid(format!("instance ids not contiguous: {missing} of 1..={k} is absent")));
        }
        let nuc: Vec<bool> = labels.iter().map(|&l| l > 0).collect();
        let mem = derive_membrane_mask(&nuc, height, width, radius)?;
        Ok(MaskPair {
            height,
            width,
            labels,
            nuc,
            mem,
            radius,
        })
    }

    /// Renumbers arbitrary ids to `1..=K` in order of first appearance.
    pub fn compact(labels: &[u32]) -> Vec<u32> {
        let mut map = std::collections::BTreeMap::new();
        labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect()
    }

    pub fn num_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGeometry {
    pub id: u32,
    pub centroid: (f64, f64),
    /// Inclusive `(row_min, col_min, row_max, col_max)` of the nucleus.
    pub bbox: (usize, usize, usize, usize),
}

/// Cells ordered by centroid row, then column.
pub fn cell_geometry(masks: &MaskPair) -> Vec<CellGeometry> {
    let k = masks.num_instances();
    let mut acc = vec![(0.0f64, 0.0f64, 0usize, usize::MAX, usize::MAX, 0usize, 0usize); k];
    for y in 0..masks.height {
        for x in 0..masks.width {
            let l = masks.labels[y * masks.width + x] as usize;
            if l == 0 {
                continue;
            }
            let a = &mut acc[l - 1];
            a.0 += y as f64;
            a.1 += x as f64;
            a.2 += 1;
            a.3 = a.3.min(y);
            a.4 = a.4.min(x);
            a.5 = a.5.max(y);
            a.6 = a.6.max(x);
        }
    }
    let mut cells: Vec<CellGeometry> = acc
        .iter()
        .enumerate()
        .map(|(i, a)| CellGeometry {
            id: i as u32 + 1,
            centroid: (a.0 / a.2 as f64, a.1 / a.2 as f64),
            bbox: (a.3, a.4, a.5, a.6),
        })
        .collect();
    cells.sort_by(|a, b| {
        a.centroid
            .0
            .total_cmp(&b.centroid.0)
            .then(a.centroid.1.total_cmp(&b.centroid.1))
            .then(a.id.cmp(&b.id))
    });
    cells
}

/// Masked per-cell crops, `[K×3×S×S]` each, in token order.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCrops<T> {
    pub count: usize,
    pub size: usize,
    pub nucleus: Tensor<T>,
    pub membrane: Tensor<T>,
}

/// Cuts a `size×size` window centred on each nucleus bounding box and
/// multiplies it by that cell's nucleus mask or its membrane ring
/// (`dilate(nucleus_k) ∧ ¬nuc`). Pixels outside the patch are zero.
pub fn extract_cells<T: Real>(patch: &Tensor<T>, masks: &MaskPair, size: usize) -> Result<CellCrops<T>> {
    let s = patch.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != masks.height || s[2] != masks.width {
        return Err(Error::shape(
            "encode_cells",
            format!("patch {s:?} with {}×{} masks", masks.height, masks.width),
        ));
    }
    if size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let (h, w) = (masks.height, masks.width);
    let cells = cell_geometry(masks);
    let k = cells.len();
    let plane = size * size;
    let mut nuc = vec![T::zero(); k * 3 * plane];
    let mut mem = vec![T::zero(); k * 3 * plane];
    let img = patch.data();
    let r = masks.radius as isize;
    for (i, cell) in cells.iter().enumerate() {
        let (r0, c0, r1, c1) = cell.bbox;
        let top = (r0 + r1) as isize / 2 - size as isize / 2;
        let left = (c0 + c1) as isize / 2 - size as isize / 2;
        for cy in 0..size {
            let y = top + cy as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for cx in 0..size {
                let x = left + cx as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let pix = y as usize * w + x as usize;
                let in_nuc = masks.labels[pix] == cell.id;
                let in_ring = !masks.nuc[pix] && {
                    // any pixel of this cell within the square neighbourhood
                    let (ya, yb) = ((y - r).max(0), (y + r).min(h as isize - 1));
                    let (xa, xb) = ((x - r).max(0), (x + r).min(w as isize - 1));
                    (ya..=yb).any(|yy| (xa..=xb).any(|xx| masks.labels[yy as usize * w + xx as usize] == cell.id))
                };
                if !in_nuc && !in_ring {
                    continue;
                }
                let dst = if in_nuc { &mut nuc } else { &mut mem };
                for c in 0..3 {
                    dst[(i * 3 + c) * plane + cy * size + cx] = img[c * h * w + pix];
                }
            }
        }
    }
    Ok(CellCrops {
        count: k,
        size,
        nucleus: Tensor::new(&[k, 3, size, size], nuc)?,
        membrane: Tensor::new(&[k, 3, size, size], mem)?,
    })
}

/// Two 3×3 convolutions with ReLU, global average pooling and a linear map
/// to the cell embedding width.
#[derive(Clone, Debug)]
pub struct CropEncoder {
    pub prefix: String,
    pub channels: usize,
    pub out_dim: usize,
}

impl CropEncoder {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let e = self.channels;
        let p = &self.prefix;
        store.insert(format!("{p}.c1.w"), init_uniform(rng, &[e, 3, 3, 3], 27));
        store.insert(format!("{p}.c1.b"), init_uniform(rng, &[e], 27));
        store.insert(format!("{p}.c2.w"), init_uniform(rng, &[e, e, 3, 3], 9 * e));
        store.insert(format!("{p}.c2.b"), init_uniform(rng, &[e], 9 * e));
        linear_params(store, rng, &format!("{p}.fc"), e, self.out_dim, true);
    }

    /// `[K×3×S×S] → [K×D_c]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, crops: Var) -> Result<Var> {
        let q = |n: &str| p.get(&format!("{}.{n}", self.prefix));
        let h = g.conv2d(crops, q("c1.w")?, Some(q("c1.b")?), 1, (1, 1), 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, q("c2.w")?, Some(q("c2.b")?), 1, (1, 1), 1)?;
        let h = g.relu(h)?;
        let pooled = g.global_avg_pool(h)?;
        g.linear(pooled, q("fc.w")?, Some(q("fc.b")?))
    }
}

/// Per-cell token sets; both `[K×D_c]` when `count > 0`.
#[derive(Clone, Copy, Debug)]
pub struct CellEmbeddings {
    pub count: usize,
    pub nucleus: Option<Var>,
    pub membrane: Option<Var>,
}

impl CellEmbeddings {
    /// `[membrane ; nucleus]` along the token axis.
    pub fn sequence<T: Real>(&self, g: &mut Graph<T>) -> Result<Option<Var>> {
        match (self.membrane, self.nucleus) {
            (Some(m), Some(n)) => Ok(Some(g.concat(&[m, n], 0)?)),
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellularConfig {
    pub crop: usize,
    pub encoder_channels: usize,
    pub cell_dim: usize,
    pub hidden: usize,
    pub use_aggr_rwkv: bool,
}

#[derive(Clone, Debug)]
pub struct CellularStream {
    pub config: CellularConfig,
}

impl CellularStream {
    pub fn new(config: CellularConfig) -> Self {
        CellularStream { config }
    }

    pub fn nucleus_encoder(&self) -> CropEncoder {
        CropEncoder {
            prefix: "cell.nuc".into(),
            channels: self.config.encoder_channels,
            out_dim: self.config.cell_dim,
        }
    }

    pub fn membrane_encoder(&self) -> CropEncoder {
        CropEncoder {
            prefix: "cell.mem".into(),
            channels: self.config.encoder_channels,
            out_dim: self.config.cell_dim,
        }
    }

    pub fn mixer(&self) -> BiWkvLayer {
        BiWkvLayer::new("cell.aggr.wkv", self.config.cell_dim)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.nucleus_encoder().init(store, rng);
        self.membrane_encoder().init(store, rng);
        if self.config.use_aggr_rwkv {
            self.mixer().init(store, rng);
        }
        linear_params(store, rng, "cell.aggr.proj", self.config.cell_dim, self.config.hidden, true);
        store.insert("cell.aggr.default", init_uniform(rng, &[1, self.config.hidden], self.config.hidden));
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, crops: &CellCrops<T>) -> Result<CellEmbeddings> {
        if crops.count == 0 {
            return Ok(CellEmbeddings {
                count: 0,
                nucleus: None,
                membrane: None,
            });
        }
        let n = g.constant(crops.nucleus.clone());
        let m = g.constant(crops.membrane.clone());
        Ok(CellEmbeddings {
            count: crops.count,
            nucleus: Some(self.nucleus_encoder().forward(g, p, n)?),
            membrane: Some(self.membrane_encoder().forward(g, p, m)?),
        })
    }

    /// Aggregates a `[2K×D_c]` token sequence to `F_cellular`, `[1×D]`.
    /// `None` yields the learned default vector.
    pub fn aggregate<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, tokens: Option<Var>) -> Result<Var> {
        let Some(tokens) = tokens else {
            return p.get("cell.aggr.default");
        };
        let mixed = if self.config.use_aggr_rwkv {
            self.mixer().forward(g, p, tokens)?
        } else {
            tokens
        };
        let pooled = g.mean_rows(mixed)?;
        let row = g.reshape(pooled, &[1, self.config.cell_dim])?;
        g.linear(row, p.get("cell.aggr.proj.w")?, Some(p.get("cell.aggr.proj.b")?))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        crops: &CellCrops<T>,
    ) -> Result<(CellEmbeddings, Var)> {
        let emb = self.encode(g, p, crops)?;
        let seq = emb.sequence(g)?;
        let f = self.aggregate(g, p, seq)?;
        Ok((emb, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&str]) -> (Vec<bool>, usize, usize) {
        let h = rows.len();
        let w = rows[0].len();
        let m = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        (m, h, w)
    }

    #[test]
    fn ring_around_single_pixel() {
        let (m, h, w) = grid(&[".....", ".....", "..#..", ".....", "....."]);
        let mem = derive_membrane_mask(&m, h, w, 1).unwrap();
        let (want, _, _) = grid(&[".....", ".###.", ".#.#.", ".###.", "....."]);
        assert_eq!(mem, want);
        assert_eq!(mem.iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn empty_and_full_masks() {
        let empty = vec![false; 36];
        assert!(derive_membrane_mask(&empty, 6, 6, 2).unwrap().iter().all(|&b| !b));
        let full = vec![true; 36];
        assert!(derive_membrane_mask(&full, 6, 6, 2).unwrap().iter().all(|&b| !b));
        assert!(derive_membrane_mask(&full, 6, 6, 0).is_err());
    }

    #[test]
    fn contiguity_is_enforced() {
        assert!(MaskPair::from_labels(vec![0, 1, 3, 0], 2, 2, 1).is_err());
        assert_eq!(MaskPair::compact(&[0, 5, 9, 5]), vec![0, 1, 2, 1]);
    }

    #[test]
    fn cells_sorted_by_centroid() {
        let labels = vec![
            0, 0, 0, 0, 0, 0, //
            0, 2, 0, 0, 1, 0, //
            0, 0, 0, 0, 0, 0, //
            0, 3, 3, 0, 0, 0,
        ];
        let masks = MaskPair::from_labels(labels, 4, 6, 1).unwrap();
        let order: Vec<u32> = cell_geometry(&masks).iter().map(|c| c.id).collect();
        assert_eq!(order, vec![2, 1, 3]);
    }

    #[test]
    fn crops_are_masked_and_centred() {
        let (h, w) = (12, 12);
        let mut labels = vec![0u32; h * w];
        labels[5 * w + 5] = 1;
        labels[5 * w + 6] = 1;
        let masks = MaskPair::from_labels(labels, h, w, 1).unwrap();
        let patch = Tensor::<f64>::full(&[3, h, w], 0.5);
        let crops = extract_cells(&patch, &masks, 6).unwrap();
        assert_eq!(crops.count, 1);
        let nuc_on = crops.nucleus.data().iter().filter(|&&v| v > 0.0).count();
        let mem_on = crops.membrane.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nuc_on, 3 * 2);
        assert_eq!(mem_on, 3 * 10);
        // nucleus pixels (5,5),(5,6) land at crop rows 3, cols 3..5
        assert_eq!(crops.nucleus.data()[3 * 6 + 3], 0.5);
        assert_eq!(crops.nucleus.data()[3 * 6 + 4], 0.5);
    }
}
