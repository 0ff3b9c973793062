//! Global difference-perception branch: wavelet-convolution groups, the
//! asymmetric multi-scale fusion, and a bidirectional WKV layer over the
//! Q-shifted token grid.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, Bindings, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::wavelet::Band;

/// Per-group `(dy, dx)` read offsets: group 0 moves content left, 1 right,
/// 2 up, 3 down. `out(y, x) = in(y + dy, x + dx)`, zero outside the grid.
const SHIFTS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

pub(crate) fn q_shift_kernel<T: Real>(x: &[T], h: usize, w: usize, d: usize, adjoint: bool) -> Vec<T> {
    let q = d / 4;
    let mut out = vec![T::zero(); x.len()];
    for (grp, &(dy, dx)) in SHIFTS.iter().enumerate() {
        let (dy, dx) = if adjoint { (-dy, -dx) } else { (dy, dx) };
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w {
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dst = (y * w + xx) * d + grp * q;
                let src = (sy as usize * w + sx as usize) * d + grp * q;
                out[dst..dst + q].copy_from_slice(&x[src..src + q]);
            }
        }
    }
    out
}

/// Quarter-channel spatial shift of tokens laid out row-major on an `h×w` grid.
pub fn q_shift<T: Real>(tokens: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != grid.0 * grid.1 || !s[1].is_multiple_of(4) {
        return Err(Error::shape("q_shift", format!("{s:?} on a {}×{} grid", grid.0, grid.1)));
    }
    Tensor::new(s, q_shift_kernel(tokens.data(), grid.0, grid.1, s[1], false))
}

fn conv_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    shape: [usize; 4],
) {
    let fan_in = shape[1] * shape[2] * shape[3];
    store.insert(format!("{name}.w"), init_uniform(rng, &shape, fan_in));
    store.insert(format!("{name}.b"), init_uniform(rng, &[shape[0]], fan_in));
}

pub(crate) fn linear_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.insert(format!("{name}.w"), init_uniform(rng, &[fan_in, fan_out], fan_in));
    if bias {
        store.insert(format!("{name}.b"), init_uniform(rng, &[fan_out], fan_in));
    }
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &Bindings,
    name: &str,
    x: Var,
    pad: (usize, usize),
    groups: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), 1, pad, groups)
}

fn band_name(b: Band) -> &'static str {
    match b {
        Band::LL => "ll",
        Band::LH => "lh",
        Band::HL => "hl",
        Band::HH => "hh",
    }
}

/// Wavelet-convolutional group: analysis → per-band depthwise 3×3 and
/// pointwise 1×1 → ReLU → synthesis, plus the input as a residual.
#[derive(Clone, Debug)]
pub struct WcgBlock {
    pub prefix: String,
    pub channels: usize,
    pub activation: bool,
}

impl WcgBlock {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        WcgBlock {
            prefix: prefix.into(),
            channels,
            activation: true,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.channels;
        for b in Band::ALL {
            let n = band_name(b);
            conv_params(store, rng, &format!("{}.{n}.dw", self.prefix), [c, 1, 3, 3]);
            conv_params(store, rng, &format!("{}.{n}.pw", self.prefix), [c, c, 1, 1]);
        }
    }

    /// `x: [N×C×H×W]`, `H, W ≥ 2`; shape is preserved.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.channels || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("wcg_block", format!("{s:?} for {} channels", self.channels)));
        }
        let (bands, pad) = g.dwt2(x)?;
        let mut mixed = bands;
        for (i, b) in Band::ALL.into_iter().enumerate() {
            let n = band_name(b);
            let dw = conv(g, p, &format!("{}.{n}.dw", self.prefix), bands[i], (1, 1), self.channels)?;
            let pw = conv(g, p, &format!("{}.{n}.pw", self.prefix), dw, (0, 0), 1)?;
            mixed[i] = if self.activation { g.relu(pw)? } else { pw };
        }
        let y = g.idwt2(mixed, pad)?;
        g.add(y, x)
    }
}

/// Spatial-domain stand-in for [`WcgBlock`]: 3×3 conv → ReLU, plus residual.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub prefix: String,
    pub channels: usize,
}

impl ConvBlock {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.channels;
        conv_params(store, rng, &format!("{}.conv", self.prefix), [c, c, 3, 3]);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = conv(g, p, &format!("{}.conv", self.prefix), x, (1, 1), 1)?;
        let y = g.relu(y)?;
        g.add(y, x)
    }
}

/// Asymmetric multi-scale fusion of two feature maps. The half-resolution
/// input is upsampled, both go through 1×3 then 3×1 convolutions with ReLU,
/// are summed, projected to `out_dim` channels, and pooled ×2.
#[derive(Clone, Debug)]
pub struct Affm {
    pub prefix: String,
    pub channels: usize,
    pub out_dim: usize,
}

impl Affm {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.channels;
        for s in ["s1", "s2"] {
            conv_params(store, rng, &format!("{}.{s}.h", self.prefix), [c, c, 1, 3]);
            conv_params(store, rng, &format!("{}.{s}.v", self.prefix), [c, c, 3, 1]);
        }
        conv_params(store, rng, &format!("{}.proj", self.prefix), [self.out_dim, c, 1, 1]);
    }

    fn branch<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, scale: &str, x: Var) -> Result<Var> {
        let h = conv(g, p, &format!("{}.{scale}.h", self.prefix), x, (0, 1), 1)?;
        let v = conv(g, p, &format!("{}.{scale}.v", self.prefix), h, (1, 0), 1)?;
        g.relu(v)
    }

    /// `y1: [N×C×H×W]`, `y2: [N×C×H/2×W/2]` → `[N×D×H/2×W/2]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, y1: Var, y2: Var) -> Result<Var> {
        let a = self.branch(g, p, "s1", y1)?;
        let up = g.upsample2(y2)?;
        let b = self.branch(g, p, "s2", up)?;
        let sum = g.add(a, b)?;
        let proj = conv(g, p, &format!("{}.proj", self.prefix), sum, (0, 0), 1)?;
        g.avg_pool2(proj)
    }
}

/// One bidirectional WKV token-mixing layer:
/// `out = (σ(X·W_r) ⊙ wkv(X·W_k, X·W_v)) · W_out`, with decay
/// `w = softplus(w_raw) ≥ 0` and self bonus `u`.
#[derive(Clone, Debug)]
pub struct BiWkvLayer {
    pub prefix: String,
    pub dim: usize,
}

pub const DECAY_INIT: f64 = 0.5;
const NORM_EPS: f64 = 1e-5;

impl BiWkvLayer {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        BiWkvLayer {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = self.dim;
        for n in ["r", "k", "v", "out"] {
            linear_params(store, rng, &format!("{}.{n}", self.prefix), d, d, false);
        }
        store.insert(format!("{}.decay", self.prefix), Tensor::full(&[d], T::c(DECAY_INIT)));
        store.insert(format!("{}.bonus", self.prefix), Tensor::zeros(&[d]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dim || s[0] == 0 {
            return Err(Error::shape("bi_wkv", format!("{s:?} for width {}", self.dim)));
        }
        let w = |n: &str| p.get(&format!("{}.{n}.w", self.prefix));
        let r = g.matmul(x, w("r")?)?;
        let k = g.matmul(x, w("k")?)?;
        let v = g.matmul(x, w("v")?)?;
        let decay = g.softplus(p.get(&format!("{}.decay", self.prefix))?)?;
        let bonus = p.get(&format!("{}.bonus", self.prefix))?;
        let mix = g.bi_wkv(k, v, decay, bonus)?;
        let gate = g.sigmoid(r)?;
        let gated = g.mul(gate, mix)?;
        g.matmul(gated, w("out")?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalConfig {
    pub channels: usize,
    pub hidden: usize,
    pub use_wcg: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalOutput {
    /// `F_Global`, `[h·w × D]`
    pub tokens: Var,
    /// Fused map before tokenisation, `[1×D×h×w]`
    pub difference: Var,
    /// Full-resolution stage-1 features, `[1×C×H×W]`
    pub y1: Var,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct GlobalStream {
    pub config: GlobalConfig,
}

enum Stage {
    Wavelet(WcgBlock),
    Spatial(ConvBlock),
}

impl Stage {
    fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        match self {
            Stage::Wavelet(b) => b.init(store, rng),
            Stage::Spatial(b) => b.init(store, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        match self {
            Stage::Wavelet(b) => b.forward(g, p, x),
            Stage::Spatial(b) => b.forward(g, p, x),
        }
    }
}

impl GlobalStream {
    pub fn new(config: GlobalConfig) -> Self {
        GlobalStream { config }
    }

    fn stage(&self, name: &str) -> Stage {
        let prefix = format!("global.{name}");
        if self.config.use_wcg {
            Stage::Wavelet(WcgBlock::new(prefix, self.config.channels))
        } else {
            Stage::Spatial(ConvBlock {
                prefix,
                channels: self.config.channels,
            })
        }
    }

    fn affm(&self) -> Affm {
        Affm {
            prefix: "global.affm".into(),
            channels: self.config.channels,
            out_dim: self.config.hidden,
        }
    }

    pub fn mixer(&self) -> BiWkvLayer {
        BiWkvLayer::new("global.wkv", self.config.hidden)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        conv_params(store, rng, "global.stem", [self.config.channels, 3, 3, 3]);
        self.stage("wcg1").init(store, rng);
        self.stage("wcg2").init(store, rng);
        self.affm().init(store, rng);
        self.mixer().init(store, rng);
        let d = self.config.hidden;
        store.insert("global.norm.gamma", Tensor::full(&[d], T::one()));
        store.insert("global.norm.beta", Tensor::zeros(&[d]));
    }

    /// `patch: [1×3×H×W]` with `H, W` divisible by 4.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, patch: Var) -> Result<GlobalOutput> {
        let s = g.shape(patch).to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "global_forward",
                format!("{s:?}: expected [1, 3, H, W] with H, W divisible by 4"),
            ));
        }
        let stem = conv(g, p, "global.stem", patch, (1, 1), 1)?;
        let y1 = self.stage("wcg1").forward(g, p, stem)?;
        let down = g.avg_pool2(y1)?;
        let y2 = self.stage("wcg2").forward(g, p, down)?;
        let difference = self.affm().forward(g, p, y1, y2)?;
        let (h, w) = (s[2] / 2, s[3] / 2);
        let d = self.config.hidden;
        let flat = g.reshape(difference, &[d, h * w])?;
        let tokens = g.transpose(flat)?;
        let normed = g.layer_norm(tokens, p.get("global.norm.gamma")?, p.get("global.norm.beta")?, T::c(NORM_EPS))?;
        let shifted = g.q_shift(normed, h, w)?;
        let tokens = self.mixer().forward(g, p, shifted)?;
        Ok(GlobalOutput {
            tokens,
            difference,
            y1,
            grid: (h, w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel statement of the shift rule.
    fn shift_oracle(x: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for y in 0..h {
            for xx in 0..w {
                for c in 0..d {
                    let src = match c / (d / 4) {
                        0 if xx + 1 < w => Some((y, xx + 1)),
                        1 if xx > 0 => Some((y, xx - 1)),
                        2 if y + 1 < h => Some((y + 1, xx)),
                        3 if y > 0 => Some((y - 1, xx)),
                        _ => None,
                    };
                    if let Some((sy, sx)) = src {
                        out[(y * w + xx) * d + c] = x[(sy * w + sx) * d + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn q_shift_single_pixel_grid_is_zero() {
        let t = Tensor::<f64>::full(&[1, 8], 3.0);
        let s = q_shift(&t, (1, 1)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q_shift_constant_interior_unchanged() {
        let t = Tensor::<f64>::full(&[9, 4], 2.0);
        let s = q_shift(&t, (3, 3)).unwrap();
        assert_eq!(&s.data()[4 * 4..5 * 4], &[2.0; 4]);
    }

    #[test]
    fn q_shift_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, d) = (4, 4, 8);
        let data: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[h * w, d], data.clone()).unwrap();
        assert_eq!(q_shift(&t, (h, w)).unwrap().data(), shift_oracle(&data, h, w, d).as_slice());
        assert!(q_shift(&t, (3, 4)).is_err());
    }

    #[test]
    fn q_shift_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (h, w, d) = (3, 5, 4);
        let x: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sx = q_shift_kernel(&x, h, w, d, false);
        let ay = q_shift_kernel(&y, h, w, d, true);
        let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn wcg_store(c: usize, fill: impl Fn(&str, &[usize]) -> Tensor<f64>) -> (WcgBlock, ParamStore<f64>) {
        let block = WcgBlock::new("b", c);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tmp = ParamStore::<f64>::new();
        block.init(&mut tmp, &mut rng);
        let mut store = ParamStore::new();
        for (k, t) in tmp.iter() {
            store.insert(k.clone(), fill(k, t.shape()));
        }
        (block, store)
    }

    fn run_block(block: &WcgBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &p, xv).unwrap();
        g.value(y).clone()
    }

    fn random_input(c: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[1, c, n, n], data).unwrap()
    }

    #[test]
    fn zero_weights_make_wcg_the_identity() {
        let (block, store) = wcg_store(3, |_, s| Tensor::zeros(s));
        let x = random_input(3, 8, 1);
        assert_eq!(run_block(&block, &store, &x), x);
    }

    #[test]
    fn identity_weights_double_the_input() {
        let c = 3;
        let (mut block, store) = wcg_store(c, |name, s| {
            let mut t = Tensor::zeros(s);
            if name.ends_with("dw.w") {
                for ch in 0..c {
                    t.data_mut()[ch * 9 + 4] = 1.0;
                }
            } else if name.ends_with("pw.w") {
                for ch in 0..c {
                    t.data_mut()[ch * c + ch] = 1.0;
                }
            }
            t
        });
        block.activation = false;
        let x = random_input(c, 8, 2);
        let y = run_block(&block, &store, &x);
        let twice = x.map(|v| 2.0 * v);
        assert!(y.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn global_shapes() {
        let gs = GlobalStream::new(GlobalConfig {
            channels: 4,
            hidden: 8,
            use_wcg: true,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        gs.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::full(&[1, 3, 16, 12], 0.5));
        let out = gs.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out.tokens), &[48, 8]);
        assert_eq!(out.grid, (8, 6));
        let bad = g.constant(Tensor::full(&[1, 3, 10, 12], 0.5));
        assert!(gs.forward(&mut g, &p, bad).is_err());
    }
}
