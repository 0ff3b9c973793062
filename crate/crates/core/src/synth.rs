//! Synthetic H&E-like patches with exact masks and parametric artefacts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::cellular::{dilate, MaskPair, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Global,
    Membrane,
    Nucleus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtefactLabels {
    pub staining: bool,
    pub membrane: bool,
    pub nucleus: bool,
}

impl ArtefactLabels {
    pub fn union(self, o: ArtefactLabels) -> Self {
        ArtefactLabels {
            staining: self.staining || o.staining,
            membrane: self.membrane || o.membrane,
            nucleus: self.nucleus || o.nucleus,
        }
    }

    /// Semicolon-joined names, empty when clean.
    pub fn encode(&self) -> String {
        let mut v = Vec::new();
        if self.staining {
            v.push("staining");
        }
        if self.membrane {
            v.push("membrane");
        }
        if self.nucleus {
            v.push("nucleus");
        }
        v.join(";")
    }

    pub fn decode(s: &str) -> Result<Self> {
        let mut l = ArtefactLabels::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "staining" => l.staining = true,
                "membrane" => l.membrane = true,
                "nucleus" => l.nucleus = true,
                other => return Err(Error::invalid(format!("unknown artefact label `{other}`"))),
            }
        }
        Ok(l)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub stain_gain: [f64; 3],
    pub stain_offset: [f64; 3],
    pub noise_sigma: f64,
    pub target: Target,
    pub noise_seed: u64,
}

pub const SEVERITY_WEIGHTS: [f64; 3] = [0.6, 0.25, 0.15];
const BLUR_FULL: f64 = 3.0;
const SHIFT_FULL: f64 = 0.5;
const NOISE_FULL: f64 = 0.1;
pub const STAIN_LABEL_MIN: f64 = 0.05;
pub const BLUR_LABEL_MIN: f64 = 0.5;
pub const NOISE_LABEL_MIN: f64 = 0.03;

impl DegradationSpec {
    pub fn identity() -> Self {
        DegradationSpec {
            stain_gain: [1.0; 3],
            ..Default::default()
        }
    }

    /// Euclidean norm of `(gain − 1, offset)` over the three channels.
    pub fn stain_norm(&self) -> f64 {
        (0..3)
            .map(|c| (self.stain_gain[c] - 1.0).powi(2) + self.stain_offset[c].powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn severity(&self) -> f64 {
        let [wb, ws, wn] = SEVERITY_WEIGHTS;
        (wb * (self.blur_sigma / BLUR_FULL).min(1.0)
            + ws * self.stain_norm() / SHIFT_FULL
            + wn * (self.noise_sigma / NOISE_FULL).min(1.0))
        .clamp(0.0, 1.0)
    }

    pub fn labels(&self) -> ArtefactLabels {
        let blurred = self.blur_sigma >= BLUR_LABEL_MIN;
        ArtefactLabels {
            staining: self.stain_norm() >= STAIN_LABEL_MIN,
            membrane: blurred && matches!(self.target, Target::Global | Target::Membrane),
            nucleus: (blurred && matches!(self.target, Target::Global | Target::Nucleus))
                || self.noise_sigma >= NOISE_LABEL_MIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPatch {
    pub id: String,
    /// `[3×H×W]` in `[0, 1]`
    pub image: Tensor<f64>,
    pub masks: MaskPair,
    pub s_star: f64,
    pub labels: ArtefactLabels,
}

impl SynthPatch {
    pub fn n_cells(&self) -> usize {
        self.masks.num_instances()
    }
}

const BACKGROUND: [f64; 3] = [0.92, 0.70, 0.80];
const NUCLEUS: [f64; 3] = [0.36, 0.22, 0.54];
const MEMBRANE: [f64; 3] = [0.72, 0.42, 0.62];

/// Clean patch: textured eosin background, speckled purple elliptical nuclei
/// and darker rims. Cells that cannot be placed without overlap after a
/// bounded number of attempts are dropped.
pub fn generate_clean_patch(seed: u64, h: usize, w: usize, n_cells: usize) -> Result<SynthPatch> {
    if h < 32 || w < 32 {
        return Err(Error::invalid(format!("patch {h}×{w} is smaller than 32×32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = h * w;
    let mut img = vec![0.0; 3 * hw];

    // Low-frequency stroma texture: a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.08..0.35);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.01..0.035);
            (freq * theta.cos(), freq * theta.sin(), phase, amp)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                img[c * hw + y * w + x] = BACKGROUND[c] + t * (1.0 + 0.5 * c as f64);
            }
        }
    }

    let r = DEFAULT_RADIUS as f64;
    let mut labels = vec![0u32; hw];
    let mut occupied = vec![false; hw];
    let mut placed = 0u32;
    for _ in 0..n_cells {
        for _attempt in 0..200 {
            let a = rng.random_range(2.0..3.6);
            let b = rng.random_range(1.6..3.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let margin = a + r + 1.0;
            let cy = rng.random_range(margin..h as f64 - margin);
            let cx = rng.random_range(margin..w as f64 - margin);
            let (st, ct) = theta.sin_cos();
            let inside = |y: usize, x: usize, grow: f64| {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * ct + dy * st) / (a + grow);
                let v = (-dx * st + dy * ct) / (b + grow);
                u * u + v * v <= 1.0
            };
            let pixels: Vec<usize> = (0..hw).filter(|&i| inside(i / w, i % w, 0.0)).collect();
            let halo: Vec<usize> = (0..hw).filter(|&i| inside(i / w, i % w, r + 1.0)).collect();
            if pixels.len() < 4 || halo.iter().any(|&i| occupied[i]) {
                continue;
            }
            placed += 1;
            for &i in &halo {
                occupied[i] = true;
            }
            for &i in &pixels {
                labels[i] = placed;
            }
            break;
        }
    }

    let masks = MaskPair::from_labels(labels, h, w, DEFAULT_RADIUS)?;
    // Rim: the inner half of the membrane ring, slightly jittered.
    let rim = dilate(&masks.nuc, h, w, 1);
    for i in 0..hw {
        if masks.nuc[i] {
            let speckle = rng.random_range(-0.09..0.09);
            for c in 0..3 {
                img[c * hw + i] = NUCLEUS[c] + speckle;
            }
        } else if rim[i] {
            let jitter = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                img[c * hw + i] = MEMBRANE[c] + jitter;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(SynthPatch {
        id: format!("s{seed}"),
        image: Tensor::new(&[3, h, w], img)?,
        masks,
        s_star: 1.0,
        labels: ArtefactLabels::default(),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur of each `h×w` plane, radius `ceil(3σ)`, reflect padding.
pub fn gaussian_blur(planes: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return planes.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; planes.len()];
    let mut tmp = vec![0.0; h * w];
    for (src, dst) in planes.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * src[y * w + reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Blur (globally or inside the dilated target region), then the channel
/// affine stain shift, then additive Gaussian noise, then clamping to
/// `[0, 1]`. Masks are untouched; `s_star` drops by the degradation's severity.
pub fn apply_degradation(p: &SynthPatch, d: &DegradationSpec) -> Result<SynthPatch> {
    let (h, w) = (p.masks.height, p.masks.width);
    let hw = h * w;
    if d.blur_sigma < 0.0 || d.noise_sigma < 0.0 || !d.blur_sigma.is_finite() || !d.noise_sigma.is_finite() {
        return Err(Error::invalid("blur and noise sigmas must be finite and non-negative"));
    }
    let mut img = p.image.data().to_vec();
    if d.blur_sigma > 0.0 {
        let blurred = gaussian_blur(&img, h, w, d.blur_sigma);
        let region: Option<Vec<bool>> = match d.target {
            Target::Global => None,
            Target::Membrane => Some(dilate(&p.masks.mem, h, w, 1)),
            Target::Nucleus => Some(dilate(&p.masks.nuc, h, w, 1)),
        };
        match region {
            None => img = blurred,
            Some(region) => {
                for c in 0..3 {
                    for i in 0..hw {
                        if region[i] {
                            img[c * hw + i] = blurred[c * hw + i];
                        }
                    }
                }
            }
        }
    }
    for c in 0..3 {
        for v in &mut img[c * hw..(c + 1) * hw] {
            *v = d.stain_gain[c] * *v + d.stain_offset[c];
        }
    }
    if d.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, d.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(d.noise_seed);
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SynthPatch {
        id: p.id.clone(),
        image: Tensor::new(&[3, h, w], img)?,
        masks: p.masks.clone(),
        s_star: (p.s_star - d.severity()).clamp(0.0, 1.0),
        labels: p.labels.union(d.labels()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// `(train, val, test)` counts in 70/10/20 proportion.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = (n as f64 * 0.1).round() as usize;
    (train, val, n - train - val)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub height: usize,
    pub width: usize,
    pub min_cells: usize,
    pub max_cells: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            height: 32,
            width: 32,
            min_cells: 2,
            max_cells: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub patch: SynthPatch,
    pub split: Split,
    pub spec: DegradationSpec,
}

/// Splits `total` severity across blur, stain and noise in proportion to
/// `share`, never exceeding each component's weight.
fn water_fill(total: f64, share: [f64; 3]) -> [f64; 3] {
    let cap = SEVERITY_WEIGHTS;
    let mut out = [0.0; 3];
    let mut open = [true; 3];
    let mut share = share;
    let mut left = total.min(cap.iter().sum());
    for _ in 0..3 {
        let mut mass: f64 = (0..3).filter(|&i| open[i]).map(|i| share[i]).sum();
        if left <= 1e-15 {
            break;
        }
        if mass <= 0.0 {
            (0..3).filter(|&i| open[i]).for_each(|i| share[i] = 1.0);
            mass = open.iter().filter(|&&o| o).count() as f64;
        }
        let mut spill = 0.0;
        for i in 0..3 {
            if !open[i] {
                continue;
            }
            let add = left * share[i] / mass;
            if out[i] + add >= cap[i] {
                spill += out[i] + add - cap[i];
                out[i] = cap[i];
                open[i] = false;
            } else {
                out[i] += add;
            }
        }
        left = spill;
    }
    out
}

/// Draws a degradation whose severity is `target`.
pub fn sample_spec(rng: &mut ChaCha8Rng, target: f64, noise_seed: u64) -> DegradationSpec {
    let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
    let share = [gamma.sample(rng), gamma.sample(rng), gamma.sample(rng)];
    let [sb, ss, sn] = water_fill(target, share);
    let shift = SHIFT_FULL * ss / SEVERITY_WEIGHTS[1];
    // Direction in (gain − 1, offset) space; both move the same way per channel.
    let mut dir = [0.0; 6];
    for c in 0..3 {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        dir[2 * c] = sign * rng.random_range(0.1..1.0);
        dir[2 * c + 1] = sign * rng.random_range(0.1..1.0);
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let t = rng.random_range(0.0..1.0);
    DegradationSpec {
        blur_sigma: BLUR_FULL * sb / SEVERITY_WEIGHTS[0],
        stain_gain: [0, 1, 2].map(|c| 1.0 + shift * dir[2 * c] / norm),
        stain_offset: [0, 1, 2].map(|c| shift * dir[2 * c + 1] / norm),
        noise_sigma: NOISE_FULL * sn / SEVERITY_WEIGHTS[2],
        target: if t < 0.5 {
            Target::Global
        } else if t < 0.75 {
            Target::Membrane
        } else {
            Target::Nucleus
        },
        noise_seed,
    }
}

/// `n` degraded patches with stratified severities covering `[0, 1]`,
/// assigned to train/val/test in 70/10/20 proportion.
pub fn synth_dataset(seed: u64, n: usize, opts: &SynthOptions) -> Result<Vec<SynthRecord>> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 patches, got {n}")));
    }
    if opts.min_cells > opts.max_cells {
        return Err(Error::invalid("min_cells exceeds max_cells"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "dataset", &[]));
    let mut severities: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random_range(0.0..1.0)) / n as f64).collect();
    severities.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train, val, _) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut out = Vec::with_capacity(n);
    for (i, &sev) in severities.iter().enumerate() {
        let cells = rng.random_range(opts.min_cells..=opts.max_cells);
        let clean = generate_clean_patch(seed::derive(seed, "patch", &[i as u64]), opts.height, opts.width, cells)?;
        let spec = sample_spec(&mut rng, sev, seed::derive(seed, "noise", &[i as u64]));
        let mut patch = apply_degradation(&clean, &spec)?;
        patch.id = format!("p{i:04}");
        out.push(SynthRecord {
            patch,
            split: split[i],
            spec,
        });
    }
    Ok(out)
}
