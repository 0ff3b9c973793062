//! The full dual-stream network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cellular::{extract_cells, CellCrops, CellEmbeddings, CellularConfig, CellularStream, MaskPair};
use crate::error::{Error, Result};
use crate::fusion::{cross_attention, gated_fusion, init_fusion, mean_fusion, regress_score, sub_score};
use crate::global::{GlobalConfig, GlobalStream};
use crate::params::{init_uniform, Bindings, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the wavelet stages.
    pub channels: usize,
    /// Token width `D`; must be divisible by 4.
    pub hidden: usize,
    /// Cell embedding width `D_c`.
    pub cell_dim: usize,
    pub encoder_channels: usize,
    pub crop: usize,
    pub radius: usize,
    pub mlp_hidden: usize,
    pub use_wcg: bool,
    pub use_aggr_rwkv: bool,
    pub use_cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            hidden: 256,
            cell_dim: 64,
            encoder_channels: 8,
            crop: crate::cellular::DEFAULT_CROP,
            radius: crate::cellular::DEFAULT_RADIUS,
            mlp_hidden: 128,
            use_wcg: true,
            use_aggr_rwkv: true,
            use_cross_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("cell_dim", self.cell_dim),
            ("encoder_channels", self.encoder_channels),
            ("crop", self.crop),
            ("radius", self.radius),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((n, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{n} must be positive")));
        }
        if !self.hidden.is_multiple_of(4) {
            return Err(Error::invalid(format!("hidden = {} is not divisible by 4", self.hidden)));
        }
        Ok(())
    }
}

/// A patch with its precomputed cell crops.
#[derive(Clone, Debug)]
pub struct PatchInput<T> {
    /// `[3×H×W]` in `[0, 1]`
    pub image: Tensor<T>,
    pub crops: CellCrops<T>,
}

impl<T: Real> PatchInput<T> {
    pub fn new(image: Tensor<T>, masks: &MaskPair, crop: usize) -> Result<Self> {
        let crops = extract_cells(&image, masks, crop)?;
        Ok(PatchInput { image, crops })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `S_stain`, `[1×1]`
    pub score: Var,
    pub s_nuc: Var,
    pub s_mem: Var,
    /// Attention over global tokens, `[1×N_tok]`
    pub attention: Var,
    pub grid: (usize, usize),
    /// Auxiliary reconstruction `Î`, `[1×3×H×W]`
    pub reconstruction: Var,
    /// Input image as a graph constant, `[1×3×H×W]`
    pub image: Var,
    pub cells: CellEmbeddings,
    pub f_cellular: Var,
    pub f_global: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub global: GlobalStream,
    pub cellular: CellularStream,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let global = GlobalStream::new(GlobalConfig {
            channels: config.channels,
            hidden: config.hidden,
            use_wcg: config.use_wcg,
        });
        let cellular = CellularStream::new(CellularConfig {
            crop: config.crop,
            encoder_channels: config.encoder_channels,
            cell_dim: config.cell_dim,
            hidden: config.hidden,
            use_aggr_rwkv: config.use_aggr_rwkv,
        });
        Ok(Model {
            config,
            global,
            cellular,
        })
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &self.config;
        self.global.init(&mut store, &mut rng);
        self.cellular.init(&mut store, &mut rng);
        init_fusion(&mut store, &mut rng, c.hidden, c.mlp_hidden, c.cell_dim, c.use_cross_attention);
        store.insert("recon.w", init_uniform(&mut rng, &[3, c.channels, 1, 1], c.channels));
        store.insert("recon.b", init_uniform(&mut rng, &[3], c.channels));
        store
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, input: &PatchInput<T>) -> Result<ModelOutput> {
        let s = input.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("model", format!("image {s:?}")));
        }
        let image = g.constant(input.image.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let glob = self.global.forward(g, p, image)?;
        let (cells, f_cellular) = self.cellular.forward(g, p, &input.crops)?;
        let (f_fusion, attention) = if self.config.use_cross_attention {
            cross_attention(g, p, f_cellular, glob.tokens)?
        } else {
            mean_fusion(g, p, glob.tokens)?
        };
        let fused = gated_fusion(g, p, f_fusion, f_cellular)?;
        let score = regress_score(g, p, fused)?;
        let d_c = self.config.cell_dim;
        let s_nuc = sub_score(g, p, "nuc", cells.nucleus, d_c)?;
        let s_mem = sub_score(g, p, "mem", cells.membrane, d_c)?;
        let reconstruction = g.conv2d(glob.y1, p.get("recon.w")?, Some(p.get("recon.b")?), 1, (0, 0), 1)?;
        Ok(ModelOutput {
            score,
            s_nuc,
            s_mem,
            attention,
            grid: glob.grid,
            reconstruction,
            image,
            cells,
            f_cellular,
            f_global: glob.tokens,
        })
    }

    /// Inference-only forward returning `(s_stain, s_nuc, s_mem, attention)`.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, input: &PatchInput<T>) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, input)?;
        Ok(Prediction {
            s_stain: g.scalar(out.score).f64(),
            s_nuc: g.scalar(out.s_nuc).f64(),
            s_mem: g.scalar(out.s_mem).f64(),
            attention: g.value(out.attention).data().iter().map(|v| v.f64()).collect(),
            grid: out.grid,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub s_stain: f64,
    pub s_nuc: f64,
    pub s_mem: f64,
    pub attention: Vec<f64>,
    pub grid: (usize, usize),
}
