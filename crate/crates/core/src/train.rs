//! Seeded training loop with early stopping and resumable state.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::loss::{loss_aggr, loss_diff, loss_reg, loss_wavelet, pairing, total_loss, LossTerms, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Every knob of a training run. Field names double as JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight of the L1 loss on the nucleus/membrane sub-score heads.
    pub aux_weight: f64,
    pub wavelet_levels: usize,
    pub channels: usize,
    pub hidden: usize,
    pub cell_dim: usize,
    pub encoder_channels: usize,
    pub crop: usize,
    pub radius: usize,
    pub mlp_hidden: usize,
    pub use_wcg: bool,
    pub use_aggr_rwkv: bool,
    pub use_cross_attention: bool,
    pub use_l_diff: bool,
    pub use_l_wavelet: bool,
    pub use_l_aggr: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let a = AdamConfig::default();
        let l = LossWeights::default();
        TrainConfig {
            seed: 0,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            lr: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            lambda1: l.lambda1,
            lambda2: l.lambda2,
            lambda3: l.lambda3,
            aux_weight: 0.25,
            wavelet_levels: 2,
            channels: m.channels,
            hidden: m.hidden,
            cell_dim: m.cell_dim,
            encoder_channels: m.encoder_channels,
            crop: m.crop,
            radius: m.radius,
            mlp_hidden: m.mlp_hidden,
            use_wcg: m.use_wcg,
            use_aggr_rwkv: m.use_aggr_rwkv,
            use_cross_attention: m.use_cross_attention,
            use_l_diff: true,
            use_l_wavelet: true,
            use_l_aggr: true,
            threshold: crate::fusion::DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            hidden: self.hidden,
            cell_dim: self.cell_dim,
            encoder_channels: self.encoder_channels,
            crop: self.crop,
            radius: self.radius,
            mlp_hidden: self.mlp_hidden,
            use_wcg: self.use_wcg,
            use_aggr_rwkv: self.use_aggr_rwkv,
            use_cross_attention: self.use_cross_attention,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss_weights().validate()?;
        if self.batch_size == 0 || (self.use_l_diff && self.batch_size < 2) {
            return Err(Error::invalid(format!(
                "batch size {} too small{}",
                self.batch_size,
                if self.use_l_diff { " for pairwise supervision" } else { "" }
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.wavelet_levels == 0 {
            return Err(Error::invalid("wavelet_levels must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub reg: f64,
    pub diff: f64,
    pub wavelet: f64,
    pub aggr: f64,
    pub aux: f64,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub best: ParamStore<f32>,
    pub best_val: f64,
    pub bad_epochs: usize,
    /// Epochs completed so far.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub stopped: bool,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(cfg.model())?;
        let params = model.init::<f32>(seed::derive(cfg.seed, "init", &[]));
        Ok(TrainState {
            adam: AdamState::new(cfg.adam(), &params),
            best: params.clone(),
            params,
            best_val: f64::INFINITY,
            bad_epochs: 0,
            epoch: 0,
            log: Vec::new(),
            stopped: false,
        })
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let meta = json!({
            "kind": "train_state",
            "config": cfg,
            "epoch": self.epoch,
            "t": self.adam.t,
            "best_val": if self.best_val.is_finite() { json!(self.best_val) } else { json!(null) },
            "bad_epochs": self.bad_epochs,
            "stopped": self.stopped,
            "log": self.log,
        });
        checkpoint::save(
            path,
            &meta,
            &[
                ("params", &self.params),
                ("best", &self.best),
                ("adam_m", &self.adam.m),
                ("adam_v", &self.adam.v),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, Self)> {
        let (meta, mut groups) = checkpoint::load::<f32>(path)?;
        let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
        if meta.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(bad("not a resumable training checkpoint"));
        }
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let mut take = |n: &str| groups.remove(n).ok_or_else(|| bad(&format!("missing group `{n}`")));
        let params = take("params")?;
        let best = take("best")?;
        let m = take("adam_m")?;
        let v = take("adam_v")?;
        let num = |k: &str| meta[k].as_u64().ok_or_else(|| bad(&format!("missing `{k}`")));
        let mut adam = AdamState::new(cfg.adam(), &params);
        adam.t = num("t")?;
        adam.m = m;
        adam.v = v;
        let state = TrainState {
            params,
            adam,
            best,
            best_val: meta["best_val"].as_f64().unwrap_or(f64::INFINITY),
            bad_epochs: num("bad_epochs")? as usize,
            epoch: num("epoch")? as usize,
            log: serde_json::from_value(meta["log"].clone())?,
            stopped: meta["stopped"].as_bool().unwrap_or(false),
        };
        Ok((cfg, state))
    }
}

/// Saves the inference weights with the architecture needed to rebuild them.
pub fn save_model(path: &Path, cfg: &TrainConfig, params: &ParamStore<f32>) -> Result<()> {
    let meta = json!({ "kind": "model", "config": cfg });
    checkpoint::save(path, &meta, &[("params", params)])
}

pub fn load_model(path: &Path) -> Result<(TrainConfig, ParamStore<f32>)> {
    let (meta, mut groups) = checkpoint::load::<f32>(path)?;
    let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
    let group = match meta.get("kind").and_then(|k| k.as_str()) {
        Some("model") => "params",
        Some("train_state") => "best",
        _ => return Err(Error::invalid(format!("{}: unrecognised checkpoint", path.display()))),
    };
    let params = groups
        .remove(group)
        .ok_or_else(|| Error::invalid(format!("{}: missing `{group}` tensors", path.display())))?;
    Ok((cfg, params))
}

/// Scalar values of one batch's terms, for logging and diagnostics.
#[derive(Clone, Copy, Debug, Default)]
struct BatchTerms {
    total: f64,
    reg: f64,
    diff: f64,
    wavelet: f64,
    aggr: f64,
    aux: f64,
}

fn value<T: Real>(g: &Graph<T>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.scalar(v).f64())
}

fn mean_of<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Option<Var>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let cat = g.concat(vars, 0)?;
    Ok(Some(g.mean(cat)?))
}

/// Builds the full objective for one batch. Returns the loss node and the
/// term values.
pub fn batch_objective<T: Real>(
    model: &Model,
    cfg: &TrainConfig,
    g: &mut Graph<T>,
    p: &crate::params::Bindings,
    batch: &[&Sample<T>],
    pair_seed: u64,
    perm_seeds: &[u64],
) -> Result<(Var, [Option<Var>; 5])> {
    let mut scores = Vec::with_capacity(batch.len());
    let mut wav = Vec::new();
    let mut aggr = Vec::new();
    let mut aux = Vec::new();
    for (s, &perm_seed) in batch.iter().zip(perm_seeds) {
        let out = model.forward(g, p, &s.input)?;
        scores.push(out.score);
        if cfg.use_l_wavelet {
            let l = loss_wavelet(g, out.image, out.reconstruction, cfg.wavelet_levels)?;
            wav.push(g.reshape(l, &[1])?);
        }
        if cfg.use_l_aggr {
            if let Some(l) = loss_aggr(g, &model.cellular, p, &out.cells, perm_seed)? {
                aggr.push(g.reshape(l, &[1])?);
            }
        }
        if cfg.aux_weight > 0.0 {
            let both = g.concat(&[out.s_nuc, out.s_mem], 1)?;
            let t = Tensor::new(
                &[1, 2],
                vec![T::c(clean(s.labels.nucleus)), T::c(clean(s.labels.membrane))],
            )?;
            let t = g.constant(t);
            let d = g.sub(both, t)?;
            let a = g.abs(d)?;
            let m = g.mean(a)?;
            aux.push(g.reshape(m, &[1])?);
        }
    }
    let targets: Vec<f64> = batch.iter().map(|s| s.s_star).collect();
    let col = g.concat(&scores, 0)?;
    let reg = loss_reg(g, col, &targets)?;
    let diff = if cfg.use_l_diff && batch.len() >= 2 {
        Some(loss_diff(g, col, &targets, &pairing(batch.len(), pair_seed))?)
    } else {
        None
    };
    let terms = LossTerms {
        reg,
        diff,
        wavelet: mean_of(g, &wav)?,
        aggr: mean_of(g, &aggr)?,
    };
    let mut total = total_loss(g, &terms, &cfg.loss_weights())?;
    let aux = mean_of(g, &aux)?;
    if let Some(a) = aux {
        let s = g.scale(a, T::c(cfg.aux_weight))?;
        total = g.add(total, s)?;
    }
    Ok((total, [Some(reg), diff, terms.wavelet, terms.aggr, aux]))
}

/// Sub-score target: 1 for an intact structure, 0 when it carries an artefact.
fn clean(artefact: bool) -> f64 {
    if artefact {
        0.0
    } else {
        1.0
    }
}

/// Mean `|s − s*|` of the model's scores over `set`.
pub fn evaluate_l1<T: Real>(model: &Model, params: &ParamStore<T>, set: &[Sample<T>]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut s = 0.0;
    for x in set {
        s += (model.predict(params, &x.input)?.s_stain - x.s_star).abs();
    }
    Ok(s / set.len() as f64)
}

fn abort(epoch: usize, batch: usize, t: &BatchTerms, cause: &Error) -> Error {
    Error::NumericalAbort {
        epoch,
        batch,
        terms: format!(
            "total={} reg={} diff={} wavelet={} aggr={} aux={} ({cause})",
            t.total, t.reg, t.diff, t.wavelet, t.aggr, t.aux
        ),
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Runs one epoch and updates `state`; `epoch` is 1-based.
fn run_epoch(
    model: &Model,
    cfg: &TrainConfig,
    state: &mut TrainState,
    train: &[Sample<f32>],
    epoch: usize,
) -> Result<BatchTerms> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "shuffle", &[epoch as u64])));
    let mut sum = BatchTerms::default();
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Sample<f32>> = chunk.iter().map(|&i| &train[i]).collect();
        let perm_seeds: Vec<u64> = chunk
            .iter()
            .map(|&i| seed::derive(cfg.seed, "permutation", &[epoch as u64, i as u64]))
            .collect();
        let pair_seed = seed::derive(cfg.seed, "pairing", &[epoch as u64, b as u64]);
        let mut g = Graph::new();
        let p = state.params.bind(&mut g);
        let (loss, parts) = batch_objective(model, cfg, &mut g, &p, &batch, pair_seed, &perm_seeds)
            .map_err(|e| if is_numeric(&e) { abort(epoch, b, &sum, &e) } else { e })?;
        let t = BatchTerms {
            total: g.scalar(loss).f64(),
            reg: value(&g, parts[0]),
            diff: value(&g, parts[1]),
            wavelet: value(&g, parts[2]),
            aggr: value(&g, parts[3]),
            aux: value(&g, parts[4]),
        };
        if !t.total.is_finite() {
            return Err(abort(epoch, b, &t, &Error::NonFinite { op: "loss" }));
        }
        g.backward(loss).map_err(|e| if is_numeric(&e) { abort(epoch, b, &t, &e) } else { e })?;
        let grads: BTreeMap<String, Tensor<f32>> = p.grads(&g);
        state
            .adam
            .step(&mut state.params, &grads)
            .map_err(|e| abort(epoch, b, &t, &e))?;
        sum.total += t.total;
        sum.reg += t.reg;
        sum.diff += t.diff;
        sum.wavelet += t.wavelet;
        sum.aggr += t.aggr;
        sum.aux += t.aux;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(BatchTerms {
        total: sum.total / n,
        reg: sum.reg / n,
        diff: sum.diff / n,
        wavelet: sum.wavelet / n,
        aggr: sum.aggr / n,
        aux: sum.aux / n,
    })
}

/// Continues `state` until `cfg.max_epochs` or early stopping. `on_epoch`
/// sees the state after every completed epoch (for checkpointing).
pub fn train_from(
    cfg: &TrainConfig,
    state: &mut TrainState,
    train: &[Sample<f32>],
    val: &[Sample<f32>],
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let model = Model::new(cfg.model())?;
    while !state.stopped && state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let terms = run_epoch(&model, cfg, state, train, epoch)?;
        let val_loss = evaluate_l1(&model, &state.params, val)
            .map_err(|e| if is_numeric(&e) { abort(epoch, usize::MAX, &terms, &e) } else { e })?;
        state.log.push(EpochLog {
            epoch,
            train_loss: terms.total,
            val_loss,
            reg: terms.reg,
            diff: terms.diff,
            wavelet: terms.wavelet,
            aggr: terms.aggr,
            aux: terms.aux,
        });
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best = state.params.clone();
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs >= cfg.patience {
                state.stopped = true;
            }
        }
        state.epoch = epoch;
        on_epoch(state)?;
    }
    Ok(())
}

/// Fresh run; returns the best-validation parameters and the epoch log.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample<f32>],
    val_set: &[Sample<f32>],
) -> Result<(ParamStore<f32>, Vec<EpochLog>)> {
    let mut state = TrainState::fresh(cfg)?;
    train_from(cfg, &mut state, train_set, val_set, |_| Ok(()))?;
    Ok((state.best, state.log))
}
