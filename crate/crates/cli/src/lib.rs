//! Subcommands of the `dpcqa` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dpcqa_core::dataset::{self, ManifestRow, Sample};
use dpcqa_core::fusion::{slide_score, QualityReport};
use dpcqa_core::imageio::{self, gray};
use dpcqa_core::metrics::{self, BinReport};
use dpcqa_core::model::{Model, PatchInput};
use dpcqa_core::synth::{self, Split, SynthOptions};
use dpcqa_core::train::{self, TrainConfig, TrainState};
use dpcqa_core::{Error, ParamStore};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const SLIDE_ROW: &str = "__slide__";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 4,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) => 2,
                Error::NumericalAbort { .. } | Error::NonFinite { .. } | Error::Undefined(_) => 3,
                _ => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dpcqa", version, about = "Dual-stream quality assessment for stained tissue patches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Score a directory of patches
    Score(ScoreArgs),
    /// Compare scores against manifest targets
    Eval(EvalArgs),
    /// Score-bin analysis of a downstream metric
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Patch side length in pixels
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory containing manifest.csv
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long = "cell-dim")]
    pub cell_dim: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long = "no-wcg")]
    pub no_wcg: bool,
    #[arg(long = "no-aggr-rwkv")]
    pub no_aggr_rwkv: bool,
    #[arg(long = "no-cross-attention")]
    pub no_cross_attention: bool,
    #[arg(long = "no-l-diff")]
    pub no_l_diff: bool,
    #[arg(long = "no-l-wavelet")]
    pub no_l_wavelet: bool,
    #[arg(long = "no-l-aggr")]
    pub no_l_aggr: bool,
    /// Continue from a training-state checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of `.ppm` patches with optional `.mask.pgm` instance masks
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub heatmaps: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val, test or all
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with columns patch_id,score,metric_name,metric_value
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
    write_text(&dir.join(RESOLVED_CONFIG), &(text + "\n"))
}

// ---- synth ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub min_cells: usize,
    pub max_cells: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let o = SynthOptions::default();
        SynthConfig {
            seed: 0,
            n: 200,
            height: o.height,
            width: o.width,
            min_cells: o.min_cells,
            max_cells: o.max_cells,
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let mut cfg: SynthConfig = config_or_default(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.size {
        cfg.height = s;
        cfg.width = s;
    }
    if cfg.n < 10 {
        return Err(CliError::Usage(format!("--n must be at least 10, got {}", cfg.n)));
    }
    let opts = SynthOptions {
        height: cfg.height,
        width: cfg.width,
        min_cells: cfg.min_cells,
        max_cells: cfg.max_cells,
    };
    let records = synth::synth_dataset(cfg.seed, cfg.n, &opts)?;
    let manifest = dataset::write_dataset(&a.out, &records)?;
    write_resolved(&a.out, &cfg)?;
    let mut hist = [0usize; 10];
    for r in &records {
        let sev = 1.0 - r.patch.s_star;
        hist[((sev * 10.0) as usize).min(9)] += 1;
    }
    let mut msg = format!("wrote {} patches; manifest {}\nseverity histogram:\n", records.len(), manifest.display());
    for (i, c) in hist.iter().enumerate() {
        let _ = writeln!(msg, "  [{:.1}, {:.1}{} {:>4} {}", i as f64 / 10.0, (i + 1) as f64 / 10.0, if i == 9 { "]" } else { ")" }, c, "#".repeat(*c * 40 / records.len().max(1)));
    }
    Ok(msg)
}

// ---- train ---------------------------------------------------------------

pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

fn apply_train_flags(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.cell_dim {
        cfg.cell_dim = v;
    }
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    cfg.use_wcg &= !a.no_wcg;
    cfg.use_aggr_rwkv &= !a.no_aggr_rwkv;
    cfg.use_cross_attention &= !a.no_cross_attention;
    cfg.use_l_diff &= !a.no_l_diff;
    cfg.use_l_wavelet &= !a.no_l_wavelet;
    cfg.use_l_aggr &= !a.no_l_aggr;
}

fn load_rows(data: &Path) -> CliResult<Vec<ManifestRow>> {
    Ok(dataset::read_manifest(&data.join(dataset::MANIFEST))?)
}

pub fn load_training_sets(data: &Path, cfg: &TrainConfig) -> CliResult<(Vec<Sample<f32>>, Vec<Sample<f32>>)> {
    let rows = load_rows(data)?;
    let tr = dataset::load_split(data, &rows, Some(Split::Train), cfg.crop, cfg.radius)?;
    let va = dataset::load_split(data, &rows, Some(Split::Val), cfg.crop, cfg.radius)?;
    Ok((tr, va))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let (mut cfg, resumed) = match &a.resume {
        Some(path) => {
            let (cfg, state) = TrainState::load(path)?;
            (cfg, Some(state))
        }
        None => (config_or_default::<TrainConfig>(&a.config)?, None),
    };
    apply_train_flags(&mut cfg, a);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut state = match resumed {
        Some(s) => s,
        None => TrainState::fresh(&cfg)?,
    };
    create_dir(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    let (tr, va) = load_training_sets(&a.data, &cfg)?;
    let state_path = a.out.join(STATE_FILE);
    let log_path = a.out.join(LOG_FILE);
    let quiet = a.quiet;
    let result = train::train_from(&cfg, &mut state, &tr, &va, |s| {
        if let Some(l) = s.log.last() {
            if !quiet {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {:.5}  (reg {:.4} diff {:.4} wav {:.4} aggr {:.4} aux {:.4})",
                    l.epoch, l.train_loss, l.val_loss, l.reg, l.diff, l.wavelet, l.aggr, l.aux
                );
            }
        }
        s.save(&state_path, &cfg)?;
        train::write_log(&log_path, &s.log)
    });
    result?;
    train::save_model(&a.out.join(MODEL_FILE), &cfg, &state.best)?;
    train::write_log(&log_path, &state.log)?;
    Ok(format!(
        "trained {} epochs (best val L1 {:.5}); checkpoint {}",
        state.epoch,
        state.best_val,
        a.out.join(MODEL_FILE).display()
    ))
}

// ---- score ---------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub threshold: Option<f64>,
    pub heatmaps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patch_id: String,
    pub s_stain: f64,
    pub s_nuc: f64,
    pub s_mem: f64,
    pub usable: bool,
}

struct Scored {
    report: QualityReport,
    attention: Vec<f64>,
    grid: (usize, usize),
}

fn thread_cap() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("DPCQA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(avail)
        .min(avail.max(1))
}

fn score_one(
    model: &Model,
    params: &ParamStore<f32>,
    dir: &Path,
    id: &str,
    threshold: f64,
) -> dpcqa_core::Result<Scored> {
    let image = imageio::load_image::<f32>(&dataset::image_path(dir, id))?;
    if image.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!("{id}: not an RGB image")));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mask_path = dataset::mask_path(dir, id);
    let masks = if mask_path.exists() {
        dataset::load_masks(&mask_path, model.config.radius)?
    } else {
        dpcqa_core::cellular::MaskPair::from_labels(vec![0; h * w], h, w, model.config.radius)?
    };
    let input = PatchInput::new(image, &masks, model.config.crop)?;
    let p = model.predict(params, &input)?;
    Ok(Scored {
        report: QualityReport::new(id, p.s_stain, p.s_nuc, p.s_mem, threshold)?,
        attention: p.attention,
        grid: p.grid,
    })
}

fn list_patches(dir: &Path) -> CliResult<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut ids = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".ppm") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<String> {
    let mut cfg: ScoreConfig = config_or_default(&a.config)?;
    cfg.checkpoint = a.checkpoint.clone();
    cfg.input = a.input.clone();
    cfg.heatmaps |= a.heatmaps;
    if a.threshold.is_some() {
        cfg.threshold = a.threshold;
    }
    let (tcfg, params) = train::load_model(&cfg.checkpoint)?;
    let threshold = cfg.threshold.unwrap_or(tcfg.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold {threshold} outside [0, 1]")));
    }
    cfg.threshold = Some(threshold);
    let model = Model::new(tcfg.model())?;
    let ids = list_patches(&cfg.input)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, &cfg)?;

    let threads = thread_cap().min(ids.len().max(1));
    let chunk = ids.len().div_ceil(threads).max(1);
    let results: Vec<(String, dpcqa_core::Result<Scored>)> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                let (model, params, dir) = (&model, &params, &cfg.input);
                s.spawn(move || {
                    part.iter()
                        .map(|id| (id.clone(), score_one(model, params, dir, id, threshold)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("scoring thread panicked")).collect()
    });

    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(s) => scored.push(s),
            Err(e) => {
                eprintln!("warning: skipping {id}: {e}");
                skipped.push(id);
            }
        }
    }
    if scored.is_empty() {
        return Err(CliError::Data(format!("no scorable patches in {}", cfg.input.display())));
    }
    let csv_path = a.out.join("scores.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(Error::from)?;
    for s in &scored {
        let r = &s.report;
        w.serialize(ScoreRow {
            patch_id: r.patch_id.clone(),
            s_stain: r.s_stain,
            s_nuc: r.s_nuc,
            s_mem: r.s_mem,
            usable: r.usable,
        })
        .map_err(Error::from)?;
    }
    let mean = |f: fn(&QualityReport) -> f64| slide_score(&scored.iter().map(|s| f(&s.report)).collect::<Vec<_>>());
    let slide = mean(|r| r.s_stain)?;
    w.serialize(ScoreRow {
        patch_id: SLIDE_ROW.into(),
        s_stain: slide,
        s_nuc: mean(|r| r.s_nuc)?,
        s_mem: mean(|r| r.s_mem)?,
        usable: slide >= threshold,
    })
    .map_err(Error::from)?;
    w.flush().map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?;

    if cfg.heatmaps {
        let hdir = a.out.join("heatmaps");
        create_dir(&hdir)?;
        for s in &scored {
            let (h, w) = s.grid;
            // softmax weights are ~1/N, so stretch each map to its own peak
            let peak = s.attention.iter().cloned().fold(0.0, f64::max);
            let px = s.attention.iter().map(|&v| imageio::quantize(if peak > 0.0 { v / peak } else { 0.0 })).collect();
            imageio::write(&hdir.join(format!("{}.attention.pgm", s.report.patch_id)), &gray(w, h, px))?;
        }
        imageio::write(&hdir.join("slide.pgm"), &slide_map(&scored))?;
    }
    Ok(format!(
        "scored {} patches, skipped {}; slide score {:.6}; {}",
        scored.len(),
        skipped.len(),
        slide,
        csv_path.display()
    ))
}

/// Patches tiled row-major on a near-square grid, one 8×8 block per patch.
fn slide_map(scored: &[Scored]) -> imageio::Pnm {
    const BLOCK: usize = 8;
    let n = scored.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * BLOCK, rows * BLOCK);
    let mut data = vec![0u8; w * h];
    for (i, s) in scored.iter().enumerate() {
        let v = imageio::quantize(s.report.s_stain);
        let (r, c) = (i / cols, i % cols);
        for y in 0..BLOCK {
            for x in 0..BLOCK {
                data[(r * BLOCK + y) * w + c * BLOCK + x] = v;
            }
        }
    }
    gray(w, h, data)
}

pub fn read_scores(path: &Path) -> CliResult<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let row: ScoreRow = rec.map_err(|e| {
            CliError::Core(Error::Table {
                what: path.display().to_string(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })
        })?;
        out.push(row);
    }
    Ok(out)
}

// ---- eval ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scores: PathBuf,
    pub manifest: PathBuf,
    pub split: String,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scores: PathBuf::new(),
            manifest: PathBuf::new(),
            split: "test".into(),
            threshold: dpcqa_core::fusion::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub membrane_accuracy: f64,
    pub nucleus_accuracy: f64,
    pub usability_accuracy: f64,
}

impl EvalReport {
    pub fn text(&self) -> String {
        format!(
            "split: {}\nn: {}\nPLCC: {:.4}\nSRCC: {:.4}\nmembrane artefact accuracy: {:.4}\nnucleus artefact accuracy: {:.4}\nusability accuracy: {:.4}\n",
            self.split,
            self.n,
            self.plcc,
            self.srcc,
            self.membrane_accuracy,
            self.nucleus_accuracy,
            self.usability_accuracy
        )
    }
}

pub fn evaluate(scores: &[ScoreRow], rows: &[ManifestRow], split: &str, threshold: f64) -> CliResult<EvalReport> {
    let wanted = match split {
        "all" => None,
        s => Some(Split::parse(s).map_err(|e| CliError::Usage(e.to_string()))?),
    };
    let by_id: BTreeMap<&str, &ScoreRow> = scores
        .iter()
        .filter(|r| r.patch_id != SLIDE_ROW)
        .map(|r| (r.patch_id.as_str(), r))
        .collect();
    let mut pred = Vec::new();
    let mut target = Vec::new();
    let (mut mem_ok, mut nuc_ok, mut use_ok) = (0usize, 0usize, 0usize);
    for row in rows.iter().filter(|r| wanted.is_none_or(|s| r.split == s)) {
        let Some(s) = by_id.get(row.id.as_str()) else {
            continue;
        };
        let labels = row.artefacts()?;
        pred.push(s.s_stain);
        target.push(row.s_star);
        mem_ok += usize::from((s.s_mem < 0.5) == labels.membrane);
        nuc_ok += usize::from((s.s_nuc < 0.5) == labels.nucleus);
        use_ok += usize::from((s.s_stain >= threshold) == (row.s_star >= threshold));
    }
    let n = pred.len();
    if n < 3 {
        return Err(CliError::Data(format!("only {n} scored patches match the `{split}` split; need 3")));
    }
    Ok(EvalReport {
        split: split.to_string(),
        n,
        plcc: metrics::plcc(&pred, &target)?,
        srcc: metrics::srcc(&pred, &target)?,
        membrane_accuracy: mem_ok as f64 / n as f64,
        nucleus_accuracy: nuc_ok as f64 / n as f64,
        usability_accuracy: use_ok as f64 / n as f64,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<(EvalReport, String)> {
    let mut cfg: EvalConfig = config_or_default(&a.config)?;
    cfg.scores = a.scores.clone();
    cfg.manifest = a.manifest.clone();
    if let Some(s) = &a.split {
        cfg.split = s.clone();
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let scores = read_scores(&cfg.scores)?;
    let rows = dataset::read_manifest(&cfg.manifest)?;
    let report = evaluate(&scores, &rows, &cfg.split, cfg.threshold)?;
    let text = report.text();
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_resolved(out, &cfg)?;
        write_text(&out.join("eval.txt"), &text)?;
        let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        write_text(&out.join("eval.json"), &(json + "\n"))?;
    }
    Ok((report, text))
}

// ---- analyze -------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub input: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedRow {
    pub patch_id: String,
    pub score: f64,
    pub metric_name: String,
    pub metric_value: f64,
}

pub fn read_paired(path: &Path) -> CliResult<Vec<PairedRow>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = r.headers().map_err(Error::from)?.clone();
    let want = ["patch_id", "score", "metric_name", "metric_value"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(CliError::Core(Error::Table {
            what: path.display().to_string(),
            line: 1,
            msg: format!("expected header {}", want.join(",")),
        }));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: PairedRow = rec.map_err(|e| {
            CliError::Core(Error::Table {
                what: path.display().to_string(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

pub fn analysis_table(reports: &[(String, BinReport)]) -> (String, String) {
    let mut csv = String::from("metric,n,rho,p,G1,G2,G3,G4,kw_h,kw_p\n");
    let mut text = format!(
        "{:<20} {:>5} {:>8} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "metric", "n", "rho", "p", "G1", "G2", "G3", "G4", "KW H", "KW p"
    );
    for (name, r) in reports {
        let med: Vec<String> = r.bins.iter().map(|b| fmt_opt(b.median)).collect();
        let (h, p) = r.kruskal_wallis.map_or((None, None), |k| (Some(k.h), Some(k.p)));
        let _ = writeln!(
            csv,
            "{name},{},{:.6},{:.6e},{},{},{},{},{},{}",
            r.n,
            r.rho,
            r.rho_p,
            med[0],
            med[1],
            med[2],
            med[3],
            fmt_opt(h),
            p.map_or("NA".into(), |p| format!("{p:.6e}"))
        );
        let _ = writeln!(
            text,
            "{:<20} {:>5} {:>8.4} {:>10.3e} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
            name,
            r.n,
            r.rho,
            r.rho_p,
            med[0],
            med[1],
            med[2],
            med[3],
            fmt_opt(h),
            p.map_or("NA".into(), |p| format!("{p:.3e}"))
        );
        for w in &r.warnings {
            let _ = writeln!(text, "  warning ({name}): {w}");
        }
    }
    text.push_str("bins: G1 [0,0.2)  G2 [0.2,0.4)  G3 [0.4,0.6)  G4 [0.6,1.0]\n");
    (csv, text)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> CliResult<(Vec<(String, BinReport)>, String)> {
    let mut cfg: AnalyzeConfig = config_or_default(&a.config)?;
    cfg.input = a.input.clone();
    let rows = read_paired(&cfg.input)?;
    let mut by_metric: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = by_metric.entry(r.metric_name.clone()).or_default();
        e.0.push(r.score);
        e.1.push(r.metric_value);
    }
    if by_metric.is_empty() {
        return Err(CliError::Data(format!("{}: no rows", cfg.input.display())));
    }
    let mut reports = Vec::new();
    for (name, (s, m)) in by_metric {
        let rep = metrics::bin_group_analysis(&s, &m)
            .map_err(|e| CliError::Data(format!("metric `{name}`: {e}")))?;
        reports.push((name, rep));
    }
    let (csv, text) = analysis_table(&reports);
    create_dir(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    write_text(&a.out.join("analysis.csv"), &csv)?;
    write_text(&a.out.join("analysis.txt"), &text)?;
    Ok((reports, text))
}

/// Parses `args` and runs the chosen subcommand, returning the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a).map(|(_, t)| t),
        Command::Analyze(a) => cmd_analyze(a).map(|(_, t)| t),
    };
    match result {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
