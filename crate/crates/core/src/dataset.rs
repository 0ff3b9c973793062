//! On-disk dataset layout: `{id}.ppm`, `{id}.mask.pgm` and `manifest.csv`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cellular::MaskPair;
use crate::error::{Error, Result};
use crate::imageio::{self, gray};
use crate::model::PatchInput;
use crate::synth::{ArtefactLabels, Split, SynthRecord};
use crate::tensor::Real;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub s_star: f64,
    pub labels: String,
    pub n_cells: usize,
}

impl ManifestRow {
    pub fn artefacts(&self) -> Result<ArtefactLabels> {
        ArtefactLabels::decode(&self.labels)
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.ppm"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mask.pgm"))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Table {
            what: path.display().to_string(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: ManifestRow = rec.map_err(|e| Error::Table {
            what: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        row.artefacts()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn encode_labels(masks: &MaskPair) -> Result<imageio::Pnm> {
    if masks.num_instances() > 255 {
        return Err(Error::invalid(format!("{} instances exceed the 8-bit mask format", masks.num_instances())));
    }
    Ok(gray(masks.width, masks.height, masks.labels.iter().map(|&l| l as u8).collect()))
}

pub fn load_masks(path: &Path, radius: usize) -> Result<MaskPair> {
    let img = imageio::read(path)?;
    if img.channels != 1 {
        return Err(Error::Parse {
            what: path.display().to_string(),
            offset: 0,
            msg: "instance mask must be a P5 image".into(),
        });
    }
    let labels: Vec<u32> = img.data.iter().map(|&v| v as u32).collect();
    MaskPair::from_labels(MaskPair::compact(&labels), img.height, img.width, radius)
}

/// Writes every record and the manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, records: &[SynthRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let p = &r.patch;
        imageio::save_image(&image_path(dir, &p.id), &p.image)?;
        imageio::write(&mask_path(dir, &p.id), &encode_labels(&p.masks)?)?;
        rows.push(ManifestRow {
            id: p.id.clone(),
            split: r.split,
            s_star: p.s_star,
            labels: p.labels.encode(),
            n_cells: p.n_cells(),
        });
    }
    let path = dir.join(MANIFEST);
    write_manifest(&path, &rows)?;
    Ok(path)
}

/// A loaded patch with its targets.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub input: PatchInput<T>,
    pub s_star: f64,
    pub labels: ArtefactLabels,
}

pub fn load_sample<T: Real>(dir: &Path, row: &ManifestRow, crop: usize, radius: usize) -> Result<Sample<T>> {
    let image = imageio::load_image::<T>(&image_path(dir, &row.id))?;
    if image.shape()[0] != 3 {
        return Err(Error::invalid(format!("{}: expected an RGB image", row.id)));
    }
    let masks = load_masks(&mask_path(dir, &row.id), radius)?;
    Ok(Sample {
        id: row.id.clone(),
        input: PatchInput::new(image, &masks, crop)?,
        s_star: row.s_star,
        labels: row.artefacts()?,
    })
}

/// Loads the rows of `split` (all rows when `None`) in manifest order.
pub fn load_split<T: Real>(
    dir: &Path,
    rows: &[ManifestRow],
    split: Option<Split>,
    crop: usize,
    radius: usize,
) -> Result<Vec<Sample<T>>> {
    rows.iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| load_sample(dir, r, crop, radius))
        .collect()
}
