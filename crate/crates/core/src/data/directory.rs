//! Ingestion of paired-modality image folders.
//!
//! ```text
//! root/
//!   <ordinary_dir>/<stem>.png     ordinary modality (RGB or grey)
//!   <privileged_dir>/<stem>.png   privileged modality (e.g. depth)
//!   labels.csv                    `stem,label` rows (classification), or
//!   <label_dir>/<stem>.png        per-pixel class maps (segmentation)
//! ```
//!
//! Samples are matched by file stem; anything present in only one place is
//! reported as a rejection rather than loaded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Label, PairedSample, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// CSV of `stem,label` rows, relative to the dataset root.
    File(String),
    /// Directory of per-pixel class-map images, relative to the dataset root.
    Directory(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryLayout {
    pub task_kind: TaskKind,
    pub n_classes: usize,
    pub ordinary_dir: String,
    pub privileged_dir: String,
    pub labels: LabelSource,
    #[serde(default)]
    pub ignore_label: Option<usize>,
    /// Fail instead of reporting when any stem is unmatched.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub stem: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Stems of the loaded samples, in id order.
    pub stems: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "ingestion: missing subdirectory {}",
            dir.display()
        )));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_label_file(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(stem), Some(label)) = (parts.next(), parts.next()) else {
            return Err(Error::format(path, format!("line {}: expected `stem,label`", lineno + 1)));
        };
        match label.parse::<usize>() {
            Ok(v) => {
                out.insert(stem.to_string(), v);
            }
            // header row
            Err(_) if lineno == 0 => {}
            Err(_) => {
                return Err(Error::format(path, format!("line {}: bad label {:?}", lineno + 1, label)))
            }
        }
    }
    Ok(out)
}

fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grey = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if grey {
        let buf = img.to_luma32f();
        Tensor::new(vec![1, h, w], buf.into_raw().into_iter().map(f64::from).collect())
    } else {
        let buf = img.to_rgb32f().into_raw();
        let mut data = vec![0.0; 3 * h * w];
        for (p, px) in buf.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = f64::from(px[c]);
            }
        }
        Tensor::new(vec![3, h, w], data)
    }
}

fn load_label_map(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Ok((h, w, luma.into_raw().into_iter().map(usize::from).collect()))
}

pub fn load_directory_dataset(root: &Path, layout: &DirectoryLayout) -> Result<LoadReport> {
    if !root.is_dir() {
        return Err(Error::Data(format!("ingestion: root {} does not exist", root.display())));
    }
    let ordinary = list_stems(&root.join(&layout.ordinary_dir))?;
    let privileged = list_stems(&root.join(&layout.privileged_dir))?;
    enum Labels {
        Classes(BTreeMap<String, usize>),
        Maps(BTreeMap<String, PathBuf>),
    }
    let labels = match &layout.labels {
        LabelSource::File(f) => Labels::Classes(read_label_file(&root.join(f))?),
        LabelSource::Directory(d) => Labels::Maps(list_stems(&root.join(d))?),
    };
    let has_label = |stem: &str| match &labels {
        Labels::Classes(m) => m.contains_key(stem),
        Labels::Maps(m) => m.contains_key(stem),
    };

    let all: BTreeSet<&String> = ordinary.keys().chain(privileged.keys()).collect();
    let mut rejected = Vec::new();
    let mut matched = Vec::new();
    for stem in all {
        let missing: Vec<&str> = [
            (!ordinary.contains_key(stem)).then_some("ordinary"),
            (!privileged.contains_key(stem)).then_some("privileged"),
            (!has_label(stem)).then_some("label"),
        ]
        .into_iter()
        .flatten()
        .collect();
        if missing.is_empty() {
            matched.push(stem.clone());
        } else {
            rejected.push(Rejection {
                stem: stem.clone(),
                reason: format!("missing {}", missing.join(", ")),
            });
        }
    }
    if layout.strict && !rejected.is_empty() {
        return Err(Error::Ingest {
            stems: rejected.into_iter().map(|r| r.stem).collect(),
        });
    }

    let mut samples = Vec::with_capacity(matched.len());
    for (id, stem) in matched.iter().enumerate() {
        let x_o = load_image(&ordinary[stem])?;
        let x_p = load_image(&privileged[stem])?;
        let y = match &labels {
            Labels::Classes(m) => Label::Class(m[stem]),
            Labels::Maps(m) => {
                let (height, width, classes) = load_label_map(&m[stem])?;
                Label::Map { height, width, classes }
            }
        };
        let sample = PairedSample {
            id: id as u64,
            x_o,
            x_p,
            y,
        };
        sample.validate(layout.task_kind)?;
        check_label_range(&sample, layout)?;
        samples.push(sample);
    }

    let mut warnings = Vec::new();
    if samples.is_empty() {
        let msg = format!("no paired samples found under {}", root.display());
        log::warn!("{}", msg);
        warnings.push(msg);
    }
    for r in &rejected {
        log::warn!("rejected {}: {}", r.stem, r.reason);
    }
    let mut dataset = Dataset::new(layout.task_kind, layout.n_classes, samples);
    dataset.ignore_label = layout.ignore_label;
    Ok(LoadReport {
        dataset,
        stems: matched,
        rejected,
        warnings,
    })
}

fn check_label_range(sample: &PairedSample, layout: &DirectoryLayout) -> Result<()> {
    let ok = |c: usize| c < layout.n_classes || Some(c) == layout.ignore_label;
    let bad = match &sample.y {
        Label::Class(c) => (!ok(*c)).then_some(*c),
        Label::Map { classes, .. } => classes.iter().copied().find(|&c| !ok(c)),
    };
    match bad {
        Some(c) => Err(Error::Data(format!(
            "sample {}: label {} outside 0..{}",
            sample.id, c, layout.n_classes
        ))),
        None => Ok(()),
    }
}
