//! Manifest schema, patient-level splitting, balanced curriculum epochs,
//! input-type variants, augmentation, and the synthetic dataset generator.

mod imgops;
mod plan;
mod split;
mod synth;

pub use imgops::{
    augment, augment_sample, augment_with, crop_with_margin, enhance_roi, load_image_png,
    load_mask_png, local_crop_bounds, save_image_png, save_mask_png, AugmentParams,
    DEFAULT_BRIGHTNESS_FACTOR, DEFAULT_LOCAL_MARGIN,
};
pub use plan::{balance_by_position, build_epoch_plan, EpochPlan, PlanBatch};
pub use split::{read_split, split_by_patient, write_split, Partition, SplitAssignment};
pub use synth::{class_from_eccentricity, generate_synthetic_dataset, rasterize_ellipse, SynthSpec};

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{prompt_from_metadata, PromptError, PromptSet, TaskPrompt, TypePrompt};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("manifest parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record_id {0}")]
    DuplicateRecord(String),
    #[error("record {0} has neither mask_path nor class_label")]
    MissingAnnotation(String),
    #[error("record {record}: {message}")]
    BadRecord { record: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One annotated image. `position` and `nature` are stored as free text so
/// out-of-vocabulary organs survive ingestion and can fall back to the
/// `indis` prompt at training time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestRecord {
    pub dataset_id: String,
    pub record_id: String,
    pub patient_id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<usize>,
    pub position: String,
    pub nature: String,
    pub input_type: String,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.mask_path.is_none() && self.class_label.is_none() {
            return Err(DataError::MissingAnnotation(self.record_id.clone()));
        }
        if let Some(l) = self.class_label {
            if l > 1 {
                return Err(DataError::BadRecord {
                    record: self.record_id.clone(),
                    message: format!("class_label {l} out of range"),
                });
            }
        }
        if TypePrompt::parse(&self.input_type).is_none() {
            return Err(DataError::BadRecord {
                record: self.record_id.clone(),
                message: format!("unknown input_type {:?}", self.input_type),
            });
        }
        Ok(())
    }

    pub fn input_type(&self) -> TypePrompt {
        TypePrompt::parse(&self.input_type).unwrap_or(TypePrompt::Whole)
    }
}

/// Read a line-delimited JSON manifest, checking record invariants.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        if !seen.insert(record.record_id.clone()) {
            return Err(DataError::DuplicateRecord(record.record_id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Expand every record into its input-type variants, writing derived image
/// files next to the originals under `root`. Returns the expanded manifest
/// plus warnings for degenerate (empty) masks.
pub fn derive_all_variants(
    records: &[ManifestRecord],
    root: &Path,
    margin: f64,
    brightness: f64,
) -> Result<(Vec<ManifestRecord>, Vec<String>), DataError> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for r in records {
        let (mut variants, mut warns) = imgops::derive_input_variants(r, root, margin, brightness)?;
        out.append(&mut variants);
        warnings.append(&mut warns);
    }
    Ok((out, warnings))
}

/// A record with its pixels in memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub record: ManifestRecord,
    /// `[image_size, image_size]`, values in [0, 1].
    pub image: Array2<f64>,
    /// Binary, same shape as `image`.
    pub mask: Option<Array2<f64>>,
    pub class_label: Option<usize>,
}

impl LoadedSample {
    /// Prompt set for this sample under the given task.
    pub fn prompt(&self, task: TaskPrompt) -> Result<PromptSet, PromptError> {
        prompt_from_metadata(
            &self.record.record_id,
            &self.record.position,
            &self.record.nature,
            task,
            self.record.input_type(),
        )
    }
}

/// Reference to one training sample, with the fields sampling needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub index: usize,
    pub record_id: String,
    pub position: String,
    pub has_mask: bool,
    pub has_label: bool,
}

/// Load records into memory, resizing to `image_size`.
pub fn load_samples(
    records: &[ManifestRecord],
    root: &Path,
    image_size: usize,
) -> Result<Vec<LoadedSample>, DataError> {
    records
        .iter()
        .map(|r| {
            let image = load_image_png(&root.join(&r.image_path), image_size)?;
            let mask = match &r.mask_path {
                Some(p) => Some(load_mask_png(&root.join(p), image_size)?),
                None => None,
            };
            Ok(LoadedSample {
                record: r.clone(),
                image,
                mask,
                class_label: r.class_label,
            })
        })
        .collect()
}

/// In-memory train/val/test splits plus the sampling policy.
pub struct Dataset {
    pub train: Vec<LoadedSample>,
    pub val: Vec<LoadedSample>,
    pub test: Vec<LoadedSample>,
    /// Oversample training positions to the max position count per epoch.
    pub balance: bool,
}

impl Dataset {
    pub fn from_split(
        records: &[ManifestRecord],
        split: &SplitAssignment,
        root: &Path,
        image_size: usize,
        balance: bool,
    ) -> Result<Self, DataError> {
        let mut by_part: [Vec<ManifestRecord>; 3] = Default::default();
        for r in records {
            let part = split.partition_of(&r.record_id).ok_or_else(|| DataError::BadRecord {
                record: r.record_id.clone(),
                message: "record missing from split".into(),
            })?;
            by_part[part as usize].push(r.clone());
        }
        Ok(Self {
            train: load_samples(&by_part[Partition::Train as usize], root, image_size)?,
            val: load_samples(&by_part[Partition::Val as usize], root, image_size)?,
            test: load_samples(&by_part[Partition::Test as usize], root, image_size)?,
            balance,
        })
    }

    /// All training samples in one partition (fine-tuning on a dedicated set).
    pub fn all_train(samples: Vec<LoadedSample>, balance: bool) -> Self {
        Self {
            train: samples,
            val: Vec::new(),
            test: Vec::new(),
            balance,
        }
    }

    pub fn sample(&self, r: &SampleRef) -> &LoadedSample {
        &self.train[r.index]
    }

    pub fn train_refs(&self) -> Vec<SampleRef> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, s)| SampleRef {
                index: i,
                record_id: s.record.record_id.clone(),
                position: s.record.position.clone(),
                has_mask: s.mask.is_some(),
                has_label: s.class_label.is_some(),
            })
            .collect()
    }

    /// Balanced, curriculum-ordered batches for one epoch.
    pub fn epoch_plan(&self, batch_size: usize, seed: u64) -> Result<EpochPlan, DataError> {
        let refs = self.train_refs();
        let refs = if self.balance {
            balance_by_position(&refs, |r| r.position.as_str(), seed)?
        } else {
            refs
        };
        Ok(build_epoch_plan(&refs, batch_size, seed.wrapping_add(0x5eed)))
    }
}
