//! Per-dataset/per-task metric aggregation into comparison-table reports,
//! plus bottleneck-embedding export for external visualization.

use std::collections::BTreeSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LoadedSample;
use crate::model::{Model, ModelError, ParamCounts};
use crate::prompts::TaskPrompt;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot aggregate an empty row set")]
    EmptyRows,
    #[error("reports do not share row keys: {0}")]
    KeyMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One metric value: dice for segmentation rows, accuracy for
/// classification rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub dataset_id: String,
    pub task: TaskPrompt,
    pub value: f64,
}

impl ReportRow {
    pub fn new(dataset_id: &str, task: TaskPrompt, value: f64) -> Self {
        Self {
            dataset_id: dataset_id.to_string(),
            task,
            value,
        }
    }

    fn key(&self) -> (String, &'static str) {
        (self.dataset_id.clone(), self.task.name())
    }
}

/// Rows plus their unweighted seg/cls/total averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub seg_average: Option<f64>,
    pub cls_average: Option<f64>,
    /// Unweighted mean over all rows regardless of task.
    pub total_average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_counts: Option<ParamCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Free-form commentary (e.g. qualitative expectations not asserted).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Unweighted means per task and overall, matching the "Seg Average /
/// Cls Average / Total Average" convention.
pub fn aggregate(rows: Vec<ReportRow>) -> Result<RunReport, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptyRows);
    }
    let seg: Vec<f64> = rows
        .iter()
        .filter(|r| r.task == TaskPrompt::Segmentation)
        .map(|r| r.value)
        .collect();
    let cls: Vec<f64> = rows
        .iter()
        .filter(|r| r.task == TaskPrompt::Classification)
        .map(|r| r.value)
        .collect();
    let all: Vec<f64> = rows.iter().map(|r| r.value).collect();
    Ok(RunReport {
        seg_average: mean(&seg),
        cls_average: mean(&cls),
        total_average: mean(&all).unwrap(),
        rows,
        param_counts: None,
        config_digest: None,
        seed: None,
        notes: Vec::new(),
    })
}

/// Write one line per sample: record_id, dataset_id, position, then the
/// mean-pooled bottleneck embedding, tab-separated with a header. Returns
/// the number of rows written. Prompt-independent: only the encoder runs.
pub fn export_embeddings(
    model: &Model,
    samples: &[LoadedSample],
    path: &Path,
) -> Result<usize, ReportError> {
    let io = |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let mut dim_written: Option<usize> = None;
    for sample in samples {
        let features = model.encode(&sample.image)?;
        // bottleneck is [1, tokens, channels]; mean-pool over tokens
        let tokens = features.bottleneck.shape()[1];
        let channels = features.bottleneck.shape()[2];
        let mut embedding = vec![0.0f64; channels];
        for t in 0..tokens {
            for (c, e) in embedding.iter_mut().enumerate() {
                *e += features.bottleneck[[0, t, c]];
            }
        }
        for e in &mut embedding {
            *e /= tokens as f64;
        }
        if dim_written.is_none() {
            write!(w, "record_id\tdataset_id\tposition").map_err(io)?;
            for c in 0..channels {
                write!(w, "\te{c}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
            dim_written = Some(channels);
        }
        write!(
            w,
            "{}\t{}\t{}",
            sample.record.record_id, sample.record.dataset_id, sample.record.position
        )
        .map_err(io)?;
        for e in &embedding {
            write!(w, "\t{e:.17}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(samples.len())
}

/// Side-by-side text table: one value column per labelled report, rows per
/// (dataset, task) in stable order, aggregate rows at the bottom.
pub fn render_comparison(reports: &[&RunReport], labels: &[&str]) -> Result<String, ReportError> {
    assert_eq!(reports.len(), labels.len(), "one label per report");
    let keys: Vec<BTreeSet<(String, &'static str)>> = reports
        .iter()
        .map(|r| r.rows.iter().map(ReportRow::key).collect())
        .collect();
    for (i, k) in keys.iter().enumerate().skip(1) {
        if k != &keys[0] {
            let diff: Vec<String> = k
                .symmetric_difference(&keys[0])
                .map(|(d, t)| format!("{d}/{t}"))
                .collect();
            return Err(ReportError::KeyMismatch(format!(
                "report {:?} vs {:?}: {}",
                labels[i],
                labels[0],
                diff.join(", ")
            )));
        }
    }

    let mut lines = Vec::new();
    let width = 12usize;
    let key_width = reports[0]
        .rows
        .iter()
        .map(|r| r.dataset_id.len() + r.task.name().len() + 1)
        .chain(["total average".len()].into_iter())
        .max()
        .unwrap_or(16)
        .max(16);
    let mut header = format!("{:key_width$}", "dataset/task");
    for label in labels {
        header.push_str(&format!(" {label:>width$}"));
    }
    lines.push(header);

    let ordered: Vec<(String, &'static str)> = keys[0].iter().cloned().collect();
    for (dataset, task) in &ordered {
        let mut line = format!("{:key_width$}", format!("{dataset} {task}"));
        for report in reports {
            let v = report
                .rows
                .iter()
                .find(|r| &r.dataset_id == dataset && r.task.name() == *task)
                .map(|r| r.value)
                .unwrap();
            line.push_str(&format!(" {v:>width$.4}"));
        }
        lines.push(line);
    }
    for (name, pick) in [
        ("seg average", 0usize),
        ("cls average", 1),
        ("total average", 2),
    ] {
        let values: Vec<Option<f64>> = reports
            .iter()
            .map(|r| match pick {
                0 => r.seg_average,
                1 => r.cls_average,
                _ => Some(r.total_average),
            })
            .collect();
        if values.iter().all(Option::is_none) {
            continue;
        }
        let mut line = format!("{name:key_width$}");
        for v in values {
            match v {
                Some(v) => line.push_str(&format!(" {v:>width$.4}")),
                None => line.push_str(&format!(" {:>width$}", "-")),
            }
        }
        lines.push(line);
    }
    for report in reports {
        for note in &report.notes {
            lines.push(format!("note: {note}"));
        }
    }
    Ok(lines.join("\n") + "\n")
}
