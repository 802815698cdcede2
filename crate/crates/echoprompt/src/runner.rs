//! Config-driven pipeline runner behind the CLI: one declarative config
//! file, one mode per invocation, all artifacts under a run directory named
//! by config digest + seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    adapter_train_config, finetune_adapter, freeze_for_adapter, train_scratch_baseline,
    AdapterError,
};
use crate::data::{
    derive_all_variants, generate_synthetic_dataset, load_samples, read_manifest, read_split,
    split_by_patient, write_manifest, write_split, DataError, Dataset, LoadedSample, SynthSpec,
};
use crate::model::{
    load_checkpoint, save_checkpoint, sha256_hex, CheckpointError, Model, ModelConfig, ModelError,
    Provenance,
};
use crate::prompts::TaskPrompt;
use crate::reporting::{
    aggregate, export_embeddings, render_comparison, ReportError, ReportRow, RunReport,
};
use crate::training::{evaluate, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RunnerError {
    /// Exit status contract: 1 config, 2 data/artifact, 3 training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 1,
            RunnerError::Model(ModelError::InvalidConfig(_)) => 1,
            RunnerError::Train(TrainError::InvalidConfig(_)) => 1,
            RunnerError::Data(_)
            | RunnerError::Checkpoint(_)
            | RunnerError::Model(_)
            | RunnerError::Report(_)
            | RunnerError::Io { .. } => 2,
            RunnerError::Adapter(AdapterError::MissingProjections) => 2,
            RunnerError::Adapter(_) | RunnerError::Train(_) => 3,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
    Zeroshot,
    FinetuneAdapter,
    Scratch,
    Synth,
    Prepare,
    ExportEmbeddings,
    Report,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Zeroshot => "zeroshot",
            Mode::FinetuneAdapter => "finetune-adapter",
            Mode::Scratch => "scratch",
            Mode::Synth => "synth",
            Mode::Prepare => "prepare",
            Mode::ExportEmbeddings => "export-embeddings",
            Mode::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Mode::Train,
            Mode::Eval,
            Mode::Zeroshot,
            Mode::FinetuneAdapter,
            Mode::Scratch,
            Mode::Synth,
            Mode::Prepare,
            Mode::ExportEmbeddings,
            Mode::Report,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root; manifest/split/image paths are relative to it.
    #[serde(default = "default_root")]
    pub root: String,
    #[serde(default = "default_manifest")]
    pub manifest: String,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    /// Oversample training positions to the max position count per epoch.
    #[serde(default = "default_true")]
    pub balance: bool,
    /// Expand records into whole/local/location variants during `synth`.
    #[serde(default)]
    pub derive_variants: bool,
    #[serde(default = "default_margin")]
    pub local_margin: f64,
    #[serde(default = "default_brightness")]
    pub brightness: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: "data".into(),
            manifest: default_manifest(),
            split: default_split(),
            ratios: default_ratios(),
            balance: true,
            derive_variants: false,
            local_margin: default_margin(),
            brightness: default_brightness(),
        }
    }
}

fn default_root() -> String {
    "data".into()
}
fn default_manifest() -> String {
    "manifest.jsonl".into()
}
fn default_split() -> String {
    "split.tsv".into()
}
fn default_ratios() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}
fn default_true() -> bool {
    true
}
fn default_margin() -> f64 {
    crate::data::DEFAULT_LOCAL_MARGIN
}
fn default_brightness() -> f64 {
    crate::data::DEFAULT_BRIGHTNESS_FACTOR
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// position name -> record count
    #[serde(default)]
    pub positions: BTreeMap<String, usize>,
    #[serde(default = "default_synth_size")]
    pub image_size: usize,
}

fn default_synth_size() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    /// Pre-trained checkpoint whose projections get fine-tuned.
    #[serde(default)]
    pub base_checkpoint: Option<String>,
    #[serde(default = "default_adapter_epochs")]
    pub epochs: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            base_checkpoint: None,
            epochs: default_adapter_epochs(),
        }
    }
}

fn default_adapter_epochs() -> usize {
    crate::adapter::ADAPTER_EPOCHS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportInput {
    pub label: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    /// Checkpoint for eval / zeroshot / export-embeddings.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Inputs for `report` mode.
    #[serde(default)]
    pub reports: Vec<ReportInput>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            synth: SynthSection::default(),
            adapter: AdapterSection::default(),
            checkpoint: None,
            reports: Vec::new(),
        }
    }
}

/// What the CLI hands over after flag parsing.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_path: Option<PathBuf>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    /// `key.path=value` pairs applied over the config file.
    pub overrides: Vec<String>,
    pub run_dir: Option<PathBuf>,
}

/// Parse the config file, apply `--set` overrides, then `--mode`/`--seed`.
pub fn resolve_config(opts: &RunOptions) -> Result<RunConfig, RunnerError> {
    let mut value: toml::Value = match &opts.config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            text.parse()
                .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for entry in &opts.overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| RunnerError::Config(format!("--set {entry:?}: expected KEY=VALUE")))?;
        apply_override(&mut value, key, raw)?;
    }
    if let Some(mode) = &opts.mode {
        apply_override(&mut value, "mode", mode)?;
    }
    if let Some(seed) = opts.seed {
        apply_override(&mut value, "seed", &seed.to_string())?;
    }
    value
        .try_into()
        .map_err(|e| RunnerError::Config(e.to_string()))
}

/// Set a dotted key path; the value is parsed as TOML when possible, else
/// kept as a string (so `--set mode=train` and `--set train.epochs=5` both
/// work).
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), RunnerError> {
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| RunnerError::Config(format!("{key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("key paths are non-empty")
}

/// Run directory: explicit, or `runs/<config digest prefix>-seed<seed>`.
pub fn run_dir_for(config: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    let canonical = toml::to_string(config).expect("config serializes");
    let digest = sha256_hex(canonical.as_bytes());
    PathBuf::from("runs").join(format!("{}-seed{}", &digest[..12], config.seed))
}

/// Holds `<run_dir>/.lock` for the lifetime of the run; concurrent
/// invocations against the same directory fail fast.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, RunnerError> {
        std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunnerError::Config(
                format!("run directory {} is locked by another invocation", run_dir.display()),
            )),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Entry point behind the CLI: resolve config, lock the run directory, echo
/// the resolved config, dispatch the mode. Artifacts land in the run dir.
pub fn run(opts: &RunOptions) -> Result<PathBuf, RunnerError> {
    let config = resolve_config(opts)?;
    let mode = config
        .mode
        .ok_or_else(|| RunnerError::Config("no mode given (config `mode` or --mode)".into()))?;
    config.model.validate()?;
    config.train.validate()?;

    let run_dir = run_dir_for(&config, opts.run_dir.as_deref());
    let _lock = RunLock::acquire(&run_dir)?;

    let echo = toml::to_string_pretty(&config).expect("config serializes");
    let echo_path = run_dir.join("config.echo");
    std::fs::write(&echo_path, &echo).map_err(|e| io_err(&echo_path, e))?;
    println!("# run dir: {}", run_dir.display());
    println!("# mode: {}", mode.name());
    print!("{echo}");

    match mode {
        Mode::Synth => mode_synth(&config)?,
        Mode::Prepare => mode_prepare(&config)?,
        Mode::Train | Mode::Scratch => mode_train(&config, &run_dir, mode)?,
        Mode::Eval => mode_eval(&config, &run_dir)?,
        Mode::Zeroshot => mode_zeroshot(&config, &run_dir)?,
        Mode::FinetuneAdapter => mode_finetune(&config, &run_dir)?,
        Mode::ExportEmbeddings => mode_export(&config, &run_dir)?,
        Mode::Report => mode_report(&config, &run_dir)?,
    }
    Ok(run_dir)
}

fn data_root(config: &RunConfig) -> PathBuf {
    PathBuf::from(&config.data.root)
}

fn manifest_path(config: &RunConfig) -> PathBuf {
    data_root(config).join(&config.data.manifest)
}

fn split_path(config: &RunConfig) -> PathBuf {
    data_root(config).join(&config.data.split)
}

fn mode_synth(config: &RunConfig) -> Result<(), RunnerError> {
    if config.synth.positions.is_empty() {
        return Err(RunnerError::Config(
            "synth mode needs [synth] positions".into(),
        ));
    }
    let spec = SynthSpec {
        positions: config
            .synth
            .positions
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect(),
        image_size: config.synth.image_size,
        seed: config.seed,
    };
    let root = data_root(config);
    let mut records = generate_synthetic_dataset(&spec, &root)?;
    if config.data.derive_variants {
        let (expanded, warnings) = derive_all_variants(
            &records,
            &root,
            config.data.local_margin,
            config.data.brightness,
        )?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        records = expanded;
    }
    write_manifest(&manifest_path(config), &records)?;
    println!("# wrote {} records to {}", records.len(), manifest_path(config).display());
    Ok(())
}

fn mode_prepare(config: &RunConfig) -> Result<(), RunnerError> {
    // manifest and split only; never touches image pixels
    let records = read_manifest(&manifest_path(config))?;
    let r = config.data.ratios;
    let split = split_by_patient(&records, (r[0], r[1], r[2]), config.seed)?;
    write_split(&split_path(config), &split)?;
    println!("# wrote split for {} records to {}", split.len(), split_path(config).display());
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<Dataset, RunnerError> {
    let records = read_manifest(&manifest_path(config))?;
    let split = read_split(&split_path(config))?;
    Ok(Dataset::from_split(
        &records,
        &split,
        &data_root(config),
        config.model.image_size,
        config.data.balance,
    )?)
}

/// Dice/accuracy rows per dataset_id over one sample list.
fn metric_rows(model: &Model, samples: &[LoadedSample]) -> Result<Vec<ReportRow>, RunnerError> {
    let mut by_dataset: BTreeMap<&str, Vec<LoadedSample>> = BTreeMap::new();
    for s in samples {
        by_dataset
            .entry(&s.record.dataset_id)
            .or_default()
            .push(s.clone());
    }
    let mut rows = Vec::new();
    for (dataset, group) in &by_dataset {
        let metrics = evaluate(model, group)?;
        if let Some(d) = metrics.dice {
            rows.push(ReportRow::new(dataset, TaskPrompt::Segmentation, d));
        }
        if let Some(a) = metrics.accuracy {
            rows.push(ReportRow::new(dataset, TaskPrompt::Classification, a));
        }
    }
    Ok(rows)
}

fn write_report(
    run_dir: &Path,
    label: &str,
    mut report: RunReport,
    model: &Model,
    config: &RunConfig,
) -> Result<(), RunnerError> {
    report.param_counts = Some(model.count_parameters());
    report.seed = Some(config.seed);
    let canonical = toml::to_string(config).expect("config serializes");
    report.config_digest = Some(sha256_hex(canonical.as_bytes()));

    let json_path = run_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RunnerError::Config(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;

    let text = render_comparison(&[&report], &[label])?;
    let text_path = run_dir.join("report.txt");
    std::fs::write(&text_path, &text).map_err(|e| io_err(&text_path, e))?;
    print!("{text}");
    Ok(())
}

fn write_history(
    run_dir: &Path,
    history: &crate::training::TrainHistory,
) -> Result<(), RunnerError> {
    let path = run_dir.join("history.jsonl");
    let mut out = String::new();
    for epoch in &history.epochs {
        out.push_str(&serde_json::to_string(epoch).map_err(|e| RunnerError::Config(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| io_err(&path, e))
}

fn mode_train(config: &RunConfig, run_dir: &Path, mode: Mode) -> Result<(), RunnerError> {
    let dataset = load_dataset(config)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    train_cfg.prompt_enabled = config.model.prompt_enabled;

    let (model, history) = if mode == Mode::Scratch {
        train_scratch_baseline(config.model.clone(), &dataset, &train_cfg)?
    } else {
        let mut model = Model::new(config.model.clone(), config.seed)?;
        let (history, best) = train(&mut model, &dataset, &train_cfg)?;
        model.params = best;
        (model, history)
    };
    write_history(run_dir, &history)?;
    save_checkpoint(&model, &run_dir.join("checkpoints/model.json"), None)?;

    let eval_set = if dataset.test.is_empty() {
        &dataset.train
    } else {
        &dataset.test
    };
    let report = aggregate(metric_rows(&model, eval_set)?)?;
    write_report(run_dir, mode.name(), report, &model, config)
}

fn required_checkpoint<'a>(source: &'a Option<String>, what: &str) -> Result<&'a str, RunnerError> {
    source
        .as_deref()
        .ok_or_else(|| RunnerError::Config(format!("{what} mode needs `checkpoint` in the config")))
}

fn mode_eval(config: &RunConfig, run_dir: &Path) -> Result<(), RunnerError> {
    let path = required_checkpoint(&config.checkpoint, "eval")?;
    let (model, _meta) = load_checkpoint(Path::new(path))?;
    let records = read_manifest(&manifest_path(config))?;
    let split = read_split(&split_path(config))?;
    let dataset = Dataset::from_split(
        &records,
        &split,
        &data_root(config),
        model.config.image_size,
        false,
    )?;
    let report = aggregate(metric_rows(&model, &dataset.test)?)?;
    write_report(run_dir, "eval", report, &model, config)
}

fn mode_zeroshot(config: &RunConfig, run_dir: &Path) -> Result<(), RunnerError> {
    let path = required_checkpoint(&config.checkpoint, "zeroshot")?;
    let (model, _meta) = load_checkpoint(Path::new(path))?;
    let records = read_manifest(&manifest_path(config))?;
    let samples = load_samples(&records, &data_root(config), model.config.image_size)?;
    let report = aggregate(metric_rows(&model, &samples)?)?;
    write_report(run_dir, "zeroshot", report, &model, config)
}

fn mode_finetune(config: &RunConfig, run_dir: &Path) -> Result<(), RunnerError> {
    let base = config
        .adapter
        .base_checkpoint
        .as_deref()
        .or(config.checkpoint.as_deref())
        .ok_or_else(|| {
            RunnerError::Config(
                "finetune-adapter mode needs [adapter] base_checkpoint".into(),
            )
        })?;
    let (mut model, meta) = load_checkpoint(Path::new(base))?;
    let trainable = freeze_for_adapter(&mut model)?;

    let dataset = {
        let records = read_manifest(&manifest_path(config))?;
        let split = read_split(&split_path(config))?;
        Dataset::from_split(
            &records,
            &split,
            &data_root(config),
            model.config.image_size,
            config.data.balance,
        )?
    };
    let mut cfg = adapter_train_config(config.seed);
    cfg.epochs = config.adapter.epochs;
    cfg.learning_rate = config.train.learning_rate;
    cfg.batch_size = config.train.batch_size;
    cfg.augment = config.train.augment;
    let history = finetune_adapter(&mut model, &dataset, &cfg)?;
    write_history(run_dir, &history)?;
    save_checkpoint(
        &model,
        &run_dir.join("checkpoints/model.json"),
        Some(Provenance {
            base_digest: meta.digest,
            trainable: trainable.into_names(),
        }),
    )?;

    let eval_set = if dataset.test.is_empty() {
        &dataset.train
    } else {
        &dataset.test
    };
    let report = aggregate(metric_rows(&model, eval_set)?)?;
    write_report(run_dir, "adapter", report, &model, config)
}

fn mode_export(config: &RunConfig, run_dir: &Path) -> Result<(), RunnerError> {
    let path = required_checkpoint(&config.checkpoint, "export-embeddings")?;
    let (model, _meta) = load_checkpoint(Path::new(path))?;
    let records = read_manifest(&manifest_path(config))?;
    let samples = load_samples(&records, &data_root(config), model.config.image_size)?;
    let out = run_dir.join("embeddings.tsv");
    let n = export_embeddings(&model, &samples, &out)?;
    println!("# wrote {n} embeddings to {}", out.display());
    Ok(())
}

fn mode_report(config: &RunConfig, run_dir: &Path) -> Result<(), RunnerError> {
    if config.reports.is_empty() {
        return Err(RunnerError::Config("report mode needs [[reports]] entries".into()));
    }
    let mut loaded = Vec::new();
    for input in &config.reports {
        let path = Path::new(&input.path);
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let report: RunReport =
            serde_json::from_str(&text).map_err(|e| RunnerError::Config(format!("{}: {e}", input.path)))?;
        loaded.push(report);
    }
    let refs: Vec<&RunReport> = loaded.iter().collect();
    let labels: Vec<&str> = config.reports.iter().map(|r| r.label.as_str()).collect();
    let table = render_comparison(&refs, &labels)?;
    let out = run_dir.join("comparison.txt");
    std::fs::write(&out, &table).map_err(|e| io_err(&out, e))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let opts = RunOptions {
            overrides: vec![
                "train.epochs=5".into(),
                "model.image_size=32".into(),
                "data.balance=false".into(),
                "mode=prepare".into(),
            ],
            ..Default::default()
        };
        let config = resolve_config(&opts).unwrap();
        assert_eq!(config.train.epochs, 5);
        assert_eq!(config.model.image_size, 32);
        assert!(!config.data.balance);
        assert_eq!(config.mode, Some(Mode::Prepare));
    }

    #[test]
    fn mode_and_seed_flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "mode = \"train\"\nseed = 1\n").unwrap();
        let opts = RunOptions {
            config_path: Some(path),
            mode: Some("synth".into()),
            seed: Some(9),
            ..Default::default()
        };
        let config = resolve_config(&opts).unwrap();
        assert_eq!(config.mode, Some(Mode::Synth));
        assert_eq!(config.seed, 9);
    }

    #[test]
    fn bad_override_and_unknown_field_are_config_errors() {
        let opts = RunOptions {
            overrides: vec!["no_equals_sign".into()],
            ..Default::default()
        };
        assert!(matches!(resolve_config(&opts), Err(RunnerError::Config(_))));

        let opts = RunOptions {
            overrides: vec!["data.not_a_field=1".into()],
            ..Default::default()
        };
        let err = resolve_config(&opts).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn run_dir_derives_from_digest_and_seed() {
        let mut config = RunConfig::default();
        config.seed = 3;
        let a = run_dir_for(&config, None);
        assert!(a.to_string_lossy().ends_with("-seed3"));
        assert_eq!(a, run_dir_for(&config, None));
        config.train.epochs = 1;
        assert_ne!(a, run_dir_for(&config, None));
        let explicit = PathBuf::from("elsewhere");
        assert_eq!(run_dir_for(&config, Some(&explicit)), explicit);
    }

    #[test]
    fn lock_excludes_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let second = RunLock::acquire(dir.path());
        assert!(matches!(second, Err(RunnerError::Config(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn missing_mode_is_a_config_error() {
        let opts = RunOptions::default();
        let err = run(&opts).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(RunnerError::Config("x".into()).exit_code(), 1);
        assert_eq!(RunnerError::Data(DataError::EmptyDataset).exit_code(), 2);
        assert_eq!(
            RunnerError::Adapter(AdapterError::MissingProjections).exit_code(),
            2
        );
        assert_eq!(
            RunnerError::Train(TrainError::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                task: "segmentation".into(),
                record: "r".into()
            })
            .exit_code(),
            3
        );
    }

    #[test]
    fn all_mode_names_roundtrip() {
        for name in [
            "train",
            "eval",
            "zeroshot",
            "finetune-adapter",
            "scratch",
            "synth",
            "prepare",
            "export-embeddings",
            "report",
        ] {
            assert_eq!(Mode::parse(name).unwrap().name(), name);
        }
        assert!(Mode::parse("bogus").is_none());
    }
}
