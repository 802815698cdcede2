//! End-to-end runs through the config-driven runner: synth -> prepare ->
//! train -> eval -> export-embeddings -> report, plus the adapter failure
//! path against a prompt-free checkpoint.

use std::path::{Path, PathBuf};

use echoprompt::runner::{run, RunOptions};

fn opts(config: &Path, mode: &str, run_dir: &Path, extra: &[String]) -> RunOptions {
    RunOptions {
        config_path: Some(config.to_path_buf()),
        mode: Some(mode.to_string()),
        seed: None,
        overrides: extra.to_vec(),
        run_dir: Some(run_dir.to_path_buf()),
    }
}

fn write_config(dir: &Path, data_root: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"seed = 11

[model]
image_size = 32
patch_size = 4
embed_dim = 8
depths = [1, 1, 1, 1]
num_heads = [2, 2, 2, 2]
window_size = 4
mlp_ratio = 2

[train]
epochs = 2
batch_size = 4
learning_rate = 0.003
augment = false

[data]
root = "{root}"

[synth]
image_size = 32

[synth.positions]
breast = 8
cardiac = 8
"#,
        root = data_root.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_through_the_runner() {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    let config = write_config(dir.path(), &data_root);
    let runs = dir.path().join("runs");

    // synth: images, masks, and a manifest appear under the data root
    run(&opts(&config, "synth", &runs.join("synth"), &[])).unwrap();
    assert!(data_root.join("manifest.jsonl").is_file());
    assert!(data_root.join("images").is_dir());
    assert!(data_root.join("masks").is_dir());

    // prepare: split.tsv appears; pixels are never read
    run(&opts(&config, "prepare", &runs.join("prepare"), &[])).unwrap();
    assert!(data_root.join("split.tsv").is_file());

    // train: history, checkpoint, and report artifacts
    let train_dir = runs.join("train");
    run(&opts(&config, "train", &train_dir, &[])).unwrap();
    let checkpoint = train_dir.join("checkpoints/model.json");
    for artifact in ["config.echo", "history.jsonl", "report.json", "report.txt"] {
        assert!(train_dir.join(artifact).is_file(), "missing {artifact}");
    }
    assert!(checkpoint.is_file());
    let history = std::fs::read_to_string(train_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2, "one history line per epoch");

    // eval against the trained checkpoint
    let ckpt_override = format!("checkpoint={:?}", checkpoint.display().to_string());
    let eval_dir = runs.join("eval");
    run(&opts(&config, "eval", &eval_dir, &[ckpt_override.clone()])).unwrap();
    let eval_report = eval_dir.join("report.json");
    assert!(eval_report.is_file());

    // export-embeddings: one TSV row per manifest record plus a header
    let export_dir = runs.join("export");
    run(&opts(&config, "export-embeddings", &export_dir, &[ckpt_override])).unwrap();
    let tsv = std::fs::read_to_string(export_dir.join("embeddings.tsv")).unwrap();
    let manifest_lines = std::fs::read_to_string(data_root.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(tsv.lines().count(), manifest_lines + 1);
    assert!(tsv.starts_with("record_id\tdataset_id\tposition\t"));

    // report: side-by-side comparison of the train and eval reports
    let report_dir = runs.join("report");
    run(&opts(
        &config,
        "report",
        &report_dir,
        &[
            format!(
                "reports=[{{label = \"train\", path = {:?}}}, {{label = \"eval\", path = {:?}}}]",
                train_dir.join("report.json").display().to_string(),
                eval_report.display().to_string(),
            ),
        ],
    ))
    .unwrap();
    let table = std::fs::read_to_string(report_dir.join("comparison.txt")).unwrap();
    assert!(table.lines().next().unwrap().contains("train"));
    assert!(table.lines().next().unwrap().contains("eval"));
    assert!(table.contains("total average"));

    // finetune-adapter on the prompt-conditioned checkpoint succeeds and
    // records provenance
    let ft_dir = runs.join("finetune");
    run(&opts(
        &config,
        "finetune-adapter",
        &ft_dir,
        &[
            format!(
                "adapter.base_checkpoint={:?}",
                checkpoint.display().to_string()
            ),
            "adapter.epochs=1".into(),
        ],
    ))
    .unwrap();
    let ft_ckpt = std::fs::read_to_string(ft_dir.join("checkpoints/model.json")).unwrap();
    assert!(ft_ckpt.contains("base_digest"));
    assert!(ft_ckpt.contains("projection.seg.layer1.weight"));
}

#[test]
fn finetune_adapter_rejects_prompt_free_checkpoint_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    let config = write_config(dir.path(), &data_root);
    let runs = dir.path().join("runs");

    run(&opts(&config, "synth", &runs.join("synth"), &[])).unwrap();
    run(&opts(&config, "prepare", &runs.join("prepare"), &[])).unwrap();

    // train a prompt-free model; its checkpoint has no projection params
    let plain_dir = runs.join("plain");
    run(&opts(
        &config,
        "train",
        &plain_dir,
        &["model.prompt_enabled=false".into(), "train.epochs=1".into()],
    ))
    .unwrap();

    let err = run(&opts(
        &config,
        "finetune-adapter",
        &runs.join("ft-fail"),
        &[format!(
            "adapter.base_checkpoint={:?}",
            plain_dir.join("checkpoints/model.json").display().to_string()
        )],
    ))
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "unexpected error: {err}");
}

#[test]
fn zeroshot_runs_a_checkpoint_on_an_unseen_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    let config = write_config(dir.path(), &data_root);
    let runs = dir.path().join("runs");

    run(&opts(&config, "synth", &runs.join("synth"), &[])).unwrap();
    run(&opts(&config, "prepare", &runs.join("prepare"), &[])).unwrap();
    let train_dir = runs.join("train");
    run(&opts(&config, "train", &train_dir, &["train.epochs=1".into()])).unwrap();

    // a second synthetic domain the model never saw, including an
    // out-of-vocabulary position that falls back to the Indis prompt
    let other_root = dir.path().join("other");
    run(&opts(
        &config,
        "synth",
        &runs.join("synth-other"),
        &[
            format!("data.root={:?}", other_root.display().to_string()),
            "synth.positions={ spleen = 6 }".into(),
            "seed=99".into(),
        ],
    ))
    .unwrap();

    let zs_dir = runs.join("zeroshot");
    run(&opts(
        &config,
        "zeroshot",
        &zs_dir,
        &[
            format!("data.root={:?}", other_root.display().to_string()),
            format!(
                "checkpoint={:?}",
                train_dir.join("checkpoints/model.json").display().to_string()
            ),
        ],
    ))
    .unwrap();
    let report = std::fs::read_to_string(zs_dir.join("report.json")).unwrap();
    assert!(report.contains("synth_spleen"));
}
