//! Drive the whole pipeline through the same entry point the CLI uses:
//! synth -> prepare -> train -> eval -> report, each mode an isolated run
//! directory full of artifacts.
//!
//! ```sh
//! cargo run --example cli_pipeline
//! ```

use std::path::Path;

use echoprompt::runner::{run, RunOptions};

fn step(config: &Path, mode: &str, run_dir: &Path, extra: &[String]) {
    println!("\n=== {mode} ===");
    let opts = RunOptions {
        config_path: Some(config.to_path_buf()),
        mode: Some(mode.to_string()),
        seed: None,
        overrides: extra.to_vec(),
        run_dir: Some(run_dir.to_path_buf()),
    };
    run(&opts).unwrap();
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    let runs = dir.path().join("runs");

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            r#"seed = 11

[model]
image_size = 32
embed_dim = 8
num_heads = [2, 2, 2, 2]
mlp_ratio = 2

[train]
epochs = 3
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
        ),
    )
    .unwrap();

    step(&config, "synth", &runs.join("synth"), &[]);
    step(&config, "prepare", &runs.join("prepare"), &[]);

    let train_dir = runs.join("train");
    step(&config, "train", &train_dir, &[]);
    let checkpoint = train_dir.join("checkpoints/model.json");

    step(
        &config,
        "eval",
        &runs.join("eval"),
        &[format!("checkpoint={:?}", checkpoint.display().to_string())],
    );

    step(
        &config,
        "report",
        &runs.join("report"),
        &[format!(
            "reports=[{{label = \"train\", path = {train:?}}}, {{label = \"eval\", path = {eval:?}}}]",
            train = train_dir.join("report.json").display().to_string(),
            eval = runs.join("eval/report.json").display().to_string(),
        )],
    );
}
