//! Aggregate per-dataset metrics into a report, render a side-by-side
//! comparison, and export bottleneck embeddings to TSV.
//!
//! ```sh
//! cargo run --example reports_and_embeddings
//! ```

use echoprompt::data::{generate_synthetic_dataset, load_samples, SynthSpec};
use echoprompt::model::{Model, ModelConfig};
use echoprompt::prompts::TaskPrompt;
use echoprompt::reporting::{aggregate, export_embeddings, render_comparison, ReportRow};

fn main() {
    // Reports hold one value per (dataset, task) and aggregate to seg /
    // cls / total averages, each an unweighted mean over datasets.
    let baseline = aggregate(vec![
        ReportRow::new("busi", TaskPrompt::Segmentation, 71.20),
        ReportRow::new("ddti", TaskPrompt::Segmentation, 55.40),
        ReportRow::new("busi", TaskPrompt::Classification, 48.10),
    ])
    .unwrap();
    let prompted = aggregate(vec![
        ReportRow::new("busi", TaskPrompt::Segmentation, 75.59),
        ReportRow::new("ddti", TaskPrompt::Segmentation, 61.00),
        ReportRow::new("busi", TaskPrompt::Classification, 52.84),
    ])
    .unwrap();
    println!(
        "{}",
        render_comparison(&[&baseline, &prompted], &["w/o prompt", "prompt"]).unwrap()
    );

    // Embedding export: mean-pooled bottleneck features, one row per record.
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        positions: vec![("breast".to_string(), 4), ("cardiac".to_string(), 4)],
        image_size: 32,
        seed: 5,
    };
    let records = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    let samples = load_samples(&records, dir.path(), 32).unwrap();

    let model = Model::new(
        ModelConfig {
            image_size: 32,
            embed_dim: 8,
            num_heads: vec![2, 2, 2, 2],
            mlp_ratio: 2,
            ..ModelConfig::default()
        },
        5,
    )
    .unwrap();
    let out = dir.path().join("embeddings.tsv");
    let n = export_embeddings(&model, &samples, &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    println!("exported {n} embeddings; header:");
    println!("{}", text.lines().next().unwrap());
}
