//! Generate a small synthetic dataset, split it by patient, and train the
//! multi-task model for a few curriculum epochs.
//!
//! ```sh
//! cargo run --example train_synthetic
//! ```

use echoprompt::data::{
    generate_synthetic_dataset, split_by_patient, Dataset, SynthSpec,
};
use echoprompt::model::{Model, ModelConfig};
use echoprompt::training::{evaluate, train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();

    // Two tumor positions (segmentation + classification annotations) and
    // one organ position (segmentation only).
    let spec = SynthSpec {
        positions: vec![
            ("breast".to_string(), 12),
            ("thyroid".to_string(), 12),
            ("cardiac".to_string(), 12),
        ],
        image_size: 32,
        seed: 7,
    };
    let records = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    println!("generated {} records", records.len());

    // Patient-level 7:1:2 split: all images of one patient share a partition.
    let split = split_by_patient(&records, (0.7, 0.1, 0.2), 7).unwrap();
    let dataset = Dataset::from_split(&records, &split, dir.path(), 32, true).unwrap();
    println!(
        "split: {} train / {} val / {} test samples",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );

    let mut model = Model::new(
        ModelConfig {
            image_size: 32,
            embed_dim: 8,
            num_heads: vec![2, 2, 2, 2],
            mlp_ratio: 2,
            ..ModelConfig::default()
        },
        7,
    )
    .unwrap();

    // Each epoch is position-balanced and runs every segmentation batch
    // before any classification batch.
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 7,
        augment: true,
        ..TrainConfig::default()
    };
    let (history, best) = train(&mut model, &dataset, &cfg).unwrap();
    model.params = best;

    for epoch in &history.epochs {
        println!(
            "epoch {:>2}: seg loss {:?}, cls loss {:?}, val dice {:?}, val acc {:?}",
            epoch.epoch, epoch.seg_loss, epoch.cls_loss, epoch.val_dice, epoch.val_accuracy
        );
    }

    let metrics = evaluate(&model, &dataset.test).unwrap();
    println!(
        "test: dice {:?}, accuracy {:?}",
        metrics.dice, metrics.accuracy
    );
}
