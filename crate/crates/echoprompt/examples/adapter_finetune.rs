//! Adapt a pre-trained model to a new domain by fine-tuning only the six
//! prompt projections, and compare against zero-shot and from-scratch.
//!
//! ```sh
//! cargo run --example adapter_finetune
//! ```

use echoprompt::adapter::{
    finetune_adapter, freeze_for_adapter, train_scratch_baseline, zero_shot_eval,
};
use echoprompt::data::{
    generate_synthetic_dataset, load_samples, split_by_patient, Dataset, SynthSpec,
};
use echoprompt::model::{Model, ModelConfig};
use echoprompt::training::{evaluate, train, TrainConfig};

fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        embed_dim: 8,
        num_heads: vec![2, 2, 2, 2],
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();

    // Pre-training domains.
    let pretrain_spec = SynthSpec {
        positions: vec![("breast".to_string(), 12), ("thyroid".to_string(), 12)],
        image_size: 32,
        seed: 1,
    };
    let pre_records = generate_synthetic_dataset(&pretrain_spec, dir.path()).unwrap();
    let pretrain = Dataset::all_train(load_samples(&pre_records, dir.path(), 32).unwrap(), true);

    // A held-out domain with a position outside the vocabulary ("spleen"
    // falls back to the indiscriminate position prompt).
    let held_spec = SynthSpec {
        positions: vec![("spleen".to_string(), 10)],
        image_size: 32,
        seed: 2,
    };
    let held_records = generate_synthetic_dataset(&held_spec, dir.path()).unwrap();
    let held_split = split_by_patient(&held_records, (0.7, 0.1, 0.2), 2).unwrap();
    let held = Dataset::from_split(&held_records, &held_split, dir.path(), 32, true).unwrap();

    let quick = |epochs| TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 3,
        augment: false,
        ..TrainConfig::default()
    };

    let mut base = Model::new(toy_config(), 3).unwrap();
    train(&mut base, &pretrain, &quick(8)).unwrap();

    // Zero-shot: no parameter updates at all.
    let zs = zero_shot_eval(&base, &held.test).unwrap();
    println!("zero-shot      dice {:?} acc {:?}", zs.dice, zs.accuracy);

    // Adapter: freeze everything except the projections, then fine-tune.
    let mut adapted = Model::new(toy_config(), 0).unwrap();
    adapted.params = base.params.clone();
    let trainable = freeze_for_adapter(&mut adapted).unwrap();
    println!(
        "fine-tuning {} parameter groups ({} values of {})",
        trainable.len(),
        adapted.count_parameters().projection_only,
        adapted.count_parameters().total
    );
    finetune_adapter(&mut adapted, &held, &quick(20)).unwrap();
    let ad = evaluate(&adapted, &held.test).unwrap();
    println!("adapter        dice {:?} acc {:?}", ad.dice, ad.accuracy);

    // Scratch baseline: the whole model trained on the held-out domain only.
    let (scratch, _) = train_scratch_baseline(toy_config(), &held, &quick(20)).unwrap();
    let sc = evaluate(&scratch, &held.test).unwrap();
    println!("scratch        dice {:?} acc {:?}", sc.dice, sc.accuracy);
}
