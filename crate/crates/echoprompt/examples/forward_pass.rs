//! Run one image through the model under different prompts and inspect
//! what each branch produces.
//!
//! ```sh
//! cargo run --example forward_pass
//! ```

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use echoprompt::model::{Model, ModelConfig};
use echoprompt::prompts::{NaturePrompt, PositionPrompt, PromptSet, TaskPrompt, TypePrompt};

fn main() {
    let config = ModelConfig::default(); // 64x64 input, embed dim 24
    let model = Model::new(config, 0).unwrap();
    let counts = model.count_parameters();
    println!(
        "parameters: {} total, {} in the prompt projections",
        counts.total, counts.projection_only
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Array2::from_shape_fn((64, 64), |_| rng.gen::<f64>());

    // The task prompt selects the decoder branch: segmentation produces
    // per-pixel logits, classification a 2-class logit vector. Both runs
    // share the encoder and the bottleneck embedding.
    let seg = model
        .forward(
            &image,
            &PromptSet::new(
                NaturePrompt::Tumor,
                PositionPrompt::Breast,
                TaskPrompt::Segmentation,
                TypePrompt::Whole,
            ),
        )
        .unwrap();
    let cls = model
        .forward(
            &image,
            &PromptSet::new(
                NaturePrompt::Organ,
                PositionPrompt::Cardiac,
                TaskPrompt::Classification,
                TypePrompt::Whole,
            ),
        )
        .unwrap();

    let seg_logits = seg.seg_logits.expect("segmentation branch ran");
    println!("seg logits shape: {:?}", seg_logits.shape());
    assert!(cls.seg_logits.is_none());
    println!("cls logits: {:?}", cls.cls_logits.unwrap());
    println!(
        "bottleneck embedding dims: {}",
        seg.bottleneck_embedding.len()
    );

    // Freshly initialized projections are zero, so prompts do not yet
    // change the output: a prompt-free model is bitwise identical.
    let plain = Model::new(
        ModelConfig {
            prompt_enabled: false,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let plain_out = plain
        .forward(
            &image,
            &PromptSet::new(
                NaturePrompt::Tumor,
                PositionPrompt::Breast,
                TaskPrompt::Segmentation,
                TypePrompt::Whole,
            ),
        )
        .unwrap();
    assert_eq!(seg_logits, plain_out.seg_logits.unwrap());
    println!("zero-initialized projections match the prompt-free model bitwise");
}
