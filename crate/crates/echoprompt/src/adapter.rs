//! Parameter-efficient transfer to a new dataset: freeze the whole
//! encoder-decoder, treat the six prompt projections as adapters, and
//! fine-tune only those. Zero-shot and from-scratch baselines live here too
//! so the three protocols share one comparison surface.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::data::Dataset;
use crate::model::{Model, ModelConfig, ModelError};
use crate::training::{evaluate, train, EvalMetrics, TrainConfig, TrainError, TrainHistory};

/// Default fine-tuning epoch budget for the adapter protocol.
pub const ADAPTER_EPOCHS: usize = 50;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("model has no prompt projections to fine-tune (prompt-free checkpoint)")]
    MissingProjections,
    #[error("frozen parameter {name} drifted during adapter fine-tuning (max |delta| = {delta:e})")]
    FrozenParameterDrift { name: String, delta: f64 },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The parameter-name groups marked trainable; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    names: BTreeSet<String>,
}

impl TrainableSet {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// Number of parameter groups (weights and biases counted separately).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn into_names(self) -> Vec<String> {
        self.names.into_iter().collect()
    }
}

/// Freeze everything except the `projection.*` parameters, returning the
/// exact trainable set (6 projections x {weight, bias} = 12 groups).
pub fn freeze_for_adapter(model: &mut Model) -> Result<TrainableSet, AdapterError> {
    let names: BTreeSet<String> = model
        .params
        .names()
        .filter(|n| n.starts_with("projection."))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(AdapterError::MissingProjections);
    }
    model
        .params
        .set_trainable_where(|name| name.starts_with("projection."));
    Ok(TrainableSet { names })
}

/// Default configuration for adapter fine-tuning: the pre-training recipe
/// cut down to [`ADAPTER_EPOCHS`] epochs.
pub fn adapter_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: ADAPTER_EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

/// Fine-tune the projections on a new dataset. The model must have been
/// passed through [`freeze_for_adapter`] first; after training, every frozen
/// parameter is verified bit-identical to its pre-training value.
pub fn finetune_adapter(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, AdapterError> {
    if !model
        .params
        .iter()
        .any(|(name, p)| p.trainable && name.starts_with("projection."))
    {
        return Err(AdapterError::MissingProjections);
    }
    let frozen_before: Vec<(String, crate::graph::Arr)> = model
        .params
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(name, p)| (name.to_string(), p.data.clone()))
        .collect();

    let (history, _best) = train(model, dataset, cfg)?;

    for (name, before) in &frozen_before {
        let after = model.params.get(name);
        let delta = before
            .iter()
            .zip(after.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if delta != 0.0 {
            return Err(AdapterError::FrozenParameterDrift {
                name: name.clone(),
                delta,
            });
        }
    }
    Ok(history)
}

/// Evaluate a trained model on new data with no parameter updates.
pub fn zero_shot_eval(
    model: &Model,
    samples: &[crate::data::LoadedSample],
) -> Result<EvalMetrics, AdapterError> {
    Ok(evaluate(model, samples)?)
}

/// Train a freshly initialized model (all parameters trainable) on the new
/// dataset only.
pub fn train_scratch_baseline(
    config: ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory), AdapterError> {
    let mut model = Model::new(config, cfg.seed)?;
    let (history, best) = train(&mut model, dataset, cfg)?;
    model.params = best;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{LoadedSample, ManifestRecord};

    fn toy_config(prompt_enabled: bool) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1, 1, 1],
            num_heads: vec![2, 2, 2, 2],
            window_size: 4,
            mlp_ratio: 2,
            prompt_enabled,
            ..ModelConfig::default()
        }
    }

    fn toy_sample(id: usize, position: &str, with_mask: bool, with_label: bool) -> LoadedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(id as u64);
        let image = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>());
        let mask = with_mask.then(|| {
            let mut m = Array2::<f64>::zeros((32, 32));
            m.slice_mut(ndarray::s![8..20, 8..20]).fill(1.0);
            m
        });
        LoadedSample {
            record: ManifestRecord {
                dataset_id: "toy".into(),
                record_id: format!("r{id}"),
                patient_id: format!("p{id}"),
                image_path: String::new(),
                mask_path: with_mask.then(String::new),
                class_label: with_label.then_some(id % 2),
                position: position.into(),
                nature: "tumor".into(),
                input_type: "whole".into(),
            },
            image,
            mask,
            class_label: with_label.then_some(id % 2),
        }
    }

    fn toy_dataset(position: &str) -> Dataset {
        Dataset::all_train(
            vec![
                toy_sample(0, position, true, false),
                toy_sample(1, position, false, true),
            ],
            false,
        )
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 1,
            seed: 0,
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trainable_set_is_exactly_twelve_projection_groups() {
        let mut model = Model::new(toy_config(true), 0).unwrap();
        let set = freeze_for_adapter(&mut model).unwrap();
        assert_eq!(set.len(), 12); // 3 layers x 2 branches x {weight, bias}
        assert!(set.names().all(|n| n.starts_with("projection.")));
        let trainable_count: usize = model
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.data.len())
            .sum();
        assert_eq!(trainable_count, model.count_parameters().projection_only);
    }

    #[test]
    fn prompt_free_model_cannot_be_adapted() {
        let mut model = Model::new(toy_config(false), 0).unwrap();
        assert!(matches!(
            freeze_for_adapter(&mut model),
            Err(AdapterError::MissingProjections)
        ));
        assert!(matches!(
            finetune_adapter(&mut model, &toy_dataset("breast"), &quick_config(1)),
            Err(AdapterError::MissingProjections)
        ));
    }

    #[test]
    fn frozen_parameters_never_move_and_projections_do() {
        let mut model = Model::new(toy_config(true), 0).unwrap();
        freeze_for_adapter(&mut model).unwrap();
        let before = model.params.clone();
        // 3 epochs x 2 single-sample batches = 6 optimizer steps
        finetune_adapter(&mut model, &toy_dataset("breast"), &quick_config(3)).unwrap();
        let mut projection_moved = false;
        for (name, p) in model.params.iter() {
            let b = before.get(name);
            if name.starts_with("projection.") {
                projection_moved |= &p.data != b;
            } else {
                assert_eq!(&p.data, b, "frozen parameter {name} drifted");
            }
        }
        assert!(projection_moved);
    }

    #[test]
    fn out_of_vocabulary_position_falls_back_to_indis() {
        let mut model = Model::new(toy_config(true), 0).unwrap();
        freeze_for_adapter(&mut model).unwrap();
        // "spleen" is not in the position vocabulary; the Indis prompt is used
        finetune_adapter(&mut model, &toy_dataset("spleen"), &quick_config(1)).unwrap();
    }

    #[test]
    fn zero_shot_eval_is_read_only() {
        let model = Model::new(toy_config(true), 0).unwrap();
        let before = model.params.clone();
        let samples = vec![toy_sample(0, "breast", true, true)];
        let metrics = zero_shot_eval(&model, &samples).unwrap();
        assert!(metrics.dice.is_some());
        assert!(metrics.accuracy.is_some());
        for (name, p) in model.params.iter() {
            assert_eq!(&p.data, before.get(name));
        }
    }

    #[test]
    fn scratch_baseline_trains_all_parameters() {
        let (model, history) =
            train_scratch_baseline(toy_config(true), &toy_dataset("breast"), &quick_config(1))
                .unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert!(model.params.iter().all(|(_, p)| p.trainable));
    }
}
