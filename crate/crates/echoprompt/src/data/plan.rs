//! Position-balanced oversampling and the per-epoch curriculum plan.
//!
//! Every epoch first rebalances the training pool so each anatomical
//! position contributes the same number of samples, then emits every
//! segmentation batch before any classification batch. A record carrying
//! both a mask and a class label appears in both blocks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, SampleRef};
use crate::prompts::TaskPrompt;

/// One homogeneous batch: every record trains the same branch.
#[derive(Debug, Clone)]
pub struct PlanBatch {
    pub task: TaskPrompt,
    pub records: Vec<SampleRef>,
}

/// Ordered batches for one epoch (segmentation block, then classification).
#[derive(Debug, Clone, Default)]
pub struct EpochPlan {
    pub batches: Vec<PlanBatch>,
}

impl EpochPlan {
    pub fn seg_batches(&self) -> usize {
        self.batches
            .iter()
            .filter(|b| b.task == TaskPrompt::Segmentation)
            .count()
    }

    pub fn cls_batches(&self) -> usize {
        self.batches.len() - self.seg_batches()
    }
}

/// Oversample each position group up to the largest group's size by drawing
/// extra members uniformly (with replacement across rounds) from that group.
/// After balancing, every position key maps to exactly `max` items.
pub fn balance_by_position<T: Clone>(
    items: &[T],
    key: impl Fn(&T) -> &str,
    seed: u64,
) -> Result<Vec<T>, DataError> {
    if items.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut groups: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for item in items {
        groups.entry(key(item)).or_default().push(item);
    }
    let max = groups.values().map(Vec::len).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(max * groups.len());
    for group in groups.values() {
        for item in group.iter() {
            out.push((*item).clone());
        }
        for _ in group.len()..max {
            let pick = rng.gen_range(0..group.len());
            out.push(group[pick].clone());
        }
    }
    Ok(out)
}

/// Chunk the pool into shuffled fixed-size batches with every segmentation
/// batch ahead of every classification batch. Records lacking the relevant
/// annotation are skipped for that block; a trailing short batch is kept.
pub fn build_epoch_plan(refs: &[SampleRef], batch_size: usize, seed: u64) -> EpochPlan {
    let batch_size = batch_size.max(1);
    let mut plan = EpochPlan::default();
    for (task, offset) in [
        (TaskPrompt::Segmentation, 0u64),
        (TaskPrompt::Classification, 1u64),
    ] {
        let mut pool: Vec<SampleRef> = refs
            .iter()
            .filter(|r| match task {
                TaskPrompt::Segmentation => r.has_mask,
                TaskPrompt::Classification => r.has_label,
            })
            .cloned()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset));
        pool.shuffle(&mut rng);
        for chunk in pool.chunks(batch_size) {
            plan.batches.push(PlanBatch {
                task,
                records: chunk.to_vec(),
            });
        }
    }
    plan
}
