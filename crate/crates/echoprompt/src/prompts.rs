//! The four categorical prompt families, their canonical ordering, one-hot
//! encoding, validation, and derivation from manifest metadata.
//!
//! The concatenated encoding is `[nature | position | task | type]` with
//! within-block ordering fixed to the enum declaration order below. Every
//! module that touches prompt vectors goes through this one, so the ordering
//! convention lives in exactly one place.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Organ-anatomy vs tumor image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NaturePrompt {
    Organ,
    Tumor,
}

/// Anatomical location; `Indis` is the out-of-vocabulary fallback for organs
/// absent from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionPrompt {
    Breast,
    Cardiac,
    Liver,
    Thyroid,
    Head,
    Kidney,
    Appendix,
    Indis,
}

/// Selects the decoder branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskPrompt {
    Segmentation,
    Classification,
}

/// Input granularity: whole image, lesion crop, or ROI-highlighted image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypePrompt {
    Whole,
    Local,
    Location,
}

pub const NATURE_VALUES: [NaturePrompt; 2] = [NaturePrompt::Organ, NaturePrompt::Tumor];
pub const POSITION_VALUES: [PositionPrompt; 8] = [
    PositionPrompt::Breast,
    PositionPrompt::Cardiac,
    PositionPrompt::Liver,
    PositionPrompt::Thyroid,
    PositionPrompt::Head,
    PositionPrompt::Kidney,
    PositionPrompt::Appendix,
    PositionPrompt::Indis,
];
pub const TASK_VALUES: [TaskPrompt; 2] = [TaskPrompt::Segmentation, TaskPrompt::Classification];
pub const TYPE_VALUES: [TypePrompt; 3] = [TypePrompt::Whole, TypePrompt::Local, TypePrompt::Location];

/// Block layout of the concatenated one-hot vector.
pub const NATURE_OFFSET: usize = 0;
pub const POSITION_OFFSET: usize = 2;
pub const TASK_OFFSET: usize = 10;
pub const TYPE_OFFSET: usize = 12;
pub const PROMPT_DIM: usize = 15;
const BLOCKS: [(usize, usize); 4] = [
    (NATURE_OFFSET, 2),
    (POSITION_OFFSET, 8),
    (TASK_OFFSET, 2),
    (TYPE_OFFSET, 3),
];

impl NaturePrompt {
    pub fn index(self) -> usize {
        NATURE_VALUES.iter().position(|&v| v == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "organ" => Some(Self::Organ),
            "tumor" => Some(Self::Tumor),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Organ => "organ",
            Self::Tumor => "tumor",
        }
    }
}

impl PositionPrompt {
    pub fn index(self) -> usize {
        POSITION_VALUES.iter().position(|&v| v == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Self> {
        POSITION_VALUES.iter().copied().find(|p| p.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Breast => "breast",
            Self::Cardiac => "cardiac",
            Self::Liver => "liver",
            Self::Thyroid => "thyroid",
            Self::Head => "head",
            Self::Kidney => "kidney",
            Self::Appendix => "appendix",
            Self::Indis => "indis",
        }
    }
}

impl TaskPrompt {
    pub fn index(self) -> usize {
        TASK_VALUES.iter().position(|&v| v == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "segmentation" => Some(Self::Segmentation),
            "classification" => Some(Self::Classification),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Segmentation => "segmentation",
            Self::Classification => "classification",
        }
    }
}

impl TypePrompt {
    pub fn index(self) -> usize {
        TYPE_VALUES.iter().position(|&v| v == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "whole" => Some(Self::Whole),
            "local" => Some(Self::Local),
            "location" => Some(Self::Location),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Whole => "whole",
            Self::Local => "local",
            Self::Location => "location",
        }
    }
}

/// The four prompts describing one input. No wildcard or empty prompt exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub nature: NaturePrompt,
    pub position: PositionPrompt,
    pub task: TaskPrompt,
    pub input_type: TypePrompt,
}

impl PromptSet {
    pub fn new(nature: NaturePrompt, position: PositionPrompt, task: TaskPrompt, input_type: TypePrompt) -> Self {
        Self {
            nature,
            position,
            task,
            input_type,
        }
    }

    /// All 2 x 8 x 2 x 3 = 96 prompt sets, in canonical order.
    pub fn all() -> Vec<PromptSet> {
        let mut out = Vec::with_capacity(96);
        for n in NATURE_VALUES {
            for p in POSITION_VALUES {
                for t in TASK_VALUES {
                    for ty in TYPE_VALUES {
                        out.push(PromptSet::new(n, p, t, ty));
                    }
                }
            }
        }
        out
    }
}

/// Concatenated one-hot encoding of a [`PromptSet`], length 15.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    values: [f64; PROMPT_DIM],
}

impl PromptVector {
    pub fn values(&self) -> &[f64; PROMPT_DIM] {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptVectorError {
    #[error("prompt vector has length {0}, expected {PROMPT_DIM}")]
    WrongLength(usize),
    #[error("prompt vector entry {index} is {value}, expected 0 or 1")]
    NonBinaryEntry { index: usize, value: String },
    #[error("prompt vector block {0} does not sum to 1")]
    BlockSumViolation(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("manifest record {record_id} lacks {field} metadata")]
    MissingMetadata { record_id: String, field: String },
}

/// One-hot encode; deterministic and total on valid prompt sets.
pub fn encode_prompt_set(p: &PromptSet) -> PromptVector {
    let mut values = [0.0; PROMPT_DIM];
    values[NATURE_OFFSET + p.nature.index()] = 1.0;
    values[POSITION_OFFSET + p.position.index()] = 1.0;
    values[TASK_OFFSET + p.task.index()] = 1.0;
    values[TYPE_OFFSET + p.input_type.index()] = 1.0;
    PromptVector { values }
}

/// Accepts iff the vector is length 15, binary, and one-hot per block.
pub fn validate_prompt_vector(v: &[f64]) -> Result<(), PromptVectorError> {
    if v.len() != PROMPT_DIM {
        return Err(PromptVectorError::WrongLength(v.len()));
    }
    for (i, &x) in v.iter().enumerate() {
        if x != 0.0 && x != 1.0 {
            return Err(PromptVectorError::NonBinaryEntry {
                index: i,
                value: format!("{x}"),
            });
        }
    }
    for (block, (off, len)) in BLOCKS.iter().enumerate() {
        let sum: f64 = v[*off..off + len].iter().sum();
        if sum != 1.0 {
            return Err(PromptVectorError::BlockSumViolation(block));
        }
    }
    Ok(())
}

/// Per-block argmax decode; inverse of [`encode_prompt_set`] on valid vectors.
pub fn decode_prompt_vector(v: &[f64]) -> Result<PromptSet, PromptVectorError> {
    validate_prompt_vector(v)?;
    let argmax = |off: usize, len: usize| {
        v[off..off + len]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    Ok(PromptSet::new(
        NATURE_VALUES[argmax(NATURE_OFFSET, 2)],
        POSITION_VALUES[argmax(POSITION_OFFSET, 8)],
        TASK_VALUES[argmax(TASK_OFFSET, 2)],
        TYPE_VALUES[argmax(TYPE_OFFSET, 3)],
    ))
}

/// Build the prompt set for a manifest record under a given task and input
/// type. Positions outside the trained vocabulary fall back to `Indis`;
/// records lacking nature are rejected (no fallback exists for nature).
pub fn prompt_from_metadata(
    record_id: &str,
    position: &str,
    nature: &str,
    task: TaskPrompt,
    input_type: TypePrompt,
) -> Result<PromptSet, PromptError> {
    if nature.is_empty() {
        return Err(PromptError::MissingMetadata {
            record_id: record_id.to_string(),
            field: "nature".to_string(),
        });
    }
    if position.is_empty() {
        return Err(PromptError::MissingMetadata {
            record_id: record_id.to_string(),
            field: "position".to_string(),
        });
    }
    let nature = NaturePrompt::parse(nature).ok_or_else(|| PromptError::MissingMetadata {
        record_id: record_id.to_string(),
        field: format!("nature (unrecognized value {nature:?})"),
    })?;
    let position = PositionPrompt::parse(position).unwrap_or(PositionPrompt::Indis);
    Ok(PromptSet::new(nature, position, task, input_type))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_first_of_every_block() {
        let p = PromptSet::new(
            NaturePrompt::Organ,
            PositionPrompt::Breast,
            TaskPrompt::Segmentation,
            TypePrompt::Whole,
        );
        let expect = [1., 0., 1., 0., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0.];
        assert_eq!(encode_prompt_set(&p).as_slice(), expect);
    }

    #[test]
    fn encode_last_of_every_block() {
        let p = PromptSet::new(
            NaturePrompt::Tumor,
            PositionPrompt::Indis,
            TaskPrompt::Classification,
            TypePrompt::Location,
        );
        let expect = [0., 1., 0., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0., 1.];
        assert_eq!(encode_prompt_set(&p).as_slice(), expect);
    }

    #[test]
    fn encode_mixed_indices() {
        let p = PromptSet::new(
            NaturePrompt::Tumor,
            PositionPrompt::Thyroid,
            TaskPrompt::Segmentation,
            TypePrompt::Local,
        );
        let expect = [0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 1., 0.];
        assert_eq!(encode_prompt_set(&p).as_slice(), expect);
    }

    #[test]
    fn validator_accepts_valid_vector() {
        let v = [1., 0., 1., 0., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0.];
        assert_eq!(validate_prompt_vector(&v), Ok(()));
    }

    #[test]
    fn validator_rejects_double_nature() {
        let v = [1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0.];
        assert_eq!(
            validate_prompt_vector(&v),
            Err(PromptVectorError::BlockSumViolation(0))
        );
    }

    #[test]
    fn validator_rejects_wrong_length() {
        let v = vec![0.0; 14];
        assert_eq!(
            validate_prompt_vector(&v),
            Err(PromptVectorError::WrongLength(14))
        );
    }

    #[test]
    fn validator_rejects_non_binary() {
        let mut v = encode_prompt_set(&PromptSet::all()[0]).as_slice().to_vec();
        v[3] = 0.5;
        assert!(matches!(
            validate_prompt_vector(&v),
            Err(PromptVectorError::NonBinaryEntry { index: 3, .. })
        ));
    }

    #[test]
    fn roundtrip_all_96() {
        let all = PromptSet::all();
        assert_eq!(all.len(), 96);
        for p in &all {
            let v = encode_prompt_set(p);
            assert_eq!(decode_prompt_vector(v.as_slice()).unwrap(), *p);
        }
    }

    #[test]
    fn encoding_is_injective() {
        let all = PromptSet::all();
        let mut seen = std::collections::HashSet::new();
        for p in &all {
            let v: Vec<u8> = encode_prompt_set(p)
                .as_slice()
                .iter()
                .map(|&x| x as u8)
                .collect();
            assert!(seen.insert(v), "duplicate encoding for {p:?}");
        }
    }

    #[test]
    fn single_bit_flips_are_rejected() {
        for p in PromptSet::all() {
            let v = encode_prompt_set(&p);
            for i in 0..PROMPT_DIM {
                let mut flipped = *v.values();
                flipped[i] = 1.0 - flipped[i];
                assert!(
                    validate_prompt_vector(&flipped).is_err(),
                    "bit flip at {i} accepted for {p:?}"
                );
            }
        }
    }

    #[test]
    fn metadata_known_position() {
        let p = prompt_from_metadata("r1", "breast", "tumor", TaskPrompt::Segmentation, TypePrompt::Whole).unwrap();
        assert_eq!(
            p,
            PromptSet::new(
                NaturePrompt::Tumor,
                PositionPrompt::Breast,
                TaskPrompt::Segmentation,
                TypePrompt::Whole
            )
        );
    }

    #[test]
    fn metadata_unknown_position_falls_back_to_indis() {
        let p = prompt_from_metadata("r1", "lung", "organ", TaskPrompt::Classification, TypePrompt::Whole).unwrap();
        assert_eq!(p.position, PositionPrompt::Indis);
        assert_eq!(p.nature, NaturePrompt::Organ);
    }

    #[test]
    fn metadata_cardiac_is_in_vocabulary() {
        let p = prompt_from_metadata("r1", "cardiac", "organ", TaskPrompt::Segmentation, TypePrompt::Whole).unwrap();
        assert_eq!(p.position, PositionPrompt::Cardiac);
    }

    #[test]
    fn metadata_missing_nature_is_rejected() {
        let e = prompt_from_metadata("r9", "breast", "", TaskPrompt::Segmentation, TypePrompt::Whole).unwrap_err();
        assert!(matches!(e, PromptError::MissingMetadata { .. }));
    }
}
