//! Prompt-conditioned multi-task network for ultrasound imagery.
//!
//! One shared windowed-attention encoder feeds two same-depth decoder
//! branches (segmentation and classification). Four categorical prompt
//! families — nature, position, task, input type — are one-hot encoded,
//! concatenated, and injected into every decoder layer through learnable,
//! unshared affine projections. The crate also covers the surrounding
//! protocol: patient-level splits, position-balanced curriculum epochs,
//! combined dice/cross-entropy training, adapter fine-tuning of the
//! projections alone, synthetic dataset generation, and tabular reporting.
//!
//! See the `examples/` directory for a runnable walkthrough of each
//! capability, or the `echoprompt` binary for the config-driven pipeline.

pub mod adapter;
pub mod data;
pub mod graph;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod reporting;
pub mod runner;
pub mod training;
