//! Encoder / dual-decoder network with prompt injection.
//!
//! One windowed-attention encoder feeds two decoder branches of equal depth:
//! the segmentation branch upsamples with encoder skip connections, the
//! classification branch stays at bottleneck resolution. Before each of the
//! three decoder layers the concatenated one-hot prompt vector is passed
//! through that layer's own affine projection and added to every token:
//! `x' = x + fc[layer][branch](prompt)`. The six projections share nothing.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, sha256_hex, CheckpointError, CheckpointMeta, Provenance,
};

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Arr, TensorId};
use crate::nn::{
    patch_extract_map, patch_expand_map, patch_merge_map, pixel_logits_map, Block, LayerNorm,
    Linear, ParamStore, Session,
};
use crate::prompts::{
    encode_prompt_set, validate_prompt_vector, PromptSet, PromptVector, PromptVectorError,
    TaskPrompt, PROMPT_DIM,
};

/// Branch selector for prompt injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Seg,
    Cls,
}

impl Branch {
    fn name(self) -> &'static str {
        match self {
            Branch::Seg => "seg",
            Branch::Cls => "cls",
        }
    }
}

pub const NUM_DECODER_LAYERS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_num_heads")]
    pub num_heads: Vec<usize>,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default = "default_decoder_layers")]
    pub num_decoder_layers: usize,
    #[serde(default = "default_two")]
    pub num_seg_classes: usize,
    #[serde(default = "default_two")]
    pub num_cls_classes: usize,
    #[serde(default = "default_prompt_dim")]
    pub prompt_dim: usize,
    #[serde(default = "default_true")]
    pub prompt_enabled: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_image_size() -> usize {
    64
}
fn default_patch_size() -> usize {
    4
}
fn default_embed_dim() -> usize {
    24
}
fn default_depths() -> Vec<usize> {
    vec![1, 1, 1, 1]
}
fn default_num_heads() -> Vec<usize> {
    vec![2, 2, 4, 4]
}
fn default_window_size() -> usize {
    4
}
fn default_decoder_layers() -> usize {
    NUM_DECODER_LAYERS
}
fn default_two() -> usize {
    2
}
fn default_prompt_dim() -> usize {
    PROMPT_DIM
}
fn default_true() -> bool {
    true
}
fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    /// Desk-scale default: small enough to overfit a synthetic set in minutes.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            embed_dim: 24,
            depths: vec![1, 1, 1, 1],
            num_heads: vec![2, 2, 4, 4],
            window_size: 4,
            num_decoder_layers: NUM_DECODER_LAYERS,
            num_seg_classes: 2,
            num_cls_classes: 2,
            prompt_dim: PROMPT_DIM,
            prompt_enabled: true,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token-grid side at encoder stage `s`.
    pub fn stage_side(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    /// Channel count at encoder stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Attention window at a given grid side, clamped so attention never
    /// spans more tokens than the grid holds.
    pub fn window_at(&self, side: usize) -> usize {
        self.window_size.min(side)
    }

    /// Working channel dim of decoder layer `i` (1-based), both branches.
    pub fn decoder_dim(&self, i: usize) -> usize {
        self.embed_dim << (NUM_DECODER_LAYERS - i)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_decoder_layers != NUM_DECODER_LAYERS {
            return err(format!(
                "num_decoder_layers must be {NUM_DECODER_LAYERS}, got {}",
                self.num_decoder_layers
            ));
        }
        if self.num_stages() != NUM_DECODER_LAYERS + 1 {
            return err(format!(
                "expected {} encoder stages (decoder layers + 1), got {}",
                NUM_DECODER_LAYERS + 1,
                self.num_stages()
            ));
        }
        if self.num_heads.len() != self.num_stages() {
            return err("num_heads length must match depths length".into());
        }
        let denom = self.patch_size << (self.num_stages() - 1);
        if self.image_size == 0 || self.image_size % denom != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size * 2^(stages-1) = {denom}",
                self.image_size
            ));
        }
        for s in 0..self.num_stages() {
            let side = self.stage_side(s);
            let win = self.window_at(side);
            if win == 0 || side % win != 0 {
                return err(format!(
                    "window {win} does not divide token grid side {side} at stage {s}"
                ));
            }
            if self.stage_dim(s) % self.num_heads[s] != 0 {
                return err(format!(
                    "num_heads[{s}] = {} does not divide stage dim {}",
                    self.num_heads[s],
                    self.stage_dim(s)
                ));
            }
        }
        if self.prompt_dim != PROMPT_DIM {
            return err(format!("prompt_dim must be {PROMPT_DIM}"));
        }
        if self.embed_dim % 2 != 0 {
            return err("embed_dim must be even".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid prompt vector: {0}")]
    InvalidPrompt(#[from] PromptVectorError),
}

/// Per-stage token grids plus the coarsest-resolution bottleneck.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    /// One `[B, side^2, dim]` grid per encoder stage.
    pub stage_features: Vec<ArrayD<f64>>,
    /// Last stage's output, `[B, side^2, dim]`.
    pub bottleneck: ArrayD<f64>,
}

/// Output of one forward dispatch. Exactly one of the two logit fields is
/// present, selected by the task prompt.
pub struct ForwardOutput {
    /// `[num_seg_classes, H, W]`
    pub seg_logits: Option<Array3<f64>>,
    /// `[num_cls_classes]`
    pub cls_logits: Option<Array1<f64>>,
    /// Mean-pooled bottleneck tokens.
    pub bottleneck_embedding: Array1<f64>,
}

/// Parameter counts, split so the prompt path's cost is visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub projection_only: usize,
}

struct StageLayout {
    blocks: Vec<Block>,
    merge: Option<(LayerNorm, Linear)>,
}

struct SegLayerLayout {
    expand: Linear,
    fuse: Linear,
    block: Block,
}

struct ClsLayerLayout {
    reduce: Linear,
    block: Block,
}

struct Layout {
    patch_proj: Linear,
    patch_norm: LayerNorm,
    stages: Vec<StageLayout>,
    seg_layers: Vec<SegLayerLayout>,
    seg_head_norm: LayerNorm,
    seg_head: Linear,
    cls_layers: Vec<ClsLayerLayout>,
    cls_head_norm: LayerNorm,
    cls_head: Linear,
    /// `[layer][branch]`, present iff prompts are enabled.
    projections: Vec<[Option<Linear>; 2]>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn build_layout(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layout {
    let c = config.embed_dim;
    let p2 = config.patch_size * config.patch_size;

    macro_rules! linear {
        ($prefix:expr, $i:expr, $o:expr) => {
            Linear::init(store, rng, $prefix, $i, $o)
        };
    }
    macro_rules! norm {
        ($prefix:expr, $d:expr) => {
            LayerNorm::init(store, $prefix, $d)
        };
    }
    macro_rules! block {
        ($prefix:expr, $d:expr, $h:expr) => {
            Block::init(store, rng, $prefix, $d, $h, config.mlp_ratio)
        };
    }

    let patch_proj = linear!("encoder.patch_embed.proj", p2, c);
    let patch_norm = norm!("encoder.patch_embed.norm", c);

    let mut stages = Vec::new();
    for s in 0..config.num_stages() {
        let dim = config.stage_dim(s);
        let heads = config.num_heads[s];
        let mut blocks = Vec::new();
        for l in 0..config.depths[s] {
            blocks.push(block!(&format!("encoder.stage{s}.layer{l}"), dim, heads));
        }
        let merge = if s + 1 < config.num_stages() {
            let n = norm!(&format!("encoder.stage{s}.merge.norm"), 4 * dim);
            let r = linear!(&format!("encoder.stage{s}.merge.reduce"), 4 * dim, 2 * dim);
            Some((n, r))
        } else {
            None
        };
        stages.push(StageLayout { blocks, merge });
    }

    // segmentation branch: expand, fuse the skip, transformer block
    let mut seg_layers = Vec::new();
    for i in 1..=NUM_DECODER_LAYERS {
        let dim = config.decoder_dim(i); // working dim after expansion
        let in_dim = 2 * dim; // dim before expansion
        let heads = config.num_heads[NUM_DECODER_LAYERS - i];
        seg_layers.push(SegLayerLayout {
            expand: linear!(&format!("decoder.seg.layer{i}.expand"), in_dim, 2 * in_dim),
            fuse: linear!(&format!("decoder.seg.layer{i}.fuse"), 2 * dim, dim),
            block: block!(&format!("decoder.seg.layer{i}.block"), dim, heads),
        });
    }
    let seg_head_norm = norm!("decoder.seg.head.norm", c);
    let seg_head = linear!("decoder.seg.head.proj", c, p2 * config.num_seg_classes);

    // classification branch: channel reduction, transformer block, no upsampling
    let mut cls_layers = Vec::new();
    for i in 1..=NUM_DECODER_LAYERS {
        let dim = config.decoder_dim(i);
        let heads = config.num_heads[NUM_DECODER_LAYERS - i];
        cls_layers.push(ClsLayerLayout {
            reduce: linear!(&format!("decoder.cls.layer{i}.reduce"), 2 * dim, dim),
            block: block!(&format!("decoder.cls.layer{i}.block"), dim, heads),
        });
    }
    let cls_head_norm = norm!("decoder.cls.head.norm", c);
    let cls_head = linear!("decoder.cls.head.proj", c, config.num_cls_classes);

    // six unshared prompt projections, zero-initialized so the prompt path
    // starts as an exact no-op
    let mut projections = Vec::new();
    for i in 1..=NUM_DECODER_LAYERS {
        let dim = config.decoder_dim(i);
        let mut pair: [Option<Linear>; 2] = [None, None];
        if config.prompt_enabled {
            for (slot, branch) in [Branch::Seg, Branch::Cls].into_iter().enumerate() {
                let prefix = format!("projection.{}.layer{i}", branch.name());
                pair[slot] = Some(Linear::init_zero(store, &prefix, config.prompt_dim, dim));
            }
        }
        projections.push(pair);
    }

    Layout {
        patch_proj,
        patch_norm,
        stages,
        seg_layers,
        seg_head_norm,
        seg_head,
        cls_layers,
        cls_head_norm,
        cls_head,
        projections,
    }
}

impl Model {
    /// Fresh model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = build_layout(&config, &mut store, &mut rng);
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Rebuild a model around an existing parameter store (checkpoint load).
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let mut probe = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = build_layout(&config, &mut probe, &mut rng);
        for name in probe.names() {
            if !store.contains(name) {
                return Err(ModelError::DimensionMismatch(format!(
                    "checkpoint lacks parameter {name}"
                )));
            }
            if store.get(name).shape() != probe.get(name).shape() {
                return Err(ModelError::DimensionMismatch(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.get(name).shape(),
                    probe.get(name).shape()
                )));
            }
        }
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Exact parameter counts; `projection_only` covers the six prompt maps.
    pub fn count_parameters(&self) -> ParamCounts {
        let total = self.params.total_len();
        let projection_only = self
            .params
            .iter()
            .filter(|(name, _)| name.starts_with("projection."))
            .map(|(_, p)| p.data.len())
            .sum();
        ParamCounts {
            total,
            projection_only,
        }
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<(), ModelError> {
        let n = self.config.image_size;
        if shape.len() != 3 || shape[1] != n || shape[2] != n {
            return Err(ModelError::ShapeMismatch {
                expected: format!("[batch, {n}, {n}]"),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Graph: encoder over an image batch node `[B, H, W]`.
    pub fn build_encoder(&self, s: &mut Session, images: TensorId) -> (Vec<TensorId>, TensorId) {
        let cfg = &self.config;
        let shape = s.tape.data(images).shape().to_vec();
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let p = cfg.patch_size;

        let map = patch_extract_map(b, h, w, p);
        let n0 = (h / p) * (w / p);
        let x = s.tape.gather(images, &[b, n0, p * p], map);
        let x = self.layout.patch_proj.forward(s, x);
        let mut x = self.layout.patch_norm.forward(s, x);

        let mut stage_outs = Vec::new();
        for (si, stage) in self.layout.stages.iter().enumerate() {
            let side = cfg.stage_side(si);
            let win = cfg.window_at(side);
            for block in &stage.blocks {
                x = block.forward(s, x, side, win);
            }
            stage_outs.push(x);
            if let Some((norm, reduce)) = &stage.merge {
                let dim = cfg.stage_dim(si);
                let map = patch_merge_map(b, side, dim);
                let half = side / 2;
                let merged = s.tape.gather(x, &[b, half * half, 4 * dim], map);
                let merged = norm.forward(s, merged);
                x = reduce.forward(s, merged);
            }
        }
        let bottleneck = *stage_outs.last().unwrap();
        (stage_outs, bottleneck)
    }

    fn projection(&self, i: usize, branch: Branch) -> Option<&Linear> {
        let slot = match branch {
            Branch::Seg => 0,
            Branch::Cls => 1,
        };
        self.layout.projections[i - 1][slot].as_ref()
    }

    /// Graph: `x + fc[i][branch](v)` with the projected vector added to every
    /// token of the matching batch element. No-op when prompts are disabled.
    pub fn build_inject_prompt(
        &self,
        s: &mut Session,
        x: TensorId,
        prompt_rows: Option<TensorId>,
        i: usize,
        branch: Branch,
    ) -> TensorId {
        let (Some(rows), Some(proj)) = (prompt_rows, self.projection(i, branch)) else {
            return x;
        };
        let projected = proj.forward(s, rows);
        s.tape.add_rows(x, projected)
    }

    /// Graph: segmentation decoder down to per-pixel logits `[B*H*W, K]`.
    pub fn build_seg_decoder(
        &self,
        s: &mut Session,
        stage_outs: &[TensorId],
        bottleneck: TensorId,
        prompt_rows: Option<TensorId>,
    ) -> TensorId {
        let cfg = &self.config;
        let b = s.tape.data(bottleneck).shape()[0];
        let mut x = bottleneck;
        for (idx, layer) in self.layout.seg_layers.iter().enumerate() {
            let i = idx + 1;
            let dim = cfg.decoder_dim(i);
            let in_side = cfg.stage_side(cfg.num_stages() - i); // side before expansion
            // pixel-shuffle expansion: 2*dim -> 4*dim channels -> 2x side at dim
            let expanded = layer.expand.forward(s, x);
            let map = patch_expand_map(b, in_side, 4 * dim);
            let out_side = in_side * 2;
            let up = s.tape.gather(expanded, &[b, out_side * out_side, dim], map);
            // skip connection from the same-resolution encoder stage
            let skip = stage_outs[NUM_DECODER_LAYERS - i];
            let fused = s.tape.concat_last(up, skip);
            let fused = layer.fuse.forward(s, fused);
            let injected = self.build_inject_prompt(s, fused, prompt_rows, i, Branch::Seg);
            let win = cfg.window_at(out_side);
            x = layer.block.forward(s, injected, out_side, win);
        }
        let x = self.layout.seg_head_norm.forward(s, x);
        let x = self.layout.seg_head.forward(s, x);
        let (h, w) = (cfg.image_size, cfg.image_size);
        let map = pixel_logits_map(b, h, w, cfg.patch_size, cfg.num_seg_classes);
        s.tape.gather(x, &[b * h * w, cfg.num_seg_classes], map)
    }

    /// Graph: classification decoder to logits `[B, num_cls_classes]`.
    pub fn build_cls_decoder(
        &self,
        s: &mut Session,
        bottleneck: TensorId,
        prompt_rows: Option<TensorId>,
    ) -> TensorId {
        let cfg = &self.config;
        let side = cfg.stage_side(cfg.num_stages() - 1);
        let win = cfg.window_at(side);
        let mut x = bottleneck;
        for (idx, layer) in self.layout.cls_layers.iter().enumerate() {
            let i = idx + 1;
            let reduced = layer.reduce.forward(s, x);
            let injected = self.build_inject_prompt(s, reduced, prompt_rows, i, Branch::Cls);
            x = layer.block.forward(s, injected, side, win);
        }
        let x = self.layout.cls_head_norm.forward(s, x);
        let pooled = s.tape.mean_axis(x, 1);
        self.layout.cls_head.forward(s, pooled)
    }

    /// Graph: mean-pooled bottleneck tokens `[B, dim]`.
    pub fn build_embedding(&self, s: &mut Session, bottleneck: TensorId) -> TensorId {
        s.tape.mean_axis(bottleneck, 1)
    }

    /// Stack prompt vectors into a `[B, 15]` constant node, validating each.
    pub fn prompt_rows(
        &self,
        s: &mut Session,
        prompts: &[PromptVector],
    ) -> Result<Option<TensorId>, ModelError> {
        if !self.config.prompt_enabled {
            return Ok(None);
        }
        let mut flat = Vec::with_capacity(prompts.len() * PROMPT_DIM);
        for v in prompts {
            validate_prompt_vector(v.as_slice())?;
            flat.extend_from_slice(v.as_slice());
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&[prompts.len(), PROMPT_DIM]), flat).unwrap();
        Ok(Some(s.tape.leaf(arr)))
    }

    /// Eval: encoder features for one image.
    pub fn encode(&self, image: &Array2<f64>) -> Result<EncoderFeatures, ModelError> {
        let batch = single_batch(image);
        self.check_image_shape(batch.shape())?;
        let mut s = Session::new(&self.params);
        let images = s.tape.leaf(batch.into_dyn());
        let (stage_outs, bottleneck) = self.build_encoder(&mut s, images);
        Ok(EncoderFeatures {
            stage_features: stage_outs.iter().map(|&t| s.tape.data(t).clone()).collect(),
            bottleneck: s.tape.data(bottleneck).clone(),
        })
    }

    /// Eval: segmentation logits `[K, H, W]` from precomputed features.
    pub fn decode_segmentation(
        &self,
        features: &EncoderFeatures,
        prompt: &PromptVector,
    ) -> Result<Array3<f64>, ModelError> {
        let mut s = Session::new(&self.params);
        let stage_outs: Vec<TensorId> = features
            .stage_features
            .iter()
            .map(|f| s.tape.leaf(f.clone()))
            .collect();
        let bottleneck = *stage_outs.last().unwrap();
        let rows = self.prompt_rows(&mut s, std::slice::from_ref(prompt))?;
        let logits = self.build_seg_decoder(&mut s, &stage_outs, bottleneck, rows);
        Ok(seg_logits_to_grid(
            s.tape.data(logits),
            self.config.image_size,
            self.config.num_seg_classes,
        ))
    }

    /// Eval: classification logits from precomputed features.
    pub fn decode_classification(
        &self,
        features: &EncoderFeatures,
        prompt: &PromptVector,
    ) -> Result<Array1<f64>, ModelError> {
        let mut s = Session::new(&self.params);
        let bottleneck = s.tape.leaf(features.bottleneck.clone());
        let rows = self.prompt_rows(&mut s, std::slice::from_ref(prompt))?;
        let logits = self.build_cls_decoder(&mut s, bottleneck, rows);
        let d = s.tape.data(logits);
        Ok(Array1::from_iter(d.iter().copied()))
    }

    /// Eval: full dispatch on one image. The task prompt selects the branch;
    /// the bottleneck embedding is always produced.
    pub fn forward(&self, image: &Array2<f64>, prompt: &PromptSet) -> Result<ForwardOutput, ModelError> {
        let batch = single_batch(image);
        self.check_image_shape(batch.shape())?;
        let vector = encode_prompt_set(prompt);
        let mut s = Session::new(&self.params);
        let images = s.tape.leaf(batch.into_dyn());
        let (stage_outs, bottleneck) = self.build_encoder(&mut s, images);
        let rows = self.prompt_rows(&mut s, std::slice::from_ref(&vector))?;
        let emb = self.build_embedding(&mut s, bottleneck);
        let embedding = Array1::from_iter(s.tape.data(emb).iter().copied());
        match prompt.task {
            TaskPrompt::Segmentation => {
                let logits = self.build_seg_decoder(&mut s, &stage_outs, bottleneck, rows);
                Ok(ForwardOutput {
                    seg_logits: Some(seg_logits_to_grid(
                        s.tape.data(logits),
                        self.config.image_size,
                        self.config.num_seg_classes,
                    )),
                    cls_logits: None,
                    bottleneck_embedding: embedding,
                })
            }
            TaskPrompt::Classification => {
                let logits = self.build_cls_decoder(&mut s, bottleneck, rows);
                Ok(ForwardOutput {
                    seg_logits: None,
                    cls_logits: Some(Array1::from_iter(s.tape.data(logits).iter().copied())),
                    bottleneck_embedding: embedding,
                })
            }
        }
    }
}

fn single_batch(image: &Array2<f64>) -> Array3<f64> {
    let (h, w) = image.dim();
    image
        .clone()
        .into_shape_with_order((1, h, w))
        .unwrap()
}

/// `[H*W, K]` flat logits to `[K, H, W]`.
fn seg_logits_to_grid(flat: &Arr, size: usize, k: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((k, size, size));
    let flat = flat.as_slice().unwrap();
    for y in 0..size {
        for x in 0..size {
            for kk in 0..k {
                out[[kk, y, x]] = flat[(y * size + x) * k + kk];
            }
        }
    }
    out
}
