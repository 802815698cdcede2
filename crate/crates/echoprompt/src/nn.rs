//! Parameter storage and the transformer building blocks shared by the
//! encoder and both decoder branches.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Arr, Tape, TensorId};

/// Named `f64` parameter arrays with a trainable flag per entry.
///
/// Keys are hierarchical (`encoder.stage0.block0.attn.q.weight`, ...) and are
/// the compatibility contract for checkpoints and adapter fine-tuning.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Clone)]
pub struct Param {
    pub data: Arr,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Arr) {
        self.params.insert(
            name.to_string(),
            Param {
                data,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Arr {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .data
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params[name].trainable
    }

    /// Mark exactly the names for which `pred` holds as trainable.
    pub fn set_trainable_where<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}

/// One forward pass: the tape plus the leaf id of every parameter touched,
/// so gradients can be routed back by name.
pub struct Session<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    leaves: BTreeMap<String, TensorId>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            leaves: BTreeMap::new(),
        }
    }

    /// Leaf node for a named parameter; reused if already on the tape.
    pub fn param(&mut self, name: &str) -> TensorId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.tape.leaf(self.store.get(name).clone());
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn param_leaves(&self) -> &BTreeMap<String, TensorId> {
        &self.leaves
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    // Box-Muller, drawn pairwise for determinism
    let n: usize = shape.iter().product();
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        v.push(r * th.cos() * std);
        if v.len() < n {
            v.push(r * th.sin() * std);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Affine map `x W + b` applied over the last axis.
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        store.insert(&format!("{prefix}.weight"), randn(rng, &[in_dim, out_dim], std));
        store.insert(&format!("{prefix}.bias"), zeros(&[out_dim]));
        Self::attach(prefix, in_dim, out_dim)
    }

    /// Zero initialization; used for the prompt projections so the prompt
    /// path starts as an exact no-op.
    pub fn init_zero(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        store.insert(&format!("{prefix}.weight"), zeros(&[in_dim, out_dim]));
        store.insert(&format!("{prefix}.bias"), zeros(&[out_dim]));
        Self::attach(prefix, in_dim, out_dim)
    }

    pub fn attach(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    /// Apply to `x [.., in_dim]`, keeping all leading axes.
    pub fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let shape: Vec<usize> = s.tape.data(x).shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = s.param(&self.weight);
        let b = s.param(&self.bias);
        let flat = s.tape.reshape(x, &[rows, self.in_dim]);
        let y = s.tape.matmul(flat, w);
        let y = s.tape.add_bias(y, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        s.tape.reshape(y, &out_shape)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        store.insert(&format!("{prefix}.gamma"), ones(&[dim]));
        store.insert(&format!("{prefix}.beta"), zeros(&[dim]));
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        }
    }

    pub fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let g = s.param(&self.gamma);
        let b = s.param(&self.beta);
        s.tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Multi-head self-attention within non-overlapping square windows.
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub num_heads: usize,
    pub dim: usize,
}

impl WindowAttention {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, num_heads: usize) -> Self {
        assert_eq!(dim % num_heads, 0, "head count must divide channel dim");
        Self {
            q: Linear::init(store, rng, &format!("{prefix}.q"), dim, dim),
            k: Linear::init(store, rng, &format!("{prefix}.k"), dim, dim),
            v: Linear::init(store, rng, &format!("{prefix}.v"), dim, dim),
            proj: Linear::init(store, rng, &format!("{prefix}.proj"), dim, dim),
            num_heads,
            dim,
        }
    }

    /// `x [B, S*S, C]` on a square token grid of side `side`, attending within
    /// `window x window` tiles.
    pub fn forward(&self, s: &mut Session, x: TensorId, side: usize, window: usize) -> TensorId {
        let b = s.tape.data(x).shape()[0];
        let c = self.dim;
        let nw = (side / window) * (side / window);
        let t = window * window;
        let part = window_partition_map(b, side, window, c);
        let xw = s.tape.gather(x, &[b * nw, t, c], part);

        let heads = self.num_heads;
        let dh = c / heads;
        let split = |s: &mut Session, y: TensorId| {
            let y = s.tape.reshape(y, &[b * nw, t, heads, dh]);
            let y = s.tape.permute(y, &[0, 2, 1, 3]);
            s.tape.reshape(y, &[b * nw * heads, t, dh])
        };
        let q = self.q.forward(s, xw);
        let q = split(s, q);
        let k = self.k.forward(s, xw);
        let k = split(s, k);
        let v = self.v.forward(s, xw);
        let v = split(s, v);

        let kt = s.tape.permute(k, &[0, 2, 1]);
        let attn = s.tape.batch_matmul(q, kt);
        let attn = s.tape.mul_scalar(attn, 1.0 / (dh as f64).sqrt());
        let attn = s.tape.softmax_last(attn);
        let out = s.tape.batch_matmul(attn, v);

        let out = s.tape.reshape(out, &[b * nw, heads, t, dh]);
        let out = s.tape.permute(out, &[0, 2, 1, 3]);
        let out = s.tape.reshape(out, &[b * nw, t, c]);
        let out = self.proj.forward(s, out);

        let rev = window_reverse_map(b, side, window, c);
        s.tape.gather(out, &[b, side * side, c], rev)
    }
}

/// Pre-norm transformer block: windowed attention + MLP, both with residuals.
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::init(store, &format!("{prefix}.norm1"), dim),
            attn: WindowAttention::init(store, rng, &format!("{prefix}.attn"), dim, num_heads),
            norm2: LayerNorm::init(store, &format!("{prefix}.norm2"), dim),
            fc1: Linear::init(store, rng, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio),
            fc2: Linear::init(store, rng, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: TensorId, side: usize, window: usize) -> TensorId {
        let h = self.norm1.forward(s, x);
        let h = self.attn.forward(s, h, side, window);
        let x = s.tape.add(x, h);
        let h = self.norm2.forward(s, x);
        let h = self.fc1.forward(s, h);
        let h = s.tape.gelu(h);
        let h = self.fc2.forward(s, h);
        s.tape.add(x, h)
    }
}

/// out[b, wi, tr*w+tc, ch] = in[b, token(wi, tr, tc), ch]
fn window_partition_map(b: usize, side: usize, window: usize, c: usize) -> Rc<Vec<usize>> {
    let wn = side / window;
    let mut map = Vec::with_capacity(b * side * side * c);
    for bi in 0..b {
        for wr in 0..wn {
            for wc in 0..wn {
                for tr in 0..window {
                    for tc in 0..window {
                        let row = wr * window + tr;
                        let col = wc * window + tc;
                        let tok = row * side + col;
                        let base = (bi * side * side + tok) * c;
                        for ch in 0..c {
                            map.push(base + ch);
                        }
                    }
                }
            }
        }
    }
    Rc::new(map)
}

/// Inverse of [`window_partition_map`].
fn window_reverse_map(b: usize, side: usize, window: usize, c: usize) -> Rc<Vec<usize>> {
    let wn = side / window;
    let t = window * window;
    let mut map = Vec::with_capacity(b * side * side * c);
    for bi in 0..b {
        for row in 0..side {
            for col in 0..side {
                let wr = row / window;
                let wc = col / window;
                let tr = row % window;
                let tc = col % window;
                let win = bi * wn * wn + wr * wn + wc;
                let base = (win * t + tr * window + tc) * c;
                for ch in 0..c {
                    map.push(base + ch);
                }
            }
        }
    }
    Rc::new(map)
}

/// image [B, H, W] -> patch tokens [B, (H/p)*(W/p), p*p]
pub fn patch_extract_map(b: usize, h: usize, w: usize, p: usize) -> Rc<Vec<usize>> {
    let mut map = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for pr in 0..h / p {
            for pc in 0..w / p {
                for dr in 0..p {
                    for dc in 0..p {
                        map.push(bi * h * w + (pr * p + dr) * w + pc * p + dc);
                    }
                }
            }
        }
    }
    Rc::new(map)
}

/// tokens [B, S*S, C] -> 2x2-neighborhood stacks [B, (S/2)*(S/2), 4C]
pub fn patch_merge_map(b: usize, side: usize, c: usize) -> Rc<Vec<usize>> {
    let half = side / 2;
    let mut map = Vec::with_capacity(b * side * side * c);
    for bi in 0..b {
        for r in 0..half {
            for col in 0..half {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let tok = (2 * r + dr) * side + 2 * col + dc;
                    let base = (bi * side * side + tok) * c;
                    for ch in 0..c {
                        map.push(base + ch);
                    }
                }
            }
        }
    }
    Rc::new(map)
}

/// tokens [B, S*S, 2C] -> upsampled grid [B, (2S)*(2S), C/2]: each token's
/// channels split into four groups, one per output sub-pixel.
pub fn patch_expand_map(b: usize, side: usize, c2: usize) -> Rc<Vec<usize>> {
    assert_eq!(c2 % 4, 0);
    let cq = c2 / 4;
    let out_side = side * 2;
    let mut map = Vec::with_capacity(b * out_side * out_side * cq);
    for bi in 0..b {
        for row in 0..out_side {
            for col in 0..out_side {
                let (r, dr) = (row / 2, row % 2);
                let (cc, dc) = (col / 2, col % 2);
                let tok = r * side + cc;
                let group = dr * 2 + dc;
                let base = (bi * side * side + tok) * c2 + group * cq;
                for ch in 0..cq {
                    map.push(base + ch);
                }
            }
        }
    }
    Rc::new(map)
}

/// seg head tokens [B, N, p*p*K] -> per-pixel logits flattened [B*H*W, K]
pub fn pixel_logits_map(b: usize, h: usize, w: usize, p: usize, k: usize) -> Rc<Vec<usize>> {
    let wp = w / p;
    let np = (h / p) * wp;
    let mut map = Vec::with_capacity(b * h * w * k);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (pr, dr) = (y / p, y % p);
                let (pc, dc) = (x / p, x % p);
                let tok = pr * wp + pc;
                let base = (bi * np + tok) * (p * p * k) + (dr * p + dc) * k;
                for kk in 0..k {
                    map.push(base + kk);
                }
            }
        }
    }
    Rc::new(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn window_partition_roundtrip() {
        let (b, side, window, c) = (2, 6, 3, 5);
        let part = window_partition_map(b, side, window, c);
        let rev = window_reverse_map(b, side, window, c);
        let n = b * side * side * c;
        for i in 0..n {
            assert_eq!(part[rev[i]], i);
        }
    }

    #[test]
    fn patch_expand_inverts_merge_structure() {
        // merging then expanding visits every element exactly once
        let (b, side, c) = (1, 4, 8);
        let merge = patch_merge_map(b, side, c);
        let mut seen = vec![false; b * side * side * c];
        for &i in merge.iter() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.into_iter().all(|v| v));
        let expand = patch_expand_map(b, side / 2, 4 * c);
        let mut seen = vec![false; b * side * side * c];
        for &i in expand.iter() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.into_iter().all(|v| v));
    }

    #[test]
    fn linear_shapes_and_grad_flow() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::init(&mut store, &mut rng, "test.lin", 4, 7);
        let mut s = Session::new(&store);
        let x = s.tape.leaf(randn(&mut rng, &[3, 5, 4], 1.0));
        let y = lin.forward(&mut s, x);
        assert_eq!(s.tape.data(y).shape(), &[3, 5, 7]);
        let loss = s.tape.mean_all(y);
        let grads = s.tape.backward(loss);
        let wid = s.param_leaves()["test.lin.weight"];
        assert!(grads.get(wid).is_some());
    }

    #[test]
    fn attention_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = WindowAttention::init(&mut store, &mut rng, "test.attn", 8, 2);
        let mut s = Session::new(&store);
        let x = s.tape.leaf(randn(&mut rng, &[2, 16, 8], 1.0));
        let y = attn.forward(&mut s, x, 4, 2);
        assert_eq!(s.tape.data(y).shape(), &[2, 16, 8]);
    }
}
