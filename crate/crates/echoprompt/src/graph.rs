//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! arena; [`Tape::backward`] walks the arena in reverse and accumulates
//! gradients. Everything is computed in `f64` on a single thread, so a fixed
//! seed gives bit-identical results across runs.

use ndarray::{ArrayD, Axis, Dimension, Ix2, Ix3, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Gradient signature: (output grad, output data, parent data) -> parent grads.
type BackFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr>>;

struct Node {
    data: Arr,
    parents: Vec<TensorId>,
    backward: Option<BackFn>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, t: TensorId) -> Option<&Arr> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, t: TensorId) -> &Arr {
        &self.nodes[t.0].data
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, t: TensorId) -> f64 {
        let d = self.data(t);
        debug_assert_eq!(d.len(), 1);
        *d.iter().next().unwrap()
    }

    fn push(&mut self, data: Arr, parents: Vec<TensorId>, backward: Option<BackFn>) -> TensorId {
        debug_assert!(data.is_standard_layout());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            parents,
            backward,
        });
        id
    }

    /// Differentiable input (parameters, activations fed from outside).
    pub fn leaf(&mut self, data: Arr) -> TensorId {
        self.push(data, vec![], None)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.data(a) + self.data(b);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    /// `a [.., C] + v [C]`, `v` broadcast over all leading axes.
    pub fn add_bias(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let out = self.data(a) + self.data(v);
        self.push(
            out,
            vec![a, v],
            Some(Box::new(|g, _, parents| {
                let c = parents[1].len();
                let gv = g
                    .to_shape((g.len() / c, c))
                    .unwrap()
                    .sum_axis(Axis(0))
                    .into_dyn();
                vec![g.clone(), gv]
            })),
        )
    }

    /// `x [B, N, C] + p [B, C]`, one row of `p` broadcast over the tokens of
    /// the matching batch element.
    pub fn add_rows(&mut self, x: TensorId, p: TensorId) -> TensorId {
        let xd = self.data(x);
        let pd = self.data(p);
        let (b, n, c) = dims3(xd);
        assert_eq!(pd.shape(), &[b, c], "add_rows: row shape mismatch");
        let x3 = xd.view().into_dimensionality::<Ix3>().unwrap();
        let p2 = pd.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x3.to_owned();
        for bi in 0..b {
            for ni in 0..n {
                for ci in 0..c {
                    out[[bi, ni, ci]] += p2[[bi, ci]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, p],
            Some(Box::new(move |g, _, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let gp = g3.sum_axis(Axis(1)).into_dyn();
                vec![g.clone(), gp]
            })),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.data(a) * self.data(b);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _, parents| {
                vec![g * parents[1], g * parents[0]]
            })),
        )
    }

    /// Elementwise quotient of two same-shape tensors.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.data(a) / self.data(b);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _, parents| {
                let gb = -(g * parents[0]) / (parents[1] * parents[1]);
                vec![g / parents[1], gb]
            })),
        )
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.data(a) * c;
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g * c])),
        )
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.data(a) + c;
        self.push(out, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    /// `a [m, k] . b [k, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ad = self.data(a).view().into_dimensionality::<Ix2>().unwrap();
        let bd = self.data(b).view().into_dimensionality::<Ix2>().unwrap();
        let out = ad.dot(&bd).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = parents[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// `a [B, m, k] . b [B, k, n]`, batch by batch.
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ad = self.data(a).view().into_dimensionality::<Ix3>().unwrap();
        let bd = self.data(b).view().into_dimensionality::<Ix3>().unwrap();
        let (bs, m, _k) = (ad.shape()[0], ad.shape()[1], ad.shape()[2]);
        let n = bd.shape()[2];
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&ad.index_axis(Axis(0), i).dot(&bd.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(|g, _, parents| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let b3 = parents[1].view().into_dimensionality::<Ix3>().unwrap();
                let bs = g3.shape()[0];
                let mut ga = ndarray::Array3::<f64>::zeros(a3.raw_dim().into_pattern());
                let mut gb = ndarray::Array3::<f64>::zeros(b3.raw_dim().into_pattern());
                for i in 0..bs {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let in_shape: Vec<usize> = self.data(a).shape().to_vec();
        let out = self
            .data(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .unwrap()]
            })),
        )
    }

    /// Axis permutation; gradient applies the inverse permutation.
    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> TensorId {
        let axes_owned: Vec<usize> = axes.to_vec();
        let out = self
            .data(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_owned.len()];
        for (i, &ax) in axes_owned.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Index remap: `out.flat[i] = in.flat[map[i]]`. Gradient scatter-adds
    /// through the map, so non-bijective maps are also handled.
    pub fn gather(&mut self, a: TensorId, out_shape: &[usize], map: std::rc::Rc<Vec<usize>>) -> TensorId {
        let ad = self.data(a);
        let flat = ad.as_slice().unwrap();
        let out_len: usize = out_shape.iter().product();
        assert_eq!(out_len, map.len(), "gather: map length mismatch");
        let mut out = Vec::with_capacity(out_len);
        for &src in map.iter() {
            out.push(flat[src]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(out_shape), out).unwrap();
        let in_shape: Vec<usize> = ad.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let gflat = g.as_slice().unwrap();
                let mut gi = vec![0.0f64; in_shape.iter().product()];
                for (i, &src) in map.iter().enumerate() {
                    gi[src] += gflat[i];
                }
                vec![ArrayD::from_shape_vec(IxDyn(&in_shape), gi).unwrap()]
            })),
        )
    }

    /// Concatenation of two tensors along the last axis.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ad = self.data(a);
        let bd = self.data(b);
        let last = ad.ndim() - 1;
        let ca = ad.shape()[last];
        let out = ndarray::concatenate(Axis(last), &[ad.view(), bd.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let last = g.ndim() - 1;
                let ga = g
                    .slice_axis(Axis(last), ndarray::Slice::from(0..ca))
                    .as_standard_layout()
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(last), ndarray::Slice::from(ca..))
                    .as_standard_layout()
                    .to_owned();
                vec![ga, gb]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: TensorId) -> TensorId {
        let ad = self.data(a);
        let last = ad.ndim() - 1;
        let c = ad.shape()[last];
        let rows = ad.len() / c;
        let flat = ad.to_shape((rows, c)).unwrap().to_owned();
        let mut out = flat;
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let shape: Vec<usize> = ad.shape().to_vec();
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, y, _| {
                // dx = y * (g - sum(g * y)) rowwise
                let last = y.ndim() - 1;
                let c = y.shape()[last];
                let rows = y.len() / c;
                let y2 = y.to_shape((rows, c)).unwrap();
                let g2 = g.to_shape((rows, c)).unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, c));
                for r in 0..rows {
                    let dot: f64 = (0..c).map(|j| g2[[r, j]] * y2[[r, j]]).sum();
                    for j in 0..c {
                        dx[[r, j]] = y2[[r, j]] * (g2[[r, j]] - dot);
                    }
                }
                vec![dx
                    .into_dyn()
                    .into_shape_with_order(y.raw_dim())
                    .unwrap()]
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let out = self.data(a).mapv(|x| {
            let t = (K * (x + C3 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, _, parents| {
                let x = parents[0];
                let dx = x.mapv(|x| {
                    let inner = K * (x + C3 * x * x * x);
                    let t = inner.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C3 * x * x)
                });
                vec![g * &dx]
            })),
        )
    }

    /// Layer normalization over the last axis with scale and shift.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let ad = self.data(a);
        let c = *ad.shape().last().unwrap();
        let rows = ad.len() / c;
        let x = ad.to_shape((rows, c)).unwrap().to_owned();
        let gam = self.data(gamma).as_slice().unwrap().to_vec();
        let bet = self.data(beta).as_slice().unwrap().to_vec();
        let mut out = ndarray::Array2::<f64>::zeros((rows, c));
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[[r, j]] = (row[j] - mean) * inv * gam[j] + bet[j];
            }
        }
        let shape: Vec<usize> = ad.shape().to_vec();
        let out = out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            out,
            vec![a, gamma, beta],
            Some(Box::new(move |g, _, parents| {
                let x = parents[0];
                let gam = parents[1].as_slice().unwrap();
                let c = *x.shape().last().unwrap();
                let rows = x.len() / c;
                let x2 = x.to_shape((rows, c)).unwrap();
                let g2 = g.to_shape((rows, c)).unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, c));
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for r in 0..rows {
                    let row = x2.row(r);
                    let mean = row.sum() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat and the two row means needed by the input gradient
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv;
                        let gy = g2[[r, j]] * gam[j];
                        dgamma[j] += g2[[r, j]] * xh;
                        dbeta[j] += g2[[r, j]];
                        m1 += gy;
                        m2 += gy * xh;
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv;
                        let gy = g2[[r, j]] * gam[j];
                        dx[[r, j]] = (gy - m1 - xh * m2) * inv;
                    }
                }
                vec![
                    dx.into_dyn().into_shape_with_order(x.raw_dim()).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                ]
            })),
        )
    }

    /// Sum over one axis.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let out = self.data(a).sum_axis(Axis(axis)).as_standard_layout().to_owned();
        let in_shape: Vec<usize> = self.data(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
                for mut lane in gx.axis_iter_mut(Axis(axis)) {
                    lane += g;
                }
                vec![gx]
            })),
        )
    }

    /// Mean over one axis.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let n = self.data(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum of all elements, producing a 0-d node.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.data(a).sum();
        self.push(
            ndarray::arr0(s).into_dyn(),
            vec![a],
            Some(Box::new(|g, _, parents| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(parents[0].raw_dim(), gs)]
            })),
        )
    }

    /// Mean of all elements, producing a 0-d node.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let ld = self.data(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (n, k) = (ld.shape()[0], ld.shape()[1]);
        assert_eq!(n, targets.len(), "softmax_cross_entropy: target count");
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = ld.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        loss /= n as f64;
        let targets_owned: Vec<usize> = targets.to_vec();
        self.push(
            ndarray::arr0(loss).into_dyn(),
            vec![logits],
            Some(Box::new(move |g, _, parents| {
                let gs = *g.iter().next().unwrap();
                let ld = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let (n, k2) = (ld.shape()[0], ld.shape()[1]);
                debug_assert_eq!(k2, k);
                let mut dx = ndarray::Array2::<f64>::zeros((n, k2));
                for r in 0..n {
                    let row = ld.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..k2 {
                        let p = (row[j] - m).exp() / denom;
                        let t = if targets_owned[r] == j { 1.0 } else { 0.0 };
                        dx[[r, j]] = gs * (p - t) / n as f64;
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Backpropagate from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: TensorId) -> Gradients {
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        let root_node = &self.nodes[root.0];
        assert_eq!(root_node.data.len(), 1, "backward: root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(root_node.data.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_data: Vec<&Arr> =
                    node.parents.iter().map(|p| &self.nodes[p.0].data).collect();
                let pgrads = back(&g, &node.data, &parent_data);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn dims3(a: &Arr) -> (usize, usize, usize) {
    assert_eq!(a.ndim(), 3);
    (a.shape()[0], a.shape()[1], a.shape()[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Central finite differences of `f` against the analytic gradient of the
    /// scalar produced by `build` with respect to leaf 0.
    fn check_grad<F>(input: Arr, build: F, tol: f64)
    where
        F: Fn(&mut Tape, TensorId) -> TensorId,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).expect("no gradient for input").clone();

        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = input.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let mut tp = Tape::new();
            let xp = tp.leaf(plus);
            let lp_id = build(&mut tp, xp);
            let lp = tp.scalar(lp_id);
            let mut tm = Tape::new();
            let xm = tm.leaf(minus);
            let lm_id = build(&mut tm, xm);
            let lm = tm.scalar(lm_id);
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn grad_add_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_grad(a, |t, x| {
            let bb = t.leaf(b.clone());
            let y = t.mul(x, bb);
            let z = t.add(y, x);
            t.sum_all(z)
        }, 1e-6);
    }

    #[test]
    fn grad_div() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[6]);
        let b = randn(&mut rng, &[6]).mapv(|v| v + 3.0);
        check_grad(a, |t, x| {
            let bb = t.leaf(b.clone());
            let y = t.div(x, bb);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 2]);
        check_grad(a, |t, x| {
            let bb = t.leaf(b.clone());
            let y = t.matmul(x, bb);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        }, 1e-6);
    }

    #[test]
    fn grad_batch_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 3]);
        check_grad(a, |t, x| {
            let bb = t.leaf(b.clone());
            let y = t.batch_matmul(x, bb);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_gelu_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[4, 6]);
        let gamma = randn(&mut rng, &[6]).mapv(|v| v + 1.5);
        let beta = randn(&mut rng, &[6]);
        check_grad(a, |t, x| {
            let g = t.leaf(gamma.clone());
            let b = t.leaf(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let y = t.gelu(y);
            let y = t.softmax_last(y);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        }, 1e-5);
    }

    #[test]
    fn grad_layernorm_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[5, 4]);
        let gamma = randn(&mut rng, &[4]).mapv(|v| v + 1.5);
        let beta = randn(&mut rng, &[4]);
        // gradient w.r.t. gamma
        check_grad(gamma.clone(), |t, g| {
            let xx = t.leaf(x.clone());
            let b = t.leaf(beta.clone());
            let y = t.layer_norm(xx, g, b, 1e-5);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        }, 1e-6);
    }

    #[test]
    fn grad_gather_permute_reshape_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[4, 3]);
        // reverse the flat order as an arbitrary bijective map
        let map: Vec<usize> = (0..24).rev().collect();
        let map = std::rc::Rc::new(map);
        check_grad(a, |t, x| {
            let y = t.gather(x, &[4, 6], map.clone());
            let y = t.permute(y, &[1, 0]);
            let y = t.reshape(y, &[6, 4]);
            let y = t.permute(y, &[1, 0]);
            let bb = t.leaf(b.clone());
            let y = t.concat_last(y, bb);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        }, 1e-6);
    }

    #[test]
    fn grad_bias_rows_sum_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 5, 3]);
        let v = randn(&mut rng, &[3]);
        let p = randn(&mut rng, &[2, 3]);
        check_grad(x.clone(), |t, xx| {
            let vv = t.leaf(v.clone());
            let pp = t.leaf(p.clone());
            let y = t.add_bias(xx, vv);
            let y = t.add_rows(y, pp);
            let y = t.mean_axis(y, 1);
            let y2 = t.mul(y, y);
            t.mean_all(y2)
        }, 1e-6);
        // and w.r.t. the broadcast row vector
        check_grad(p, |t, pp| {
            let xx = t.leaf(x.clone());
            let y = t.add_rows(xx, pp);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = randn(&mut rng, &[5, 3]);
        let targets = vec![0usize, 2, 1, 1, 0];
        check_grad(logits, |t, x| t.softmax_cross_entropy(x, &targets), 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut t = Tape::new();
        let logits = t.leaf(ArrayD::zeros(IxDyn(&[4, 2])));
        let loss = t.softmax_cross_entropy(logits, &[0, 1, 0, 1]);
        assert!((t.scalar(loss) - (2.0f64).ln()).abs() < 1e-12);
    }
}
