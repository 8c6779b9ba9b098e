//! Eager reverse-mode autodiff over [`Tensor`].
//!
//! Each op computes its value at insertion time and records how it was built;
//! [`Graph::backward`] walks the tape in reverse. Binary ops require equal
//! shapes — broadcasting is explicit via [`Graph::broadcast`], which keeps
//! every backward rule unambiguous.
//!
//! The op set is exactly what the model needs: elementwise arithmetic,
//! batched matmul, permute/reshape, reductions (sum/mean/max), sigmoid,
//! exact-erf GELU, softmax/log-softmax over the last axis, channel concat,
//! patch extraction, and corner-aligned bilinear upsampling.

use crate::math;
use crate::tensor::{strides_of, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Batched matmul: `[..b, m, k] x [..b, k, n] -> [..b, m, n]`.
    Matmul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Broadcast(NodeId),
    SumAxes {
        input: NodeId,
        axes: Vec<usize>,
        keepdims: bool,
    },
    MeanAxes {
        input: NodeId,
        axes: Vec<usize>,
        keepdims: bool,
        count: usize,
    },
    MaxAxes {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Sigmoid(NodeId),
    Gelu(NodeId),
    Sqrt(NodeId),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    ConcatLast(Vec<NodeId>),
    ExtractPatches {
        input: NodeId,
        patch: usize,
    },
    BilinearUpsample {
        input: NodeId,
    },
    /// Elementwise max(x, c); gradient passes where x > c.
    MaxScalar(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or a zero tensor of the given shape if the node
    /// was never reached (structurally zero gradient).
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn binary_value(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "binary op requires equal shapes (broadcast explicitly)"
        );
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_value(a, b, |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * s);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + s);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(c));
        let g = self.ng(a);
        self.push(v, Op::MaxScalar(a, c), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(math::sigmoid);
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(math::gelu);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::sqrt);
        let g = self.ng(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.nodes[a].value.reshaped(shape).expect("reshape numel");
        let g = self.ng(a);
        self.push(v, Op::Reshape(a), g)
    }

    pub fn permute(&mut self, a: NodeId, perm: Vec<usize>) -> NodeId {
        let v = permute_tensor(&self.nodes[a].value, &perm);
        let g = self.ng(a);
        self.push(v, Op::Permute(a, perm), g)
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = broadcast_tensor(&self.nodes[a].value, shape);
        let g = self.ng(a);
        self.push(v, Op::Broadcast(a), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_values(&self.nodes[a].value, &self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> NodeId {
        let (v, _) = reduce_tensor(&self.nodes[a].value, axes, keepdims, Reduction::Sum);
        let g = self.ng(a);
        self.push(
            v,
            Op::SumAxes {
                input: a,
                axes: axes.to_vec(),
                keepdims,
            },
            g,
        )
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> NodeId {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let (v, _) = reduce_tensor(&self.nodes[a].value, axes, keepdims, Reduction::Mean);
        let g = self.ng(a);
        self.push(
            v,
            Op::MeanAxes {
                input: a,
                axes: axes.to_vec(),
                keepdims,
                count,
            },
            g,
        )
    }

    pub fn max_axes(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> NodeId {
        let (v, argmax) = reduce_tensor(&self.nodes[a].value, axes, keepdims, Reduction::Max);
        let g = self.ng(a);
        self.push(
            v,
            Op::MaxAxes {
                input: a,
                argmax: argmax.expect("max reduce caches argmax"),
            },
            g,
        )
    }

    /// Sum every element down to a `[1]` tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes, false)
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let v = softmax_last_value(&self.nodes[a].value, false);
        let g = self.ng(a);
        self.push(v, Op::SoftmaxLast(a), g)
    }

    pub fn log_softmax_last(&mut self, a: NodeId) -> NodeId {
        let v = softmax_last_value(&self.nodes[a].value, true);
        let g = self.ng(a);
        self.push(v, Op::LogSoftmaxLast(a), g)
    }

    /// Concatenate along the last axis; all inputs share the leading shape.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut last = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading shape");
            last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out_shape = lead;
        out_shape.push(last);
        let mut data = vec![0.0; rows * last];
        let mut offset = 0;
        for &p in parts {
            let s = self.shape(p);
            let w = s[s.len() - 1];
            let src = self.nodes[p].value.data();
            for r in 0..rows {
                data[r * last + offset..r * last + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let v = Tensor::new(out_shape, data).unwrap();
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatLast(parts.to_vec()), g)
    }

    /// `(B, H, W, C)` -> `(B, H/p, W/p, p*p*C)`, patch pixels row-major.
    pub fn extract_patches(&mut self, a: NodeId, patch: usize) -> NodeId {
        let v = extract_patches_value(&self.nodes[a].value, patch);
        let g = self.ng(a);
        self.push(v, Op::ExtractPatches { input: a, patch }, g)
    }

    /// Corner-aligned bilinear upsample `(B, h, w, C)` -> `(B, out_h, out_w, C)`.
    pub fn bilinear_upsample(&mut self, a: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let v = bilinear_value(&self.nodes[a].value, out_h, out_w);
        let g = self.ng(a);
        self.push(v, Op::BilinearUpsample { input: a }, g)
    }

    /// `x (M, in) * w (in, out) + b (out,)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        let shape = self.shape(y).to_vec();
        let bb = self.broadcast(b, &shape);
        self.add(y, bb)
    }

    /// Reverse pass from a single-element loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "backward requires a scalar loss"
        );
        assert!(
            self.nodes[loss].needs_grad,
            "loss does not depend on any differentiable leaf"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), 1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |nid: NodeId| &self.nodes[nid].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, elementwise(g, val(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, elementwise(g, val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, elementwise(g, val(*b), |x, y| x / y));
                }
                if self.ng(*b) {
                    let va = val(*a).data();
                    let vb = val(*b).data();
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| -gi * va[i] / (vb[i] * vb[i]))
                        .collect();
                    self.accum(grads, *b, Tensor::new(val(*b).shape().to_vec(), data).unwrap());
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::MaxScalar(a, c) => {
                let va = val(*a).data();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| if va[i] > *c { gi } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * y[i] * (1.0 - y[i]))
                    .collect();
                self.accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), data).unwrap());
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * math::gelu_grad(x[i]))
                    .collect();
                self.accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), data).unwrap());
            }
            Op::Sqrt(a) => {
                let y = self.nodes[id].value.data();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * 0.5 / y[i])
                    .collect();
                self.accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), data).unwrap());
            }
            Op::Reshape(a) => {
                let back = g.reshaped(val(*a).shape().to_vec()).unwrap();
                self.accum(grads, *a, back);
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accum(grads, *a, permute_tensor(g, &inverse));
            }
            Op::Broadcast(a) => {
                self.accum(grads, *a, reduce_broadcast_grad(g, val(*a).shape()));
            }
            Op::SumAxes {
                input,
                axes,
                keepdims,
            } => {
                let back = expand_reduced_grad(g, val(*input).shape(), axes, *keepdims, 1.0);
                self.accum(grads, *input, back);
            }
            Op::MeanAxes {
                input,
                axes,
                keepdims,
                count,
            } => {
                let back = expand_reduced_grad(
                    g,
                    val(*input).shape(),
                    axes,
                    *keepdims,
                    1.0 / *count as f64,
                );
                self.accum(grads, *input, back);
            }
            Op::MaxAxes { input, argmax } => {
                let mut back = Tensor::zeros(val(*input).shape());
                for (out_i, &src_i) in argmax.iter().enumerate() {
                    back.data_mut()[src_i] += g.data()[out_i];
                }
                self.accum(grads, *input, back);
            }
            Op::SoftmaxLast(a) => {
                let y = self.nodes[id].value.data();
                let k = *self.nodes[id].value.shape().last().unwrap();
                let mut data = vec![0.0; y.len()];
                for row in 0..y.len() / k {
                    let o = row * k;
                    let dot: f64 = (0..k).map(|j| g.data()[o + j] * y[o + j]).sum();
                    for j in 0..k {
                        data[o + j] = y[o + j] * (g.data()[o + j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), data).unwrap());
            }
            Op::LogSoftmaxLast(a) => {
                let y = self.nodes[id].value.data();
                let k = *self.nodes[id].value.shape().last().unwrap();
                let mut data = vec![0.0; y.len()];
                for row in 0..y.len() / k {
                    let o = row * k;
                    let gsum: f64 = (0..k).map(|j| g.data()[o + j]).sum();
                    for j in 0..k {
                        data[o + j] = g.data()[o + j] - y[o + j].exp() * gsum;
                    }
                }
                self.accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), data).unwrap());
            }
            Op::ConcatLast(parts) => {
                let out_last = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.numel() / out_last;
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape();
                    let w = s[s.len() - 1];
                    if self.ng(p) {
                        let mut data = vec![0.0; rows * w];
                        for r in 0..rows {
                            data[r * w..(r + 1) * w].copy_from_slice(
                                &g.data()[r * out_last + offset..r * out_last + offset + w],
                            );
                        }
                        self.accum(grads, p, Tensor::new(s.to_vec(), data).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.ng(*a) {
                    let mut da = vec![0.0; va.numel()];
                    for t in 0..batch {
                        mm_nt(
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &vb.data()[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, Tensor::new(sa.to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; vb.numel()];
                    for t in 0..batch {
                        mm_tn(
                            &va.data()[t * m * k..(t + 1) * m * k],
                            &g.data()[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                    self.accum(grads, *b, Tensor::new(sb.to_vec(), db).unwrap());
                }
            }
            Op::ExtractPatches { input, patch } => {
                let back = scatter_patches_grad(g, val(*input).shape(), *patch);
                self.accum(grads, *input, back);
            }
            Op::BilinearUpsample { input } => {
                let out_shape = self.nodes[id].value.shape();
                let back = bilinear_grad(g, val(*input).shape(), out_shape);
                self.accum(grads, *input, back);
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_numel = t.numel();
    let mut data = vec![0.0; out_numel];
    let mut idx = vec![0usize; out_shape.len()];
    for (out_flat, slot) in data.iter_mut().enumerate() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *slot = t.data()[src];
        // advance multi-index
        let _ = out_flat;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

fn broadcast_tensor(t: &Tensor, target: &[usize]) -> Tensor {
    let src = t.shape();
    assert!(src.len() <= target.len(), "broadcast cannot drop axes");
    let offset = target.len() - src.len();
    for (i, &d) in src.iter().enumerate() {
        assert!(
            d == target[offset + i] || d == 1,
            "cannot broadcast {:?} to {:?}",
            src,
            target
        );
    }
    let out_numel: usize = target.iter().product();
    let src_strides = strides_of(src);
    let mut data = vec![0.0; out_numel];
    let mut idx = vec![0usize; target.len()];
    for slot in data.iter_mut() {
        let mut flat = 0;
        for (i, &s) in src.iter().enumerate() {
            let pos = if s == 1 { 0 } else { idx[offset + i] };
            flat += pos * src_strides[i];
        }
        *slot = t.data()[flat];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(target.to_vec(), data).unwrap()
}

/// Sum `g` down to `src_shape` (inverse of broadcast).
fn reduce_broadcast_grad(g: &Tensor, src_shape: &[usize]) -> Tensor {
    let target = g.shape();
    let offset = target.len() - src_shape.len();
    let src_strides = strides_of(src_shape);
    let mut out = Tensor::zeros(src_shape);
    let mut idx = vec![0usize; target.len()];
    for &gv in g.data() {
        let mut flat = 0;
        for (i, &s) in src_shape.iter().enumerate() {
            let pos = if s == 1 { 0 } else { idx[offset + i] };
            flat += pos * src_strides[i];
        }
        out.data_mut()[flat] += gv;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Reduce over `axes`. Returns the reduced tensor and, for max, the flat
/// source index of the (first) maximum per output element.
fn reduce_tensor(
    t: &Tensor,
    axes: &[usize],
    keepdims: bool,
    red: Reduction,
) -> (Tensor, Option<Vec<usize>>) {
    let shape = t.shape();
    let mut reduced = vec![false; shape.len()];
    for &ax in axes {
        assert!(ax < shape.len(), "reduce axis out of range");
        reduced[ax] = true;
    }
    let kept_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();
    let out_shape: Vec<usize> = if keepdims {
        kept_shape.clone()
    } else {
        let s: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduced[*i])
            .map(|(_, &d)| d)
            .collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    };
    let out_numel: usize = out_shape.iter().product();
    let kept_strides = strides_of(&kept_shape);
    let count: usize = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| reduced[*i])
        .map(|(_, &d)| d)
        .product();

    let is_max = matches!(red, Reduction::Max);
    let init = if is_max { f64::NEG_INFINITY } else { 0.0 };
    let mut acc = vec![init; out_numel];
    let mut arg = if is_max {
        Some(vec![0usize; out_numel])
    } else {
        None
    };

    let mut idx = vec![0usize; shape.len()];
    for (flat, &v) in t.data().iter().enumerate() {
        let mut out_flat = 0;
        for (i, &s) in kept_shape.iter().enumerate() {
            let pos = if s == 1 { 0 } else { idx[i] };
            out_flat += pos * kept_strides[i];
        }
        match red {
            Reduction::Sum | Reduction::Mean => acc[out_flat] += v,
            Reduction::Max => {
                if v > acc[out_flat] {
                    acc[out_flat] = v;
                    arg.as_mut().unwrap()[out_flat] = flat;
                }
            }
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    if matches!(red, Reduction::Mean) {
        let inv = 1.0 / count as f64;
        for v in acc.iter_mut() {
            *v *= inv;
        }
    }
    (Tensor::new(out_shape, acc).unwrap(), arg)
}

/// Expand a reduced-gradient back to `src_shape`, scaling each entry.
fn expand_reduced_grad(
    g: &Tensor,
    src_shape: &[usize],
    axes: &[usize],
    _keepdims: bool,
    scale: f64,
) -> Tensor {
    let mut reduced = vec![false; src_shape.len()];
    for &ax in axes {
        reduced[ax] = true;
    }
    let kept_shape: Vec<usize> = src_shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();
    let g_kept = g.reshaped(kept_shape.clone()).unwrap();
    let expanded = broadcast_tensor(&g_kept, src_shape);
    expanded.map(|x| x * scale)
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
    assert_eq!(sa.len(), sb.len(), "matmul rank mismatch");
    assert_eq!(
        &sa[..sa.len() - 2],
        &sb[..sb.len() - 2],
        "matmul batch dims must match"
    );
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", sa, sb);
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut out_shape = sa[..sa.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut data = vec![0.0; batch * m * n];
    for t in 0..batch {
        mm_nn(
            &a.data()[t * m * k..(t + 1) * m * k],
            &b.data()[t * k * n..(t + 1) * k * n],
            m,
            k,
            n,
            &mut data[t * m * n..(t + 1) * m * n],
        );
    }
    Tensor::new(out_shape, data).unwrap()
}

/// C(m,n) += A(m,k) * B(k,n)
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C(m,k) += A(m,n) * B(k,n)^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut sum = 0.0;
            for p in 0..n {
                sum += arow[p] * brow[p];
            }
            c[i * k + j] += sum;
        }
    }
}

/// C(k,n) += A(m,k)^T * B(m,n)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let api = arow[i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
}

fn softmax_last_value(t: &Tensor, log: bool) -> Tensor {
    let k = *t.shape().last().expect("softmax needs rank >= 1");
    let mut data = vec![0.0; t.numel()];
    for row in 0..t.numel() / k {
        let o = row * k;
        let x = &t.data()[o..o + k];
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for &xi in x {
            s += (xi - m).exp();
        }
        if log {
            let ln_s = s.ln();
            for j in 0..k {
                data[o + j] = x[j] - m - ln_s;
            }
        } else {
            for j in 0..k {
                data[o + j] = (x[j] - m).exp() / s;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn extract_patches_value(t: &Tensor, patch: usize) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 4, "extract_patches expects (B, H, W, C)");
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert!(
        h % patch == 0 && w % patch == 0,
        "image size {}x{} not divisible by patch {}",
        h,
        w,
        patch
    );
    let (gh, gw) = (h / patch, w / patch);
    let pc = patch * patch * c;
    let mut data = vec![0.0; b * gh * gw * pc];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let out_base = ((bi * gh + gy) * gw + gx) * pc;
                for py in 0..patch {
                    for px in 0..patch {
                        let src = ((bi * h + gy * patch + py) * w + gx * patch + px) * c;
                        let dst = out_base + (py * patch + px) * c;
                        data[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh, gw, pc], data).unwrap()
}

fn scatter_patches_grad(g: &Tensor, src_shape: &[usize], patch: usize) -> Tensor {
    let (b, h, w, c) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pc = patch * patch * c;
    let mut out = Tensor::zeros(src_shape);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let g_base = ((bi * gh + gy) * gw + gx) * pc;
                for py in 0..patch {
                    for px in 0..patch {
                        let dst = ((bi * h + gy * patch + py) * w + gx * patch + px) * c;
                        let src = g_base + (py * patch + px) * c;
                        for ci in 0..c {
                            out.data_mut()[dst + ci] += g.data()[src + ci];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Corner positions and weight for align-corners interpolation.
fn lerp_coords(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if out_n <= 1 || in_n <= 1 {
        return (0, 0, 0.0);
    }
    let pos = out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
    let lo = pos.floor() as usize;
    let lo = lo.min(in_n - 1);
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, pos - lo as f64)
}

fn bilinear_value(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 4, "bilinear_upsample expects (B, h, w, C)");
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut data = vec![0.0; b * out_h * out_w * c];
    for bi in 0..b {
        for oy in 0..out_h {
            let (y0, y1, wy) = lerp_coords(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, wx) = lerp_coords(ox, out_w, w);
                let dst = ((bi * out_h + oy) * out_w + ox) * c;
                let i00 = ((bi * h + y0) * w + x0) * c;
                let i01 = ((bi * h + y0) * w + x1) * c;
                let i10 = ((bi * h + y1) * w + x0) * c;
                let i11 = ((bi * h + y1) * w + x1) * c;
                for ci in 0..c {
                    data[dst + ci] = (1.0 - wy) * (1.0 - wx) * t.data()[i00 + ci]
                        + (1.0 - wy) * wx * t.data()[i01 + ci]
                        + wy * (1.0 - wx) * t.data()[i10 + ci]
                        + wy * wx * t.data()[i11 + ci];
                }
            }
        }
    }
    Tensor::new(vec![b, out_h, out_w, c], data).unwrap()
}

fn bilinear_grad(g: &Tensor, src_shape: &[usize], out_shape: &[usize]) -> Tensor {
    let (b, h, w, c) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
    let (out_h, out_w) = (out_shape[1], out_shape[2]);
    let mut out = Tensor::zeros(src_shape);
    for bi in 0..b {
        for oy in 0..out_h {
            let (y0, y1, wy) = lerp_coords(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, wx) = lerp_coords(ox, out_w, w);
                let src = ((bi * out_h + oy) * out_w + ox) * c;
                let i00 = ((bi * h + y0) * w + x0) * c;
                let i01 = ((bi * h + y0) * w + x1) * c;
                let i10 = ((bi * h + y1) * w + x0) * c;
                let i11 = ((bi * h + y1) * w + x1) * c;
                for ci in 0..c {
                    let gv = g.data()[src + ci];
                    out.data_mut()[i00 + ci] += (1.0 - wy) * (1.0 - wx) * gv;
                    out.data_mut()[i01 + ci] += (1.0 - wy) * wx * gv;
                    out.data_mut()[i10 + ci] += wy * (1.0 - wx) * gv;
                    out.data_mut()[i11 + ci] += wy * wx * gv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        x0: Tensor,
        eps: f64,
        tol: f64,
    ) {
        // analytic
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("gradient exists").clone();

        // numeric
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.leaf(t, true);
                let loss = build(&mut g, x);
                g.value(loss).item()
            };
            let num = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(num.abs()).max(1e-6);
            assert!(
                (a - num).abs() / denom < tol,
                "grad mismatch at {}: analytic {} vs numeric {}",
                i,
                a,
                num
            );
        }
    }

    fn weighted_sum(g: &mut Graph, x: NodeId) -> NodeId {
        // deterministic non-uniform weights so gradients are generic
        let n = g.value(x).numel();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * (i as f64) * (-1.0_f64).powi(i as i32)).collect();
        let shape = g.shape(x).to_vec();
        let wt = g.constant(Tensor::new(shape, w).unwrap());
        let prod = g.mul(x, wt);
        g.sum_all(prod)
    }

    #[test]
    fn matmul_known_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut g = Graph::new();
        let a = g.constant(
            Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = g.constant(
            Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.5]).unwrap(),
        );
        let c = g.matmul(a, b);
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 8.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let y = g.softmax_last(x);
        for row in 0..2 {
            let s: f64 = g.value(y).data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_matmul() {
        let x0 = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]).unwrap();
        fd_check(
            |g, x| {
                let w = g.constant(
                    Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75]).unwrap(),
                );
                let y = g.matmul(x, w);
                weighted_sum(g, y)
            },
            x0,
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_and_logsoftmax() {
        let x0 = Tensor::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.1, 1.5, 0.3, -0.7, 0.9]).unwrap();
        fd_check(
            |g, x| {
                let y = g.softmax_last(x);
                weighted_sum(g, y)
            },
            x0.clone(),
            1e-6,
            1e-5,
        );
        fd_check(
            |g, x| {
                let y = g.log_softmax_last(x);
                weighted_sum(g, y)
            },
            x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_reductions_and_broadcast() {
        let x0 = Tensor::new(
            vec![2, 3],
            vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7],
        )
        .unwrap();
        fd_check(
            |g, x| {
                let m = g.mean_axes(x, &[1], true);
                let mb = g.broadcast(m, &[2, 3]);
                let centered = g.sub(x, mb);
                let sq = g.mul(centered, centered);
                let s = g.sum_all(sq);
                g.scale(s, 0.5)
            },
            x0.clone(),
            1e-6,
            1e-5,
        );
        fd_check(
            |g, x| {
                let mx = g.max_axes(x, &[0], false);
                weighted_sum(g, mx)
            },
            x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_activations() {
        let x0 = Tensor::new(vec![5], vec![-2.0, -0.5, 0.1, 0.8, 1.7]).unwrap();
        for build in [
            (|g: &mut Graph, x: NodeId| {
                let y = g.sigmoid(x);
                weighted_sum(g, y)
            }) as fn(&mut Graph, NodeId) -> NodeId,
            |g, x| {
                let y = g.gelu(x);
                weighted_sum(g, y)
            },
        ] {
            fd_check(build, x0.clone(), 1e-6, 1e-5);
        }
    }

    #[test]
    fn grad_patches_bilinear_concat_permute() {
        let x0 = Tensor::new(
            vec![1, 4, 4, 1],
            (0..16).map(|i| (i as f64) * 0.3 - 2.0).collect(),
        )
        .unwrap();
        fd_check(
            |g, x| {
                let p = g.extract_patches(x, 2);
                let up = g.bilinear_upsample(x, 7, 5);
                let s1 = weighted_sum(g, p);
                let s2 = weighted_sum(g, up);
                let perm = g.permute(x, vec![0, 3, 1, 2]);
                let s3 = weighted_sum(g, perm);
                let cat = g.concat_last(&[s1, s2, s3]);
                g.sum_all(cat)
            },
            x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = g.bilinear_upsample(x, 2, 2);
        assert_eq!(g.value(same).data(), &[1.0, 2.0, 3.0, 4.0]);

        let c = g.constant(Tensor::full(&[1, 3, 3, 1], 7.5));
        let up = g.bilinear_upsample(c, 9, 5);
        assert!(g.value(up).data().iter().all(|&v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn bilinear_hand_case_2x2_to_4x4() {
        // corner-aligned: corners reproduce sources, interior interpolates
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![0.0, 0.0, 0.0, 4.0]).unwrap());
        let up = g.bilinear_upsample(x, 4, 4);
        let v = g.value(up);
        assert_eq!(v.get(&[0, 0, 0, 0]), 0.0);
        assert_eq!(v.get(&[0, 3, 3, 0]), 4.0);
        assert!((v.get(&[0, 1, 1, 0]) - 4.0 / 9.0).abs() < 1e-12);
        assert!((v.get(&[0, 2, 2, 0]) - 16.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn max_reduce_breaks_ties_toward_first() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], vec![1.0, 3.0, 3.0, 0.0]).unwrap(), true);
        let m = g.max_axes(x, &[0], false);
        assert_eq!(g.value(m).data(), &[3.0]);
        let grads = g.backward(m);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
