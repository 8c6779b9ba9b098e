//! Transformer building blocks shared by the encoder and the mask decoder.
//!
//! Token layout inside blocks is `(B, T, C)`; callers reshape from the
//! `(B, h, w, C)` feature-map layout at the boundary.

use crate::graph::{Graph, NodeId};
use crate::params::ParameterStore;
use crate::error::Result;

const LAYER_NORM_EPS: f64 = 1e-6;

pub struct LnNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

pub struct AttnNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Insert a store entry as a graph leaf; trainable entries get gradients.
pub fn leaf_param(g: &mut Graph, store: &ParameterStore, name: &str) -> Result<NodeId> {
    let entry = store.get(name)?;
    Ok(g.leaf(entry.tensor.clone(), !entry.frozen))
}

/// Tracks the leaf node created for each parameter name, so gradients can be
/// collected by name after `backward`. Each name maps to one leaf per graph.
#[derive(Default)]
pub struct LeafRegistry {
    map: std::collections::BTreeMap<String, NodeId>,
    force_grad: bool,
}

impl LeafRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry whose leaves all require gradients, frozen or not
    /// (finite-difference checks of frozen-core math).
    pub fn with_forced_gradients() -> Self {
        LeafRegistry {
            map: Default::default(),
            force_grad: true,
        }
    }

    pub fn node(&mut self, g: &mut Graph, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.map.get(name) {
            return Ok(id);
        }
        let entry = store.get(name)?;
        let id = g.leaf(entry.tensor.clone(), self.force_grad || !entry.frozen);
        self.map.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }

    /// Gradients for the trainable partition, keyed by name. Parameters the
    /// loss never touched are omitted (the optimizer treats them as zero).
    pub fn trainable_gradients(
        &self,
        store: &ParameterStore,
        grads: &crate::graph::Gradients,
    ) -> std::collections::BTreeMap<String, crate::tensor::Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (name, &id) in &self.map {
            if let Ok(entry) = store.get(name) {
                if entry.frozen {
                    continue;
                }
                if let Some(g) = grads.get(id) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// LayerNorm over the channel (last) axis.
pub fn layer_norm(g: &mut Graph, x: NodeId, ln: &LnNodes) -> NodeId {
    let shape = g.shape(x).to_vec();
    let last = shape.len() - 1;
    let mean = g.mean_axes(x, &[last], true);
    let mean_b = g.broadcast(mean, &shape);
    let centered = g.sub(x, mean_b);
    let sq = g.mul(centered, centered);
    let var = g.mean_axes(sq, &[last], true);
    let var_eps = g.add_scalar(var, LAYER_NORM_EPS);
    let std = g.sqrt(var_eps);
    let std_b = g.broadcast(std, &shape);
    let normed = g.div(centered, std_b);
    let gamma_b = g.broadcast(ln.gamma, &shape);
    let beta_b = g.broadcast(ln.beta, &shape);
    let scaled = g.mul(normed, gamma_b);
    g.add(scaled, beta_b)
}

/// Multi-head self-attention over `(B, T, C)`.
pub fn self_attention(g: &mut Graph, x: NodeId, attn: &AttnNodes, num_heads: usize) -> NodeId {
    let shape = g.shape(x).to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    assert!(c % num_heads == 0);
    let hd = c / num_heads;

    let flat = g.reshape(x, vec![b * t, c]);
    let split = |g: &mut Graph, w, bias| {
        let y = g.linear(flat, w, bias);
        let y = g.reshape(y, vec![b, t, num_heads, hd]);
        g.permute(y, vec![0, 2, 1, 3]) // (B, H, T, hd)
    };
    let q = split(g, attn.wq, attn.bq);
    let k = split(g, attn.wk, attn.bk);
    let v = split(g, attn.wv, attn.bv);

    let kt = g.permute(k, vec![0, 1, 3, 2]); // (B, H, hd, T)
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let probs = g.softmax_last(scores);
    let ctx = g.matmul(probs, v); // (B, H, T, hd)
    let ctx = g.permute(ctx, vec![0, 2, 1, 3]);
    let ctx = g.reshape(ctx, vec![b * t, c]);
    let out = g.linear(ctx, attn.wo, attn.bo);
    g.reshape(out, vec![b, t, c])
}

/// Two-layer GELU feed-forward over `(B, T, C)`.
pub fn feed_forward(g: &mut Graph, x: NodeId, f: &FfnNodes) -> NodeId {
    let shape = g.shape(x).to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, vec![b * t, c]);
    let h = g.linear(flat, f.w1, f.b1);
    let h = g.gelu(h);
    let out = g.linear(h, f.w2, f.b2);
    g.reshape(out, vec![b, t, c])
}

/// `x + attn(ln(x))`
pub fn attn_sublayer(
    g: &mut Graph,
    x: NodeId,
    ln: &LnNodes,
    attn: &AttnNodes,
    num_heads: usize,
) -> NodeId {
    let normed = layer_norm(g, x, ln);
    let a = self_attention(g, normed, attn, num_heads);
    g.add(x, a)
}

/// `x + ffn(ln(x))`
pub fn ffn_sublayer(g: &mut Graph, x: NodeId, ln: &LnNodes, f: &FfnNodes) -> NodeId {
    let normed = layer_norm(g, x, ln);
    let y = feed_forward(g, normed, f);
    g.add(x, y)
}
