//! Fully trainable mask decoder.
//!
//! The dense prompt enters by zero-initialized per-token affine fusion,
//! `e' = e + W_f * prompt + b_f`, so a fresh decoder ignores the prompt
//! exactly. Two transformer blocks over tokens and a per-token linear head
//! produce per-label logits at token resolution; bilinear upsampling (corner
//! aligned) lifts them to image resolution.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, AttnNodes, FfnNodes, LnNodes};
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;

pub const DECODER_DEPTH: usize = 2;
const INIT_STD: f64 = 0.02;

/// Populate the store with all decoder parameters (every one trainable).
pub fn init_decoder_params(
    store: &mut ParameterStore,
    embed_dim: usize,
    num_labels: usize,
    seed: u64,
) -> Result<()> {
    let c = embed_dim;
    let mut init_normal = |store: &mut ParameterStore, name: String, shape: &[usize]| -> Result<()> {
        let mut r = rng::stream(seed, &name, 0);
        let n: usize = shape.iter().product();
        store.insert(&name, Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, n, INIT_STD))?)
    };

    store.insert("decoder.fusion.weight", Tensor::zeros(&[c, c]))?;
    store.insert("decoder.fusion.bias", Tensor::zeros(&[c]))?;

    for i in 0..DECODER_DEPTH {
        let p = format!("decoder.block{i}");
        store.insert(&format!("{p}.ln1.gamma"), Tensor::full(&[c], 1.0))?;
        store.insert(&format!("{p}.ln1.beta"), Tensor::zeros(&[c]))?;
        for w in ["wq", "wk", "wv", "wo"] {
            init_normal(store, format!("{p}.attn.{w}"), &[c, c])?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}.attn.{b}"), Tensor::zeros(&[c]))?;
        }
        store.insert(&format!("{p}.ln2.gamma"), Tensor::full(&[c], 1.0))?;
        store.insert(&format!("{p}.ln2.beta"), Tensor::zeros(&[c]))?;
        init_normal(store, format!("{p}.ffn.w1"), &[c, 4 * c])?;
        store.insert(&format!("{p}.ffn.b1"), Tensor::zeros(&[4 * c]))?;
        init_normal(store, format!("{p}.ffn.w2"), &[4 * c, c])?;
        store.insert(&format!("{p}.ffn.b2"), Tensor::zeros(&[c]))?;
    }

    init_normal(store, "decoder.head.weight".to_string(), &[c, num_labels])?;
    store.insert("decoder.head.bias", Tensor::zeros(&[num_labels]))?;
    Ok(())
}

struct DecoderBlock {
    ln1: LnNodes,
    attn: AttnNodes,
    ln2: LnNodes,
    ffn: FfnNodes,
}

pub struct DecoderNodes {
    fusion_weight: NodeId,
    fusion_bias: NodeId,
    blocks: Vec<DecoderBlock>,
    head_weight: NodeId,
    head_bias: NodeId,
    num_heads: usize,
}

impl DecoderNodes {
    pub fn from_store(
        g: &mut Graph,
        store: &ParameterStore,
        num_heads: usize,
        reg: &mut nn::LeafRegistry,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(DECODER_DEPTH);
        for i in 0..DECODER_DEPTH {
            let p = format!("decoder.block{i}");
            blocks.push(DecoderBlock {
                ln1: LnNodes {
                    gamma: reg.node(g, store, &format!("{p}.ln1.gamma"))?,
                    beta: reg.node(g, store, &format!("{p}.ln1.beta"))?,
                },
                attn: AttnNodes {
                    wq: reg.node(g, store, &format!("{p}.attn.wq"))?,
                    bq: reg.node(g, store, &format!("{p}.attn.bq"))?,
                    wk: reg.node(g, store, &format!("{p}.attn.wk"))?,
                    bk: reg.node(g, store, &format!("{p}.attn.bk"))?,
                    wv: reg.node(g, store, &format!("{p}.attn.wv"))?,
                    bv: reg.node(g, store, &format!("{p}.attn.bv"))?,
                    wo: reg.node(g, store, &format!("{p}.attn.wo"))?,
                    bo: reg.node(g, store, &format!("{p}.attn.bo"))?,
                },
                ln2: LnNodes {
                    gamma: reg.node(g, store, &format!("{p}.ln2.gamma"))?,
                    beta: reg.node(g, store, &format!("{p}.ln2.beta"))?,
                },
                ffn: FfnNodes {
                    w1: reg.node(g, store, &format!("{p}.ffn.w1"))?,
                    b1: reg.node(g, store, &format!("{p}.ffn.b1"))?,
                    w2: reg.node(g, store, &format!("{p}.ffn.w2"))?,
                    b2: reg.node(g, store, &format!("{p}.ffn.b2"))?,
                },
            });
        }
        Ok(DecoderNodes {
            fusion_weight: reg.node(g, store, "decoder.fusion.weight")?,
            fusion_bias: reg.node(g, store, "decoder.fusion.bias")?,
            blocks,
            head_weight: reg.node(g, store, "decoder.head.weight")?,
            head_bias: reg.node(g, store, "decoder.head.bias")?,
            num_heads,
        })
    }
}

/// Decode the embedding and dense prompt into per-label logits at token
/// resolution, `(B, h, w, K)`.
pub fn decode(
    g: &mut Graph,
    e: NodeId,
    prompt: NodeId,
    nodes: &DecoderNodes,
) -> Result<NodeId> {
    let shape = g.shape(e).to_vec();
    if g.shape(prompt) != &shape[..] {
        return Err(Error::invalid(format!(
            "decode: embedding shape {:?} and prompt shape {:?} differ",
            shape,
            g.shape(prompt)
        )));
    }
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "decode expects (B, h, w, C), got {:?}",
            shape
        )));
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let tokens = h * w;

    let prompt_flat = g.reshape(prompt, vec![b * tokens, c]);
    let fused = g.linear(prompt_flat, nodes.fusion_weight, nodes.fusion_bias);
    let fused = g.reshape(fused, vec![b, h, w, c]);
    let mut x = g.add(e, fused);
    x = g.reshape(x, vec![b, tokens, c]);

    for block in &nodes.blocks {
        x = nn::attn_sublayer(g, x, &block.ln1, &block.attn, nodes.num_heads);
        x = nn::ffn_sublayer(g, x, &block.ln2, &block.ffn);
    }

    let flat = g.reshape(x, vec![b * tokens, c]);
    let logits = g.linear(flat, nodes.head_weight, nodes.head_bias);
    let k = g.shape(nodes.head_weight)[1];
    Ok(g.reshape(logits, vec![b, h, w, k]))
}

/// Bilinear (corner-aligned) upsampling of logits to image resolution.
pub fn upsample_logits(g: &mut Graph, logits: NodeId, height: usize, width: usize) -> Result<NodeId> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "upsample target {height}x{width} must be positive"
        )));
    }
    if g.shape(logits).len() != 4 {
        return Err(Error::invalid(format!(
            "upsample_logits expects (B, h, w, K), got {:?}",
            g.shape(logits)
        )));
    }
    Ok(g.bilinear_upsample(logits, height, width))
}

/// Per-pixel argmax over labels; ties break toward the smaller label index.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "predict_mask expects (B, H, W, K), got {:?}",
            s
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NumericFailure("logits not finite".into()));
    }
    let k = s[3];
    let pixels = s[0] * s[1] * s[2];
    let mut out = Vec::with_capacity(pixels);
    for p in 0..pixels {
        let row = &logits.data()[p * k..(p + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}
