//! ViT-style image encoder with a frozen core, a trainable low-level
//! projection, and two adapters injected per block.
//!
//! Block layout: pre-norm attention sublayer, adapter, pre-norm feed-forward
//! sublayer, adapter. The low-level feature `F_low` is projected once from
//! the patch embedding `e0` and shared by every adapter. Adapter
//! up-projections are zero-initialized, so a freshly built encoder equals the
//! frozen backbone exactly.

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterNodes};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, AttnNodes, FfnNodes, LnNodes};
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;

fn default_in_channels() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input image side length in pixels (square images).
    pub image_size: usize,
    pub patch_size: usize,
    /// Channel count C.
    pub embed_dim: usize,
    /// Transformer block count L.
    pub depth: usize,
    pub num_heads: usize,
    /// Adapter bottleneck width r.
    pub adapter_rank: usize,
    /// Segmentation label count K, including background.
    pub num_labels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl EncoderConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            adapter_rank: 4,
            num_labels: 2,
            in_channels: 1,
        }
    }

    /// ViT-B-scale preset for optional pretrained-checkpoint import.
    pub fn vitb() -> Self {
        EncoderConfig {
            image_size: 384,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            adapter_rank: 4,
            num_labels: 2,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("image_size and patch_size must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.adapter_rank < 1 || self.adapter_rank >= self.embed_dim {
            return Err(Error::Config(format!(
                "adapter_rank {} must satisfy 1 <= rank < embed_dim {}",
                self.adapter_rank, self.embed_dim
            )));
        }
        if self.num_labels < 2 {
            return Err(Error::Config("num_labels must be at least 2".into()));
        }
        if self.depth == 0 || self.in_channels == 0 {
            return Err(Error::Config("depth and in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Token-grid side length (constant across all blocks).
    pub fn token_grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

const CORE_INIT_STD: f64 = 0.02;
const ADAPTER_DOWN_STD: f64 = 0.02;

fn init_normal(store: &mut ParameterStore, name: &str, shape: &[usize], std: f64, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, name, 0);
    let n: usize = shape.iter().product();
    store.insert(name, Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, n, std))?)
}

fn init_const(store: &mut ParameterStore, name: &str, shape: &[usize], value: f64) -> Result<()> {
    store.insert(name, Tensor::full(shape, value))
}

/// Populate the store with all encoder parameters. Adapter up-projections
/// start at zero; the positional embedding is zero-initialized and frozen.
/// The low-level projection is created only when `with_low_level` is set.
pub fn init_encoder_params(
    store: &mut ParameterStore,
    cfg: &EncoderConfig,
    seed: u64,
    with_low_level: bool,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let r = cfg.adapter_rank;
    let t = cfg.token_grid();
    let patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels;

    init_normal(store, "encoder.patch_embed.weight", &[patch_in, c], CORE_INIT_STD, seed)?;
    init_const(store, "encoder.patch_embed.bias", &[c], 0.0)?;
    init_const(store, "encoder.pos_embed", &[1, t, t, c], 0.0)?;

    if with_low_level {
        init_normal(store, "encoder.low_level_proj.weight", &[c, c], CORE_INIT_STD, seed)?;
        init_const(store, "encoder.low_level_proj.bias", &[c], 0.0)?;
    }

    for i in 0..cfg.depth {
        let p = format!("encoder.block{i}");
        init_const(store, &format!("{p}.ln1.gamma"), &[c], 1.0)?;
        init_const(store, &format!("{p}.ln1.beta"), &[c], 0.0)?;
        for w in ["wq", "wk", "wv", "wo"] {
            init_normal(store, &format!("{p}.attn.{w}"), &[c, c], CORE_INIT_STD, seed)?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            init_const(store, &format!("{p}.attn.{b}"), &[c], 0.0)?;
        }
        init_const(store, &format!("{p}.ln2.gamma"), &[c], 1.0)?;
        init_const(store, &format!("{p}.ln2.beta"), &[c], 0.0)?;
        init_normal(store, &format!("{p}.ffn.w1"), &[c, 4 * c], CORE_INIT_STD, seed)?;
        init_const(store, &format!("{p}.ffn.b1"), &[4 * c], 0.0)?;
        init_normal(store, &format!("{p}.ffn.w2"), &[4 * c, c], CORE_INIT_STD, seed)?;
        init_const(store, &format!("{p}.ffn.b2"), &[c], 0.0)?;

        for a in ["adapter1", "adapter2"] {
            init_normal(store, &format!("{p}.{a}.down_weight"), &[c, r], ADAPTER_DOWN_STD, seed)?;
            init_const(store, &format!("{p}.{a}.down_bias"), &[r], 0.0)?;
            init_const(store, &format!("{p}.{a}.up_weight"), &[r, c], 0.0)?;
            init_const(store, &format!("{p}.{a}.up_bias"), &[c], 0.0)?;
        }
    }
    Ok(())
}

/// Closed-form trainable parameter count contributed by the encoder
/// (adapters plus, when present, the low-level projection).
pub fn encoder_trainable_count(cfg: &EncoderConfig, with_low_level: bool) -> usize {
    let c = cfg.embed_dim;
    let r = cfg.adapter_rank;
    let per_adapter = c * r + r + r * c + c;
    let adapters = cfg.depth * 2 * per_adapter;
    let proj = if with_low_level { c * c + c } else { 0 };
    adapters + proj
}

struct BlockNodes {
    ln1: LnNodes,
    attn: AttnNodes,
    ln2: LnNodes,
    ffn: FfnNodes,
    adapter1: AdapterNodes,
    adapter2: AdapterNodes,
}

pub struct EncoderNodes {
    pub patch_weight: NodeId,
    pub patch_bias: NodeId,
    pub pos_embed: NodeId,
    pub low_level_proj: Option<(NodeId, NodeId)>,
    blocks: Vec<BlockNodes>,
}

impl EncoderNodes {
    pub fn from_store(
        g: &mut Graph,
        store: &ParameterStore,
        cfg: &EncoderConfig,
        reg: &mut nn::LeafRegistry,
    ) -> Result<Self> {
        let patch_weight = reg.node(g, store, "encoder.patch_embed.weight")?;
        let patch_bias = reg.node(g, store, "encoder.patch_embed.bias")?;
        let pos_embed = reg.node(g, store, "encoder.pos_embed")?;
        let low_level_proj = if store.contains("encoder.low_level_proj.weight") {
            Some((
                reg.node(g, store, "encoder.low_level_proj.weight")?,
                reg.node(g, store, "encoder.low_level_proj.bias")?,
            ))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.block{i}");
            let mut adapter = |g: &mut Graph, reg: &mut nn::LeafRegistry, a: &str| -> Result<AdapterNodes> {
                Ok(AdapterNodes {
                    down_weight: reg.node(g, store, &format!("{p}.{a}.down_weight"))?,
                    down_bias: reg.node(g, store, &format!("{p}.{a}.down_bias"))?,
                    up_weight: reg.node(g, store, &format!("{p}.{a}.up_weight"))?,
                    up_bias: reg.node(g, store, &format!("{p}.{a}.up_bias"))?,
                })
            };
            let adapter1 = adapter(g, reg, "adapter1")?;
            let adapter2 = adapter(g, reg, "adapter2")?;
            blocks.push(BlockNodes {
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
                adapter1,
                adapter2,
            });
        }
        Ok(EncoderNodes {
            patch_weight,
            patch_bias,
            pos_embed,
            low_level_proj,
            blocks,
        })
    }
}

fn check_image_shape(shape: &[usize], cfg: &EncoderConfig) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "image must be rank 4 (batch, H, W, channels), got {:?}",
            shape
        )));
    }
    if shape[1] != cfg.image_size {
        return Err(Error::invalid(format!(
            "image axis 1 (height) is {}, expected {}",
            shape[1], cfg.image_size
        )));
    }
    if shape[2] != cfg.image_size {
        return Err(Error::invalid(format!(
            "image axis 2 (width) is {}, expected {}",
            shape[2], cfg.image_size
        )));
    }
    if shape[3] != cfg.in_channels {
        return Err(Error::invalid(format!(
            "image axis 3 (channels) is {}, expected {}",
            shape[3], cfg.in_channels
        )));
    }
    Ok(())
}

/// Frozen patch embedding: non-overlapping patches, linear projection, plus
/// the positional embedding. Returns `e0` of shape `(B, t, t, C)`.
pub fn patch_embed(
    g: &mut Graph,
    image: NodeId,
    nodes: &EncoderNodes,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    check_image_shape(g.shape(image), cfg)?;
    let b = g.shape(image)[0];
    let t = cfg.token_grid();
    let c = cfg.embed_dim;
    let patches = g.extract_patches(image, cfg.patch_size);
    let pc = g.shape(patches)[3];
    let flat = g.reshape(patches, vec![b * t * t, pc]);
    let projected = g.linear(flat, nodes.patch_weight, nodes.patch_bias);
    let e0 = g.reshape(projected, vec![b, t, t, c]);
    let pos = g.broadcast(nodes.pos_embed, &[b, t, t, c]);
    Ok(g.add(e0, pos))
}

/// Trainable per-token affine projection of `e0` into the shared low-level
/// feature `F_low`.
pub fn low_level_project(g: &mut Graph, e0: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
    let shape = g.shape(e0).to_vec();
    let c = *shape.last().unwrap();
    let tokens: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(e0, vec![tokens, c]);
    let projected = g.linear(flat, weight, bias);
    g.reshape(projected, shape)
}

/// Adapter placement toggles for the encoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderMode {
    /// Run the per-block adapters at all (false = frozen backbone).
    pub with_adapters: bool,
    /// Fuse the shared low-level feature into each adapter input.
    pub low_level_fusion: bool,
    /// Apply the channel filter inside each adapter.
    pub channel_filter: bool,
}

impl EncoderMode {
    pub fn full() -> Self {
        EncoderMode {
            with_adapters: true,
            low_level_fusion: true,
            channel_filter: true,
        }
    }

    pub fn frozen_backbone() -> Self {
        EncoderMode {
            with_adapters: false,
            low_level_fusion: false,
            channel_filter: false,
        }
    }
}

/// Full encoder forward pass: `e0`, shared `F_low`, then `depth` transformer
/// blocks with two adapters each. Returns the final embedding `(B, t, t, C)`.
pub fn encoder_forward(
    g: &mut Graph,
    image: NodeId,
    nodes: &EncoderNodes,
    cfg: &EncoderConfig,
    mode: EncoderMode,
) -> Result<NodeId> {
    let e0 = patch_embed(g, image, nodes, cfg)?;
    let b = g.shape(e0)[0];
    let t = cfg.token_grid();
    let c = cfg.embed_dim;
    let tokens = t * t;

    let f_low = if mode.with_adapters && mode.low_level_fusion {
        let (w, bias) = nodes.low_level_proj.ok_or_else(|| {
            Error::Inventory("low-level fusion enabled but encoder.low_level_proj is absent".into())
        })?;
        let fl = low_level_project(g, e0, w, bias);
        Some(g.reshape(fl, vec![b, tokens, c]))
    } else {
        None
    };

    let mut x = g.reshape(e0, vec![b, tokens, c]);
    for (i, block) in nodes.blocks.iter().enumerate() {
        x = nn::attn_sublayer(g, x, &block.ln1, &block.attn, cfg.num_heads);
        if mode.with_adapters {
            x = adapter::adapter_apply(g, x, f_low, mode.channel_filter, &block.adapter1)?;
        }
        x = nn::ffn_sublayer(g, x, &block.ln2, &block.ffn);
        if mode.with_adapters {
            x = adapter::adapter_apply(g, x, f_low, mode.channel_filter, &block.adapter2)?;
        }
        if !g.value(x).is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite activation in encoder block {i}"
            )));
        }
    }
    Ok(g.reshape(x, vec![b, t, t, c]))
}

/// Optional import of pretrained encoder weights from a checkpoint container.
/// Only frozen `encoder.*` entries are replaced; every imported array must
/// match the existing shape exactly (mismatches are rejected, not adapted).
pub fn import_encoder_weights(store: &mut ParameterStore, path: &std::path::Path) -> Result<usize> {
    let arrays = crate::checkpoint::read_raw_arrays(path)?;
    let mut imported = 0;
    for (name, tensor) in arrays {
        if !name.starts_with("encoder.") {
            continue;
        }
        let entry = store.get(&name)?;
        if !entry.frozen {
            continue;
        }
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::invalid(format!(
                "imported weight {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        store.set_tensor(&name, tensor)?;
        imported += 1;
    }
    if imported == 0 {
        return Err(Error::Inventory(
            "checkpoint contains no matching encoder weights".into(),
        ));
    }
    Ok(imported)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store(with_low_level: bool) -> ParameterStore {
        let mut store = ParameterStore::new();
        init_encoder_params(&mut store, &EncoderConfig::toy(), 42, with_low_level).unwrap();
        store
    }

    fn toy_image(b: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "image", 0);
        Tensor::new(
            vec![b, 64, 64, 1],
            (0..b * 64 * 64).map(|_| 0.5 + 0.2 * rng::normal(&mut r)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::toy().validate().is_ok());
        assert!(EncoderConfig::vitb().validate().is_ok());
        let mut bad = EncoderConfig::toy();
        bad.patch_size = 7;
        assert!(bad.validate().is_err());
        let mut bad = EncoderConfig::toy();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = EncoderConfig::toy();
        bad.adapter_rank = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_embed_shape_and_zero_case() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(true);
        let mut g = Graph::new();
        let mut reg = nn::LeafRegistry::new();
        let nodes = EncoderNodes::from_store(&mut g, &store, &cfg, &mut reg).unwrap();
        let img = g.constant(toy_image(1, 1));
        let e0 = patch_embed(&mut g, img, &nodes, &cfg).unwrap();
        assert_eq!(g.shape(e0), &[1, 8, 8, 16]);

        // all-zero image with zero bias and zero positional embedding -> zeros
        let zero_img = g.constant(Tensor::zeros(&[1, 64, 64, 1]));
        let e0z = patch_embed(&mut g, zero_img, &nodes, &cfg).unwrap();
        assert!(g.value(e0z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_bad_axes() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(true);
        let mut g = Graph::new();
        let mut reg = nn::LeafRegistry::new();
        let nodes = EncoderNodes::from_store(&mut g, &store, &cfg, &mut reg).unwrap();
        let img = g.constant(Tensor::zeros(&[1, 32, 64, 1]));
        let err = patch_embed(&mut g, img, &nodes, &cfg).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn low_level_project_identity_and_bias_cases() {
        let mut g = Graph::new();
        let e0 = g.constant(Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap());
        // identity weight, zero bias
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = g.constant(Tensor::zeros(&[2]));
        let out = low_level_project(&mut g, e0, eye, zb);
        assert_eq!(g.value(out).data(), g.value(e0).data());
        // zero weight, bias b broadcasts
        let zw = g.constant(Tensor::zeros(&[2, 2]));
        let bias = g.constant(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let out = low_level_project(&mut g, e0, zw, bias);
        for tk in 0..4 {
            assert_eq!(g.value(out).data()[tk * 2], 3.0);
            assert_eq!(g.value(out).data()[tk * 2 + 1], -1.0);
        }
    }

    #[test]
    fn zero_adapters_match_frozen_backbone_bitwise() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(true);
        let img = toy_image(2, 5);

        let mut g = Graph::new();
        let mut reg = nn::LeafRegistry::new();
        let nodes = EncoderNodes::from_store(&mut g, &store, &cfg, &mut reg).unwrap();
        let image = g.constant(img.clone());
        let with = encoder_forward(&mut g, image, &nodes, &cfg, EncoderMode::full()).unwrap();
        let frozen = encoder_forward(&mut g, image, &nodes, &cfg, EncoderMode::frozen_backbone()).unwrap();
        assert!(g.value(with).bit_eq(g.value(frozen)));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(true);
        let img = toy_image(1, 9);
        let run = || {
            let mut g = Graph::new();
            let mut reg = nn::LeafRegistry::new();
        let nodes = EncoderNodes::from_store(&mut g, &store, &cfg, &mut reg).unwrap();
            let image = g.constant(img.clone());
            let out = encoder_forward(&mut g, image, &nodes, &cfg, EncoderMode::full()).unwrap();
            g.value(out).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(true);
        let enumerated = store.count_matching(|n| {
            n.starts_with("encoder.") && crate::params::name_is_trainable(n) == Some(true)
        });
        // 2 adapters/block x (C*r + r + r*C + C) per block, plus C*C + C
        assert_eq!(enumerated, encoder_trainable_count(&cfg, true));
        assert_eq!(enumerated, 2 * 2 * (16 * 4 + 4 + 4 * 16 + 16) + 16 * 16 + 16);
    }
}
