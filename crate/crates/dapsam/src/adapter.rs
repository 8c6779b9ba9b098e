//! Generalized adapter: low-level feature fusion, parameter-free channel
//! attention filtering, and a low-rank residual bottleneck.
//!
//! The filter gates each channel by `sigmoid(GAP + GMP)` of the fused feature,
//! pooling over spatial positions only; it never mixes values across
//! positions and carries no weights. The bottleneck applies
//! `F + up(GELU(down(F_filtered)))` per token, so zero up-projection weights
//! make the adapter an exact identity.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Graph nodes for one adapter's four parameter arrays.
pub struct AdapterNodes {
    pub down_weight: NodeId, // (C, r)
    pub down_bias: NodeId,   // (r,)
    pub up_weight: NodeId,   // (r, C)
    pub up_bias: NodeId,     // (C,)
}

/// Elementwise sum of an intermediate feature and the shared low-level
/// feature. Shapes must match exactly.
pub fn fuse_low_level(g: &mut Graph, f: NodeId, f_low: NodeId) -> Result<NodeId> {
    if g.shape(f) != g.shape(f_low) {
        return Err(Error::invalid(format!(
            "fuse_low_level shape mismatch: F is {:?}, F_low is {:?}",
            g.shape(f),
            g.shape(f_low)
        )));
    }
    Ok(g.add(f, f_low))
}

/// Parameter-free channel filter: per-channel mask `sigmoid(GAP + GMP)`
/// pooled over all axes between batch and channel, applied by broadcast
/// multiplication. Batch entries are filtered independently.
pub fn channel_filter(g: &mut Graph, f_fuse: NodeId) -> Result<NodeId> {
    let shape = g.shape(f_fuse).to_vec();
    if shape.len() < 3 {
        return Err(Error::invalid(format!(
            "channel_filter expects (batch, spatial.., channels), got {:?}",
            shape
        )));
    }
    if !g.value(f_fuse).is_finite() {
        return Err(Error::NumericFailure("channel_filter input not finite".into()));
    }
    let spatial: Vec<usize> = (1..shape.len() - 1).collect();
    let gap = g.mean_axes(f_fuse, &spatial, true);
    let gmp = g.max_axes(f_fuse, &spatial, true);
    let pooled = g.add(gap, gmp);
    let mask = g.sigmoid(pooled);
    let mask_b = g.broadcast(mask, &shape);
    Ok(g.mul(f_fuse, mask_b))
}

/// Residual bottleneck on an already-prepared feature: per-token
/// `x + up(GELU(down(x_in)))` where `x` is the residual source.
fn bottleneck_residual(
    g: &mut Graph,
    residual: NodeId,
    input: NodeId,
    params: &AdapterNodes,
) -> NodeId {
    let shape = g.shape(input).to_vec();
    let c = *shape.last().unwrap();
    let tokens: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(input, vec![tokens, c]);
    let down = g.linear(flat, params.down_weight, params.down_bias);
    let act = g.gelu(down);
    let up = g.linear(act, params.up_weight, params.up_bias);
    let up = g.reshape(up, shape);
    g.add(residual, up)
}

/// Full generalized adapter: fuse, filter, then the residual bottleneck.
pub fn adapter_forward(
    g: &mut Graph,
    f: NodeId,
    f_low: NodeId,
    params: &AdapterNodes,
) -> Result<NodeId> {
    adapter_apply(g, f, Some(f_low), true, params)
}

/// Adapter with component toggles: `f_low = None` skips low-level fusion
/// (vanilla adapter input is `F` itself); `use_filter = false` skips the
/// channel filter. The residual source is always the original `F`.
pub fn adapter_apply(
    g: &mut Graph,
    f: NodeId,
    f_low: Option<NodeId>,
    use_filter: bool,
    params: &AdapterNodes,
) -> Result<NodeId> {
    let mut x = match f_low {
        Some(low) => fuse_low_level(g, f, low)?,
        None => f,
    };
    if use_filter {
        x = channel_filter(g, x)?;
    }
    let out = bottleneck_residual(g, f, x, params);
    if !g.value(out).is_finite() {
        return Err(Error::NumericFailure("adapter output not finite".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn leaf(g: &mut Graph, shape: &[usize], seed: u64) -> NodeId {
        let mut r = rng::stream(seed, "adapter-test", 0);
        let n: usize = shape.iter().product();
        g.leaf(
            Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, n, 1.0)).unwrap(),
            false,
        )
    }

    fn adapter_nodes(g: &mut Graph, c: usize, r: usize, seed: u64, zero_up: bool) -> AdapterNodes {
        let mut rg = rng::stream(seed, "adapter-params", 0);
        AdapterNodes {
            down_weight: g.leaf(
                Tensor::new(vec![c, r], rng::normal_vec(&mut rg, c * r, 0.5)).unwrap(),
                true,
            ),
            down_bias: g.leaf(
                Tensor::new(vec![r], rng::normal_vec(&mut rg, r, 0.5)).unwrap(),
                true,
            ),
            up_weight: if zero_up {
                g.leaf(Tensor::zeros(&[r, c]), true)
            } else {
                g.leaf(
                    Tensor::new(vec![r, c], rng::normal_vec(&mut rg, r * c, 0.5)).unwrap(),
                    true,
                )
            },
            up_bias: g.leaf(Tensor::zeros(&[c]), true),
        }
    }

    #[test]
    fn fuse_is_elementwise_sum_and_checks_shapes() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
        let x = leaf(&mut g, &[1, 2, 2, 3], 7);
        let fused = fuse_low_level(&mut g, zero, x).unwrap();
        assert_eq!(g.value(fused).data(), g.value(x).data());

        let doubled = fuse_low_level(&mut g, x, x).unwrap();
        let expect: Vec<f64> = g.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(doubled).data(), &expect[..]);

        let other = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(fuse_low_level(&mut g, x, other).is_err());
    }

    #[test]
    fn filter_zero_input_stays_zero_with_half_mask() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let out = channel_filter(&mut g, zero).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_all_ones_channel_scales_by_sigmoid_two() {
        // GAP = 1, GMP = 1, mask = sigmoid(2)
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[1, 3, 3, 1], 1.0));
        let out = channel_filter(&mut g, ones).unwrap();
        for &v in g.value(out).data() {
            assert!((v - 0.8807970779778823).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_treats_channels_independently() {
        // ch0 all zeros, ch1 all ones
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[1, 2, 2, 2]);
        for p in 0..4 {
            t.data_mut()[p * 2 + 1] = 1.0;
        }
        let x = g.constant(t);
        let out = channel_filter(&mut g, x).unwrap();
        for p in 0..4 {
            assert_eq!(g.value(out).data()[p * 2], 0.0);
            assert!((g.value(out).data()[p * 2 + 1] - 0.8807970779778823).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_attenuates_strictly() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3, 3, 4], 9);
        let out = channel_filter(&mut g, x).unwrap();
        for (o, i) in g.value(out).data().iter().zip(g.value(x).data()) {
            assert!(o.abs() < i.abs() || *i == 0.0);
        }
    }

    #[test]
    fn filter_is_spatial_permutation_equivariant() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 2, 3], 11);
        let out = channel_filter(&mut g, x).unwrap();
        // permute spatial positions: swap the two rows
        let xv = g.value(x).clone();
        let mut perm = Tensor::zeros(&[1, 2, 2, 3]);
        for w in 0..2 {
            for c in 0..3 {
                perm.set(&[0, 0, w, c], xv.get(&[0, 1, w, c]));
                perm.set(&[0, 1, w, c], xv.get(&[0, 0, w, c]));
            }
        }
        let xp = g.leaf(perm, false);
        let outp = channel_filter(&mut g, xp).unwrap();
        let ov = g.value(out);
        let opv = g.value(outp);
        for w in 0..2 {
            for c in 0..3 {
                assert_eq!(ov.get(&[0, 0, w, c]), opv.get(&[0, 1, w, c]));
                assert_eq!(ov.get(&[0, 1, w, c]), opv.get(&[0, 0, w, c]));
            }
        }
    }

    #[test]
    fn filter_preserves_impulses() {
        // single nonzero position stays the only nonzero position
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[1, 3, 3, 1]);
        t.set(&[0, 1, 2, 0], 2.5);
        let x = g.constant(t);
        let out = channel_filter(&mut g, x).unwrap();
        for (i, &v) in g.value(out).data().iter().enumerate() {
            if i == 5 {
                assert!(v > 0.0 && v < 2.5);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn zero_up_projection_is_bit_exact_identity() {
        let mut g = Graph::new();
        let f = leaf(&mut g, &[2, 3, 3, 6], 13);
        let f_low = leaf(&mut g, &[2, 3, 3, 6], 14);
        let params = adapter_nodes(&mut g, 6, 2, 15, true);
        let out = adapter_forward(&mut g, f, f_low, &params).unwrap();
        assert!(g.value(out).bit_eq(g.value(f)));
    }

    #[test]
    fn bottleneck_width_matches_rank() {
        let mut g = Graph::new();
        let f = leaf(&mut g, &[1, 2, 2, 16], 17);
        let f_low = leaf(&mut g, &[1, 2, 2, 16], 18);
        let params = adapter_nodes(&mut g, 16, 4, 19, false);
        assert_eq!(g.shape(params.down_weight), &[16, 4]);
        let out = adapter_forward(&mut g, f, f_low, &params).unwrap();
        assert_eq!(g.shape(out), &[1, 2, 2, 16]);
    }
}
