//! Training objective: `(1 - lambda) * CE + lambda * Dice`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

fn default_lambda() -> f64 {
    0.8
}

fn default_dice_epsilon() -> f64 {
    1e-5
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_dice_epsilon")]
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: default_lambda(),
            dice_epsilon: default_dice_epsilon(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.dice_epsilon <= 0.0 {
            return Err(Error::Config("dice_epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn check_targets(pixels: usize, k: usize, target: &[u8]) -> Result<()> {
    if target.len() != pixels {
        return Err(Error::invalid(format!(
            "target has {} labels for {} pixels",
            target.len(),
            pixels
        )));
    }
    if let Some(bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!(
            "target label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn one_hot(target: &[u8], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[target.len(), k]);
    for (i, &lbl) in target.iter().enumerate() {
        t.data_mut()[i * k + lbl as usize] = 1.0;
    }
    t
}

/// Mean over pixels of `-log softmax` probability of the true label.
/// `logits` may be any shape with labels as the last axis.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, target: &[u8]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().ok_or_else(|| Error::invalid("logits need a label axis"))?;
    let pixels = g.value(logits).numel() / k;
    check_targets(pixels, k, target)?;

    let log_probs = g.log_softmax_last(logits);
    let flat = g.reshape(log_probs, vec![pixels, k]);
    let onehot = g.constant(one_hot(target, k));
    let picked = g.mul(flat, onehot);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / pixels as f64))
}

/// Soft Dice loss over softmax probabilities: one minus the mean over
/// foreground labels of `(2*intersection + eps) / (psum + gsum + eps)`,
/// with sums taken over every pixel in the batch.
pub fn dice_loss(g: &mut Graph, probs: NodeId, target: &[u8], cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.shape(probs).to_vec();
    let k = *shape.last().ok_or_else(|| Error::invalid("probs need a label axis"))?;
    if k < 2 {
        return Err(Error::invalid("dice loss needs at least one foreground label"));
    }
    let pixels = g.value(probs).numel() / k;
    check_targets(pixels, k, target)?;

    let onehot_t = one_hot(target, k);
    let mut gsum = vec![0.0; k];
    for (i, &lbl) in target.iter().enumerate() {
        let _ = i;
        gsum[lbl as usize] += 1.0;
    }

    let flat = g.reshape(probs, vec![pixels, k]);
    let onehot = g.constant(onehot_t);
    let prod = g.mul(flat, onehot);
    let inter = g.sum_axes(prod, &[0], false); // (K,)
    let psum = g.sum_axes(flat, &[0], false); // (K,)
    let gsum_n = g.constant(Tensor::new(vec![k], gsum).unwrap());

    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, cfg.dice_epsilon);
    let den = g.add(psum, gsum_n);
    let den = g.add_scalar(den, cfg.dice_epsilon);
    let ratio = g.div(num, den);

    // average over foreground labels only
    let mut fg = vec![0.0; k];
    for w in fg.iter_mut().skip(1) {
        *w = 1.0 / (k - 1) as f64;
    }
    let fg_n = g.constant(Tensor::new(vec![k], fg).unwrap());
    let weighted = g.mul(ratio, fg_n);
    let mean_dice = g.sum_all(weighted);
    let neg = g.scale(mean_dice, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `(1 - lambda) * CE + lambda * Dice`, with Dice computed on
/// `softmax(logits)`. Reduces exactly to CE at `lambda = 0` and to Dice at
/// `lambda = 1`.
pub fn combined_loss(
    g: &mut Graph,
    logits: NodeId,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let ce = cross_entropy(g, logits, target)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let probs = g.softmax_last(logits);
    let dice = dice_loss(g, probs, target, cfg)?;
    if cfg.lambda == 1.0 {
        return Ok(dice);
    }
    let ce_part = g.scale(ce, 1.0 - cfg.lambda);
    let dice_part = g.scale(dice, cfg.lambda);
    Ok(g.add(ce_part, dice_part))
}

/// Eager convenience: build a throwaway graph and return the value.
pub fn cross_entropy_scalar(logits: &Tensor, target: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = cross_entropy(&mut g, l, target)?;
    Ok(g.value(loss).item())
}

pub fn dice_loss_scalar(probs: &Tensor, target: &[u8], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = dice_loss(&mut g, p, target, cfg)?;
    Ok(g.value(loss).item())
}

pub fn combined_loss_scalar(logits: &Tensor, target: &[u8], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = combined_loss(&mut g, l, target, cfg)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[1, 2, 2, 2]);
        let loss = cross_entropy_scalar(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut logits = Tensor::zeros(&[1, 1, 1, 2]);
        logits.data_mut()[1] = 20.0;
        let loss = cross_entropy_scalar(&logits, &[1]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn hand_softmax_oracle_ln_four_thirds() {
        // K=2 single pixel, logits (0, ln 3), true label 1 -> p = 0.75
        let logits = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let loss = cross_entropy_scalar(&logits, &[1]).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((loss - 0.28768207245178085).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(cross_entropy_scalar(&logits, &[2]).is_err());
        assert!(cross_entropy_scalar(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn dice_perfect_prediction_is_near_zero() {
        let target = [0u8, 1, 1, 0];
        let mut probs = Tensor::zeros(&[1, 2, 2, 2]);
        for (i, &t) in target.iter().enumerate() {
            probs.data_mut()[i * 2 + t as usize] = 1.0;
        }
        let loss = dice_loss_scalar(&probs, &target, &LossConfig::default()).unwrap();
        assert!(loss.abs() < 1e-5);
    }

    #[test]
    fn dice_disjoint_prediction_is_near_one() {
        // foreground target present but all probability mass on background
        let target = [1u8, 1, 1, 1];
        let mut probs = Tensor::zeros(&[1, 2, 2, 2]);
        for i in 0..4 {
            probs.data_mut()[i * 2] = 1.0;
        }
        let loss = dice_loss_scalar(&probs, &target, &LossConfig::default()).unwrap();
        assert!(loss > 1.0 - 1e-4, "loss {loss}");
    }

    #[test]
    fn dice_half_overlap_soft_mass() {
        // |P| = |G| = 4 with overlap mass 2 -> dice 0.5, loss 0.5
        let target = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let mut probs = Tensor::zeros(&[1, 2, 4, 2]);
        // predicted foreground mass: 0.5 at each target-foreground pixel (2 total),
        // and 0.5 at each of the four background pixels (2 total): psum = 4
        for i in 0..4 {
            probs.data_mut()[i * 2 + 1] = 0.5;
            probs.data_mut()[i * 2] = 0.5;
        }
        for i in 4..8 {
            probs.data_mut()[i * 2 + 1] = 0.5;
            probs.data_mut()[i * 2] = 0.5;
        }
        let cfg = LossConfig::default();
        let loss = dice_loss_scalar(&probs, &target, &cfg).unwrap();
        // intersection = 2, psum = 4, gsum = 4 -> dice = (4 + eps) / (8 + eps)
        assert!((loss - 0.5).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn combined_reduces_to_parts_exactly() {
        let logits = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.4, 1.2, 0.1]).unwrap();
        let target = [1u8, 0];
        let ce = cross_entropy_scalar(&logits, &target).unwrap();
        let probs = {
            let mut g = Graph::new();
            let l = g.constant(logits.clone());
            let p = g.softmax_last(l);
            g.value(p).clone()
        };
        let cfg0 = LossConfig { lambda: 0.0, ..Default::default() };
        let cfg1 = LossConfig { lambda: 1.0, ..Default::default() };
        let dice = dice_loss_scalar(&probs, &target, &cfg1).unwrap();
        assert_eq!(combined_loss_scalar(&logits, &target, &cfg0).unwrap(), ce);
        assert_eq!(combined_loss_scalar(&logits, &target, &cfg1).unwrap(), dice);
    }

    #[test]
    fn combined_is_affine_in_lambda() {
        let logits = Tensor::new(vec![1, 2, 2, 2], vec![0.3, -0.4, 1.2, 0.1, -0.8, 0.5, 0.0, 0.2]).unwrap();
        let target = [1u8, 0, 1, 1];
        let at = |lambda: f64| {
            combined_loss_scalar(
                &logits,
                &target,
                &LossConfig { lambda, ..Default::default() },
            )
            .unwrap()
        };
        let mid = at(0.5);
        let avg = 0.5 * (at(0.0) + at(1.0));
        assert!((mid - avg).abs() < 1e-10);
    }

    #[test]
    fn lambda_outside_range_is_rejected() {
        let logits = Tensor::zeros(&[1, 1, 1, 2]);
        let bad = LossConfig { lambda: 1.5, ..Default::default() };
        assert!(combined_loss_scalar(&logits, &[0], &bad).is_err());
    }
}
