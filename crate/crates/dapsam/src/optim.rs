//! AdamW with decoupled weight decay.
//!
//! Only the trainable partition is ever touched; frozen arrays are never
//! read or written by the optimizer, which keeps them bit-identical to
//! initialization for the whole run.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update over the trainable partition. `grads` holds gradients
/// by parameter name; missing names (structurally zero gradients) still
/// advance their moment estimates with a zero gradient.
pub fn adamw_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);

    let trainable: Vec<String> = store
        .iter()
        .filter(|(_, e)| !e.frozen)
        .map(|(n, _)| n.clone())
        .collect();

    for name in trainable {
        let param = store.tensor(&name)?.clone();
        let zero = Tensor::zeros(param.shape());
        let grad = grads.get(&name).unwrap_or(&zero);

        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for (mi, gi) in m.data_mut().iter_mut().zip(grad.data()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }

        let m = &state.m[&name];
        let v = &state.v[&name];
        let mut updated = param.clone();
        for i in 0..updated.numel() {
            let m_hat = m.data()[i] / bias1;
            let v_hat = v.data()[i] / bias2;
            let p = updated.data()[i];
            updated.data_mut()[i] =
                p - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p);
        }
        store.set_tensor(&name, updated)?;
    }
    Ok(())
}
