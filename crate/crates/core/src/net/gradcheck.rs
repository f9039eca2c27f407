//! Central finite-difference verification of the analytic gradients.
//!
//! Meant for 64-bit networks on small batches: cost is two forwards per
//! parameter. Dropout masks are captured once and replayed, and batch-norm
//! statistics are held constant, so the differentiated function is smooth
//! and deterministic across perturbations.

use super::run::LossKind;
use super::{Mode, Network};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// A pinned batch for the check: inputs, loss, and target.
pub struct FdBatch {
    pub inputs: Vec<Tensor<f64>>,
    pub loss: LossKind,
    pub target: Tensor<f64>,
}

/// Max over all parameters of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check(
    net: &mut Network<f64>,
    batch: &FdBatch,
    epsilon: f64,
) -> Result<f64> {
    net.set_mode(Mode::Train);
    // realize dropout masks and batch statistics once
    let mut noise_rng = rng::substream(0xFDC4EC, "fd-dropout");
    net.forward_train(&batch.inputs, &mut noise_rng)?;
    let noise = net.capture_noise()?;

    // analytic gradients under the same frozen noise
    net.forward_frozen(&batch.inputs, &noise, true)?;
    net.backward(batch.loss, &batch.target)?;
    let slots = net.param_slots();
    let analytic: Vec<Vec<f64>> = slots
        .iter()
        .map(|&slot| net.param(slot).grad().expect("backward populates grads").to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    for (slot_idx, &slot) in slots.iter().enumerate() {
        let n = net.param(slot).len();
        for j in 0..n {
            let orig = net.param(slot).data()[j];
            net.param_mut(slot).data_mut()[j] = orig + epsilon;
            net.forward_frozen(&batch.inputs, &noise, true)?;
            let plus = net.loss_value(batch.loss, &batch.target)?;
            net.param_mut(slot).data_mut()[j] = orig - epsilon;
            net.forward_frozen(&batch.inputs, &noise, true)?;
            let minus = net.loss_value(batch.loss, &batch.target)?;
            net.param_mut(slot).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[slot_idx][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    net.cache = None;
    Ok(max_rel)
}
