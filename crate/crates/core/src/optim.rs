//! Stochastic gradient descent with Nesterov momentum.

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Scalar;

/// Velocity state for Nesterov SGD.
///
/// The update uses the lookahead-gradient formulation rewritten so the
/// gradient is taken at the stored parameters (which then play the role of
/// the lookahead point):
///
///   v  <- mu * v - eta * g        with g = dL/d(theta)
///   theta <- theta + mu * v - eta * g
///
/// With velocity starting at zero this is equivalent to
/// v <- mu*v - eta*grad f(theta + mu*v) on the untransformed iterates.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    learning_rate: T,
    momentum: T,
    /// One buffer per trainable tensor, in `param_slots` order; shapes
    /// mirror the parameter shapes.
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &Network<T>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate < 0.0 {
            return Err(Error::Parameter("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter("momentum must be in [0, 1)".into()));
        }
        let velocity = net
            .param_slots()
            .iter()
            .map(|&slot| vec![T::zero(); net.param(slot).len()])
            .collect();
        Ok(OptimizerState {
            learning_rate: T::from_f64(learning_rate),
            momentum: T::from_f64(momentum),
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.into_f64()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = T::from_f64(lr);
    }

    pub fn momentum(&self) -> f64 {
        self.momentum.into_f64()
    }
}

/// Apply one Nesterov step to every trainable parameter, then clear grads.
/// Errors if any parameter is missing its gradient.
pub fn sgd_nesterov_step<T: Scalar>(
    net: &mut Network<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let slots = net.param_slots();
    if slots.len() != state.velocity.len() {
        return Err(Error::State(
            "optimizer state does not match network parameters".into(),
        ));
    }
    for (&slot, velocity) in slots.iter().zip(&state.velocity) {
        let p = net.param(slot);
        if !p.has_grad() {
            return Err(Error::State(format!(
                "parameter of node {} has no gradient; run backward first",
                slot.node
            )));
        }
        if p.len() != velocity.len() {
            return Err(Error::State(
                "velocity shape does not mirror parameter shape".into(),
            ));
        }
    }
    let mu = state.momentum;
    let eta = state.learning_rate;
    for (&slot, velocity) in slots.iter().zip(state.velocity.iter_mut()) {
        let p = net.param_mut(slot);
        let n = p.len();
        for j in 0..n {
            let g = p.grad().unwrap()[j];
            let v_new = mu * velocity[j] - eta * g;
            velocity[j] = v_new;
            p.data_mut()[j] = p.data_mut()[j] + mu * v_new - eta * g;
        }
        p.clear_grad();
    }
    Ok(())
}
