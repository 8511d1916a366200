//! RMSProp parameter updates.
//!
//! Per-parameter accumulator: `r <- rho*r + (1-rho)*g^2`, update:
//! `param <- param - lr * g / (sqrt(r) + eps)`.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Squared-gradient accumulator for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub accumulator: Tensor,
}

impl RmsPropState {
    pub fn new(shape: &[usize]) -> Self {
        RmsPropState {
            accumulator: Tensor::zeros(shape),
        }
    }
}

/// One update step on a single parameter tensor.
pub fn rmsprop_update(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut RmsPropState,
    lr: f64,
    rho: f64,
    eps: f64,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    debug_assert_eq!(param.shape(), state.accumulator.shape());
    for ((p, &g), r) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.accumulator.data_mut())
    {
        *r = rho * *r + (1.0 - rho) * g * g;
        *p -= lr * g / (r.sqrt() + eps);
    }
}

/// Accumulators for a set of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerStates {
    pub states: BTreeMap<String, RmsPropState>,
}

impl OptimizerStates {
    pub fn ensure(&mut self, name: &str, shape: &[usize]) -> &mut RmsPropState {
        self.states
            .entry(name.to_string())
            .or_insert_with(|| RmsPropState::new(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_decays_accumulator_only() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut s = RmsPropState::new(&[2]);
        s.accumulator = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        rmsprop_update(&mut p, &g, &mut s, 0.1, 0.9, 1e-8);
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert!((s.accumulator.data()[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_scalar_step() {
        // r=0, g=1, rho=0.9, lr=0.1, eps=0: r becomes 0.1 and the step is
        // 0.1/sqrt(0.1) = sqrt(0.1) ~= 0.31623.
        let mut p = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut s = RmsPropState::new(&[1]);
        rmsprop_update(&mut p, &g, &mut s, 0.1, 0.9, 0.0);
        assert!((s.accumulator.data()[0] - 0.1).abs() < 1e-12);
        let step = 2.0 - p.data()[0];
        assert!((step - 0.1f64 / 0.1f64.sqrt()).abs() < 1e-12);
        assert!((step - 0.316_227_766_016_837_94).abs() < 1e-12);
    }

    #[test]
    fn epsilon_shrinks_repeated_steps() {
        // With eps > 0 the second identical step is smaller in magnitude
        // than lr (the r -> 1 limit for unit gradients).
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut s = RmsPropState::new(&[1]);
        let lr = 0.1;
        rmsprop_update(&mut p, &g, &mut s, lr, 0.9, 1e-4);
        let first = -p.data()[0];
        let before = p.data()[0];
        rmsprop_update(&mut p, &g, &mut s, lr, 0.9, 1e-4);
        let second = before - p.data()[0];
        assert!(second < first, "second step {second} vs first {first}");
        assert!(first > lr, "early steps exceed lr while r is small");
    }
}
