use std::collections::BTreeMap;

use super::Scalar;
use crate::{Error, Result};

/// Per-parameter AdamW accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    /// First-moment estimate, zero-initialized.
    pub m: Vec<F>,
    /// Second-moment estimate, zero-initialized.
    pub v: Vec<F>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    fn new(numel: usize) -> Self {
        OptimizerState {
            m: vec![F::zero(); numel],
            v: vec![F::zero(); numel],
            step: 0,
        }
    }
}

/// AdamW: bias-corrected adaptive moments followed by decoupled weight decay
/// applied multiplicatively with the learning rate.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    states: BTreeMap<String, OptimizerState<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: F, beta1: F, beta2: F, eps: F, weight_decay: F) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            states: BTreeMap::new(),
        }
    }

    /// Conventional defaults with weight decay 0.01.
    pub fn with_lr(lr: F) -> Self {
        AdamW::new(
            lr,
            F::from_f64_lossy(0.9),
            F::from_f64_lossy(0.999),
            F::from_f64_lossy(1e-8),
            F::from_f64_lossy(0.01),
        )
    }

    pub fn state(&self, name: &str) -> Option<&OptimizerState<F>> {
        self.states.get(name)
    }

    /// One update for one named parameter. Rejects non-finite gradients,
    /// naming the offending parameter.
    pub fn step(&mut self, name: &str, param: &mut [F], grad: &[F]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![param.len()],
                rhs: vec![grad.len()],
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.into() });
        }
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| OptimizerState::new(param.len()));
        state.step += 1;
        let t = state.step as i32;
        let one = F::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let decay = one - self.lr * self.weight_decay;
        for i in 0..param.len() {
            let g = grad[i];
            state.m[i] = self.beta1 * state.m[i] + (one - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (one - self.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            param[i] *= decay;
        }
        Ok(())
    }
}
