use std::collections::BTreeMap;

use super::{GradTable, PolicyError, Result, StateKey, TabularPolicy};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer configuration plus its running state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    moments: BTreeMap<StateKey, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(PolicyError::InvalidLearningRate(learning_rate));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one descent step in place. Only states present in `grads` move.
///
/// Adam keeps per-state moments and a global step counter for bias
/// correction; a state absent from a step's gradient keeps its moments.
pub fn apply_update(
    policy: &mut TabularPolicy,
    grads: &GradTable,
    opt: &mut OptimizerState,
) -> Result<()> {
    let v = policy.vocab_size();
    for (key, grad) in grads.iter() {
        policy.check_key(key)?;
        if grad.len() != v {
            return Err(PolicyError::LogitLength {
                state: key.clone(),
                got: grad.len(),
                expected: v,
            });
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGradient {
                state: key.clone(),
                index,
                value,
            });
        }
    }

    opt.step += 1;
    let lr = opt.learning_rate;
    match opt.kind {
        OptimizerKind::Sgd => {
            for (key, grad) in grads.iter() {
                if policy.logits(key).is_none() && grad.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for (z, g) in policy.logits_mut(key).iter_mut().zip(grad) {
                    *z -= lr * g;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = opt.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (key, grad) in grads.iter() {
                if policy.logits(key).is_none() && grad.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let m = opt.moments.entry(key.clone()).or_insert_with(|| Moments {
                    first: vec![0.0; v],
                    second: vec![0.0; v],
                });
                let logits = policy.logits_mut(key);
                for i in 0..v {
                    let g = grad[i];
                    m.first[i] = ADAM_BETA1 * m.first[i] + (1.0 - ADAM_BETA1) * g;
                    m.second[i] = ADAM_BETA2 * m.second[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m.first[i] / c1;
                    let v_hat = m.second[i] / c2;
                    logits[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}
