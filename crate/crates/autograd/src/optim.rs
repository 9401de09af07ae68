use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};

/// Parameter update rule. Plain SGD is the default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum UpdateRule {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "sgd" => Some(UpdateRule::Sgd),
            "momentum" => Some(UpdateRule::Momentum { beta: 0.9 }),
            "adam" => Some(UpdateRule::adam()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Sgd => "sgd",
            UpdateRule::Momentum { .. } => "momentum",
            UpdateRule::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Set when a non-finite gradient was seen and the update was dropped.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub rule: UpdateRule,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps: u64,
    pub skipped_steps: u64,
}

/// Rescales trainable gradients so their global norm is at most `clip_norm`.
/// Returns the norm measured before rescaling.
pub fn clip_gradients(store: &mut ParamStore, clip_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > clip_norm {
        let k = clip_norm / norm;
        for (_, p) in store.iter_mut() {
            if p.trainable {
                p.tensor.grad.iter_mut().for_each(|g| *g *= k);
            }
        }
    }
    norm
}

impl OptimizerState {
    pub fn new(learning_rate: f64, clip_norm: f64, rule: UpdateRule) -> Result<Self> {
        if !(learning_rate > 0.0) || !(clip_norm > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "optimizer",
                detail: format!("learning_rate {learning_rate} and clip_norm {clip_norm} must be > 0"),
            });
        }
        Ok(OptimizerState {
            learning_rate,
            clip_norm,
            rule,
            moments: HashMap::new(),
            steps: 0,
            skipped_steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clips, updates every trainable parameter, then zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> StepReport {
        let finite = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .all(|(_, p)| p.tensor.grad.iter().all(|g| g.is_finite()));
        if !finite {
            self.skipped_steps += 1;
            store.zero_grad();
            return StepReport {
                grad_norm: f64::NAN,
                clipped: false,
                skipped: true,
            };
        }
        let grad_norm = clip_gradients(store, self.clip_norm);
        self.steps += 1;
        let lr = self.learning_rate;
        let t = self.steps as i32;
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let values = &mut p.tensor.values.data;
            let grad = &p.tensor.grad;
            match self.rule {
                UpdateRule::Sgd => {
                    for (v, g) in values.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
                UpdateRule::Momentum { beta } => {
                    let (m, _) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; grad.len()], Vec::new()));
                    for ((v, g), mi) in values.iter_mut().zip(grad).zip(m.iter_mut()) {
                        *mi = beta * *mi + g;
                        *v -= lr * *mi;
                    }
                }
                UpdateRule::Adam { beta1, beta2, eps } => {
                    let (m, s) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((v, g), mi), si) in values.iter_mut().zip(grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *si = beta2 * *si + (1.0 - beta2) * g * g;
                        *v -= lr * (*mi / c1) / ((*si / c2).sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
        StepReport {
            grad_norm,
            clipped: grad_norm > self.clip_norm,
            skipped: false,
        }
    }
}
