//! AdamW with decoupled weight decay and bias correction.

use crate::autodiff::{GradStore, ParamMap, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Optimizer state is keyed by parameter name, so one optimizer can drive
/// several `ParamMap`s jointly (backbone plus planner) as long as names do
/// not collide across them.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over several parameter collections sharing a step
    /// counter. Gradients absent from the store are treated as zero; a
    /// non-finite gradient rejects the whole step, naming the parameter.
    pub fn step_joint(&mut self, targets: &mut [(&mut ParamMap, &GradStore)]) -> Result<()> {
        for (params, grads) in targets.iter() {
            for (name, tensor) in params.iter() {
                if let Some(g) = grads.get(name) {
                    if g.shape() != tensor.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "adamw",
                            lhs: tensor.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    if !g.all_finite() {
                        return Err(Error::NonFiniteGrad {
                            name: name.to_string(),
                        });
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (params, grads) in targets.iter_mut() {
            for (name, tensor) in params.iter_mut() {
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| {
                        (
                            Tensor::zeros(tensor.shape().to_vec()),
                            Tensor::zeros(tensor.shape().to_vec()),
                        )
                    });
                let zero;
                let g = match grads.get(name) {
                    Some(g) => g,
                    None => {
                        zero = Tensor::zeros(tensor.shape().to_vec());
                        &zero
                    }
                };
                let (b1, b2) = (self.beta1, self.beta2);
                for i in 0..tensor.len() {
                    let gi = g.data()[i];
                    let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                    let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    let p = tensor.data()[i];
                    tensor.data_mut()[i] =
                        p - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
                }
            }
        }
        Ok(())
    }

    pub fn step_single(&mut self, params: &mut ParamMap, grads: &GradStore) -> Result<()> {
        self.step_joint(&mut [(params, grads)])
    }

    /// Flatten moment state for checkpointing. Names are prefixed so they
    /// can share a manifest with model parameters without collisions.
    pub fn export_state(&self) -> ParamMap {
        let mut out = ParamMap::new();
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        for name in names {
            let (m, v) = &self.moments[name];
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        out.insert("step", Tensor::scalar(self.step as f64));
        out
    }

    pub fn import_state(&mut self, state: &ParamMap) -> Result<()> {
        self.moments.clear();
        let mut step = None;
        let mut halves: HashMap<String, (Option<Tensor>, Option<Tensor>)> = HashMap::new();
        for (name, tensor) in state.iter() {
            if name == "step" {
                step = Some(tensor.value() as u64);
            } else if let Some(rest) = name.strip_prefix("m.") {
                halves.entry(rest.to_string()).or_default().0 = Some(tensor.clone());
            } else if let Some(rest) = name.strip_prefix("v.") {
                halves.entry(rest.to_string()).or_default().1 = Some(tensor.clone());
            } else {
                return Err(Error::Checkpoint(format!(
                    "unrecognized optimizer state entry {name}"
                )));
            }
        }
        let step = step.ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        for (name, (m, v)) in halves {
            let (m, v) = match (m, v) {
                (Some(m), Some(v)) => (m, v),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "incomplete optimizer moments for {name}"
                    )))
                }
            };
            self.moments.insert(name, (m, v));
        }
        self.step = step;
        Ok(())
    }
}
