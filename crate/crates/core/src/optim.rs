//! Adam with bias correction, one instance per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "adam needs beta1, beta2 in [0, 1) and eps > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }

    pub fn matches(&self, params: &ParameterSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// Applies one Adam update in place. `grads[i]` of `None` counts as zero.
pub fn adam_step(
    params: &mut ParameterSet,
    state: &mut AdamState,
    grads: &[Option<Tensor>],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(shape_err!(
            "optimizer state for {} arrays, got {} gradients and {} parameters",
            state.m.len(),
            grads.len(),
            params.len()
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = p.data_mut();
        match g {
            Some(g) => {
                for (i, &gi) in g.data().iter().enumerate() {
                    md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                    vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                    pd[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + cfg.eps);
                }
            }
            None => {
                for i in 0..pd.len() {
                    md[i] *= cfg.beta1;
                    vd[i] *= cfg.beta2;
                    pd[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
