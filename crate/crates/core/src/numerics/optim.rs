use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }

    pub fn for_tensor(t: &Tensor) -> Self {
        AdamState::new(t.numel())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of `param` in place.
///
/// The decay term `lr·wd·θ` is applied to the parameter before the
/// bias-corrected moment step, and never enters the moments.
pub fn adamw_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, opt: &AdamW) -> Result<()> {
    if !(opt.lr > 0.0) {
        return Err(Error::Contract(format!(
            "learning rate must be positive, got {}",
            opt.lr
        )));
    }
    let n = param.numel();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract(format!(
            "adamw_step: param has {n} entries, grad {}, state {}",
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
        *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// A list of parameters sharing one optimizer configuration.
///
/// Parameters without a gradient in a step (absent from the tape) still get
/// their moment estimates decayed, matching dense PyTorch behaviour.
#[derive(Debug)]
pub struct Optimizer {
    pub config: AdamW,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(config: AdamW, params: &[&Tensor]) -> Self {
        Optimizer {
            config,
            states: params.iter().map(|p| AdamState::for_tensor(p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `grads[i]` of `None` is treated as a zero gradient.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} params, got {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(self.states.iter_mut()) {
            match g {
                Some(g) => adamw_step(p, g, s, &self.config)?,
                None => {
                    let zeros = vec![0.0; p.numel()];
                    adamw_step(p, &zeros, s, &self.config)?
                }
            }
        }
        Ok(())
    }
}
