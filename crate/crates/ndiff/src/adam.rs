use crate::{Grads, NdiffError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn for_param(param: &Tensor) -> Self {
        Self {
            m: Tensor::zeros(param.rows(), param.cols()),
            v: Tensor::zeros(param.rows(), param.cols()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NdiffError> {
    for other in [grad.shape(), state.m.shape(), state.v.shape()] {
        if other != param.shape() {
            return Err(NdiffError::ShapeMismatch {
                op: "adam_step",
                left: param.shape(),
                right: other,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            states: store.iter().map(|(_, _, t)| AdamState::for_param(t)).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<(), NdiffError> {
        for id in store.ids().collect::<Vec<_>>() {
            adam_step(
                store.get_mut(id),
                grads.get(id),
                &mut self.states[id.0],
                &self.config,
            )?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}
