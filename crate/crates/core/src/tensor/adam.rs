//! Adam optimizer with stepped learning-rate decay.

use super::params::{GradMap, ParameterStore};
use super::{Tensor, TensorError};
use std::collections::BTreeMap;

/// Adam moments plus the learning-rate schedule: the effective rate is
/// `base_lr * decay^floor(epoch / decay_period)`.
#[derive(Clone, Debug)]
pub struct AdamState {
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
    step: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
    pub decay_period: u32,
}

impl AdamState {
    pub fn new(base_lr: f64) -> Self {
        AdamState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: 0.5,
            decay_period: 10,
        }
    }

    pub fn with_schedule(mut self, decay: f64, decay_period: u32) -> Self {
        self.decay = decay;
        self.decay_period = decay_period;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn effective_lr(&self, epoch: u32) -> f64 {
        let periods = if self.decay_period == 0 {
            0
        } else {
            epoch / self.decay_period
        };
        self.base_lr * self.decay.powi(periods as i32)
    }
}

/// One Adam update in place. Moments are created lazily with the parameter
/// shapes; the step counter advances once per call.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &GradMap,
    state: &mut AdamState,
    epoch: u32,
) -> Result<(), TensorError> {
    params.check_aligned(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let lr = state.effective_lr(epoch);
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    for (name, value) in params.iter_mut() {
        let g = grads.get(name).expect("alignment checked");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
        if m.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: m.shape(),
                rhs: g.shape(),
            });
        }

        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = value.data_mut();
        for ((p, (m_i, v_i)), &g_i) in pd
            .iter_mut()
            .zip(md.iter_mut().zip(vd.iter_mut()))
            .zip(g.data())
        {
            *m_i = state.beta1 * *m_i + (1.0 - state.beta1) * g_i;
            *v_i = state.beta2 * *v_i + (1.0 - state.beta2) * g_i * g_i;
            let m_hat = *m_i / bias1;
            let v_hat = *v_i / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
