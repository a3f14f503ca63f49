//! Fixed-rate SGD and Adam.
//!
//! Adam keeps one timestep per parameter tensor. When RandomOut redraws a
//! filter, [`OptimizerState::reset_slice`] zeroes that filter's moments but
//! leaves the tensor's timestep alone, so the reset elements re-enter with the
//! tensor's current bias correction.

use serde::{Deserialize, Serialize};

use crate::nn::ParamNode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    /// One entry per `ParamNode`, empty for SGD.
    moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[ParamNode]) -> Self {
        let moments = match config {
            OptimizerConfig::Sgd { .. } => Vec::new(),
            OptimizerConfig::Adam { .. } => params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                    t: 0,
                })
                .collect(),
        };
        OptimizerState { config, moments }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn moments(&self, param: usize) -> Option<&Moments> {
        self.moments.get(param)
    }

    pub fn step(&mut self, params: &mut [ParamNode]) {
        match self.config {
            OptimizerConfig::Sgd { lr } => sgd_step(params, lr),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                for (p, st) in params.iter_mut().zip(&mut self.moments) {
                    adam_update(p, st, lr, beta1, beta2, eps);
                }
            }
        }
    }

    /// Zeroes first and second moments of `param` over `range`; the timestep is unchanged.
    pub fn reset_slice(&mut self, param: usize, range: std::ops::Range<usize>) {
        if let Some(st) = self.moments.get_mut(param) {
            st.m[range.clone()].fill(0.0);
            st.v[range].fill(0.0);
        }
    }
}

pub fn sgd_step(params: &mut [ParamNode], lr: f64) {
    for p in params {
        for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *w -= lr * g;
        }
    }
}

fn adam_update(p: &mut ParamNode, st: &mut Moments, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    st.t += 1;
    let c1 = 1.0 - beta1.powi(st.t as i32);
    let c2 = 1.0 - beta2.powi(st.t as i32);
    let grads = p.grad.data();
    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
        let g = grads[i];
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
        let m_hat = st.m[i] / c1;
        let v_hat = st.v[i] / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;
    use crate::tensor::Tensor;
    use crate::nn::ParamRole;

    fn param(values: &[f64], grads: &[f64]) -> ParamNode {
        let n = values.len();
        ParamNode {
            id: 0,
            role: ParamRole::DenseWeight,
            value: Tensor::from_vec(shape![n], values.to_vec()).unwrap(),
            grad: Tensor::from_vec(shape![n], grads.to_vec()).unwrap(),
        }
    }

    #[test]
    fn sgd_basic_update() {
        let mut ps = vec![param(&[1.0], &[0.5])];
        sgd_step(&mut ps, 0.1);
        assert_eq!(ps[0].value.data(), &[0.95]);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut ps = vec![param(&[1.0, -2.0], &[0.0, 0.0])];
        sgd_step(&mut ps, 0.3);
        assert_eq!(ps[0].value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_two_steps_equal_summed_delta() {
        let mut a = vec![param(&[1.0], &[0.25])];
        sgd_step(&mut a, 0.5);
        sgd_step(&mut a, 0.5);
        assert_eq!(a[0].value.data(), &[1.0 - 2.0 * 0.5 * 0.25]);
    }

    #[test]
    fn adam_first_step_matches_formula() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let g = 0.3;
        let mut ps = vec![param(&[2.0], &[g])];
        let mut st = OptimizerState::new(OptimizerConfig::adam(lr), &ps);
        st.step(&mut ps);
        let m_hat = (1.0 - b1) * g / (1.0 - b1);
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = 2.0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((ps[0].value.data()[0] - expected).abs() < 1e-15);
        assert!((ps[0].value.data()[0] - (2.0 - lr)).abs() < 1e-9);
        assert_eq!(st.moments(0).unwrap().t, 1);
    }

    #[test]
    fn adam_zero_grad_from_zero_state_is_identity() {
        let mut ps = vec![param(&[0.4, -0.1], &[0.0, 0.0])];
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        st.step(&mut ps);
        assert_eq!(ps[0].value.data(), &[0.4, -0.1]);
    }

    #[test]
    fn state_shapes_mirror_params() {
        let ps = vec![param(&[0.0; 3], &[0.0; 3]), param(&[0.0; 7], &[0.0; 7])];
        let st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        assert_eq!(st.moments(0).unwrap().m.len(), 3);
        assert_eq!(st.moments(1).unwrap().v.len(), 7);
    }

    #[test]
    fn reset_whole_equals_fresh_except_timestep() {
        let mut ps = vec![param(&[1.0, 2.0], &[0.5, -0.5])];
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        st.step(&mut ps);
        st.reset_slice(0, 0..2);
        let m = st.moments(0).unwrap();
        assert_eq!(m.m, vec![0.0, 0.0]);
        assert_eq!(m.v, vec![0.0, 0.0]);
        assert_eq!(m.t, 1);
    }

    #[test]
    fn reset_half_leaves_other_half_bit_identical() {
        let mut ps = vec![param(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4])];
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        st.step(&mut ps);
        let before = st.moments(0).unwrap().clone();
        st.reset_slice(0, 0..2);
        let after = st.moments(0).unwrap();
        assert_eq!(after.m[2..], before.m[2..]);
        assert_eq!(after.v[2..], before.v[2..]);
    }

    #[test]
    fn step_after_reset_uses_current_bias_correction() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut ps = vec![param(&[0.0, 0.0], &[0.2, 0.2])];
        let mut st = OptimizerState::new(OptimizerConfig::adam(lr), &ps);
        for _ in 0..4 {
            st.step(&mut ps);
        }
        st.reset_slice(0, 0..1);
        let w0 = ps[0].value.data()[0];
        ps[0].grad.data_mut()[0] = -0.7;
        st.step(&mut ps);
        // fresh moments, t = 5
        let g: f64 = -0.7;
        let m_hat = (1.0 - b1) * g / (1.0 - b1.powi(5));
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2.powi(5));
        let expected = w0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((ps[0].value.data()[0] - expected).abs() < 1e-15);
    }
}
