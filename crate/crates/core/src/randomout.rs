//! Convolutional gradient norm scoring and filter reinitialization.
//!
//! The CGN of a filter is the sum of absolute loss gradients over its kernel
//! slab and its bias element. While training progress is below `p_active`,
//! every filter whose CGN is strictly below `tau` is redrawn: its kernel gets
//! fresh Xavier values from the RandomOut stream, its bias goes to zero, its
//! pending gradient is cleared so the next optimizer step leaves it alone, and
//! any optimizer moments over it are zeroed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{xavier_fill, RngStream};
use crate::nn::{FilterGroup, Model};
use crate::optim::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomOutConfig {
    pub tau: f64,
    pub p_active: f64,
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

fn default_check_every() -> usize {
    1
}

impl RandomOutConfig {
    pub fn new(tau: f64, p_active: f64) -> Result<Self> {
        let cfg = RandomOutConfig {
            tau,
            p_active,
            check_every: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.p_active) {
            return Err(Error::Config(format!("p_active must be in [0, 1], got {}", self.p_active)));
        }
        if self.check_every == 0 {
            return Err(Error::Config("check_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, progress: f64) -> bool {
        progress < self.p_active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub epoch: usize,
    pub batch: usize,
    pub layer_id: usize,
    pub filter_index: usize,
    pub cgn_before: f64,
}

/// Sum of `|dL/dw|` over the filter's kernel slab and bias element.
pub fn cgn(model: &Model, group: &FilterGroup) -> f64 {
    let kernel = &model.param(group.kernel_param).grad.data()[group.kernel_slice.clone()];
    let bias = model.param(group.bias_param).grad.data()[group.bias_index];
    kernel.iter().map(|g| g.abs()).sum::<f64>() + bias.abs()
}

/// CGN of every filter in (layer, filter) order.
pub fn all_cgn(model: &Model) -> Vec<(FilterGroup, f64)> {
    model
        .filter_groups()
        .into_iter()
        .map(|g| {
            let s = cgn(model, &g);
            (g, s)
        })
        .collect()
}

pub fn count_below_threshold(model: &Model, tau: f64) -> usize {
    model
        .filter_groups()
        .iter()
        .filter(|g| cgn(model, g) < tau)
        .count()
}

/// Where in training a scan happens; `progress` is batches completed over total batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub epoch: usize,
    pub batch: usize,
    pub progress: f64,
}

/// Redraws one filter in place: kernel slab from Xavier, bias and gradients to zero, moments cleared.
pub fn reset_filter(model: &mut Model, state: &mut OptimizerState, group: &FilterGroup, rng: &mut RngStream) {
    let kernel = model.param_mut(group.kernel_param);
    xavier_fill(
        &mut kernel.value.data_mut()[group.kernel_slice.clone()],
        group.fan_in,
        group.fan_out,
        rng,
    );
    kernel.grad.data_mut()[group.kernel_slice.clone()].fill(0.0);
    let bias = model.param_mut(group.bias_param);
    bias.value.data_mut()[group.bias_index] = 0.0;
    bias.grad.data_mut()[group.bias_index] = 0.0;
    state.reset_slice(group.kernel_param, group.kernel_slice.clone());
    state.reset_slice(group.bias_param, group.bias_index..group.bias_index + 1);
}

/// Scores every filter and resets those with `cgn < tau`, if `at.progress < p_active`.
///
/// Must run after backward and before the optimizer step. Only `rng` (the
/// RandomOut stream) is consumed, one Xavier draw per kernel element reset.
pub fn scan_and_reset(
    model: &mut Model,
    state: &mut OptimizerState,
    cfg: &RandomOutConfig,
    at: ScanPoint,
    rng: &mut RngStream,
) -> Vec<ResetEvent> {
    if !cfg.is_active(at.progress) {
        return Vec::new();
    }
    let below: Vec<(FilterGroup, f64)> = all_cgn(model)
        .into_iter()
        .filter(|(_, score)| *score < cfg.tau)
        .collect();
    below
        .into_iter()
        .map(|(group, score)| {
            reset_filter(model, state, &group, rng);
            ResetEvent {
                epoch: at.epoch,
                batch: at.batch,
                layer_id: group.layer_id,
                filter_index: group.filter_index,
                cgn_before: score,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{derive_stream, Purpose};
    use crate::nn::LayerSpec;
    use crate::optim::OptimizerConfig;
    use crate::shape;
    use crate::tensor::Tensor;

    fn small_model() -> Model {
        let mut rng = derive_stream(1, Purpose::Init, 0);
        let mut b = Model::builder(&[1, 5, 5]);
        b.then(LayerSpec::Conv2d { out_channels: 2, kernel: 2, stride: 1 }, &mut rng).unwrap();
        b.then(LayerSpec::Relu, &mut rng).unwrap();
        b.then(LayerSpec::Flatten, &mut rng).unwrap();
        b.then(LayerSpec::Dense { units: 2 }, &mut rng).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn cgn_of_zero_grads_is_zero() {
        let m = small_model();
        for g in m.filter_groups() {
            assert_eq!(cgn(&m, &g), 0.0);
        }
    }

    #[test]
    fn cgn_sums_absolute_values() {
        let mut rng = derive_stream(1, Purpose::Init, 0);
        let mut b = Model::builder(&[1, 3, 3]);
        b.then(LayerSpec::Conv2d { out_channels: 1, kernel: 2, stride: 1 }, &mut rng).unwrap();
        let mut m = b.build().unwrap();
        m.param_mut(0).grad.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, -0.4]);
        let g = &m.filter_groups()[0];
        assert!((cgn(&m, g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tau_zero_never_resets() {
        let mut m = small_model();
        let mut st = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, m.params());
        let cfg = RandomOutConfig::new(0.0, 1.0).unwrap();
        let mut rng = derive_stream(1, Purpose::RandomOut, 0);
        let at = ScanPoint { epoch: 0, batch: 0, progress: 0.0 };
        assert!(scan_and_reset(&mut m, &mut st, &cfg, at, &mut rng).is_empty());
        assert_eq!(rng.position(), 0);
    }

    #[test]
    fn inactive_after_p_active() {
        let mut m = small_model();
        let before = m.clone();
        let mut st = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, m.params());
        let cfg = RandomOutConfig::new(1.0, 0.5).unwrap();
        let mut rng = derive_stream(1, Purpose::RandomOut, 0);
        let at = ScanPoint { epoch: 3, batch: 0, progress: 0.5 };
        assert!(scan_and_reset(&mut m, &mut st, &cfg, at, &mut rng).is_empty());
        assert_eq!(m, before);
        let at = ScanPoint { progress: 0.49, ..at };
        assert_eq!(scan_and_reset(&mut m, &mut st, &cfg, at, &mut rng).len(), 2);
    }

    #[test]
    fn count_below_extremes() {
        let mut m = small_model();
        let x = Tensor::full(shape![2, 1, 5, 5], 0.5);
        m.loss_and_grads(&x, &[0, 1]).unwrap();
        assert_eq!(count_below_threshold(&m, f64::MAX), 2);
        assert_eq!(count_below_threshold(&m, 0.0), 0);
    }

    #[test]
    fn config_validation() {
        assert!(RandomOutConfig::new(-1.0, 0.5).is_err());
        assert!(RandomOutConfig::new(f64::NAN, 0.5).is_err());
        assert!(RandomOutConfig::new(1e-8, 1.5).is_err());
        let mut c = RandomOutConfig::new(1e-8, 1.0).unwrap();
        c.check_every = 0;
        assert!(c.validate().is_err());
    }
}
