//! Per-channel batch normalization over axis 1.
//!
//! Train mode normalizes with the biased batch variance and folds the batch
//! statistics into the running estimates as
//! `running = MOMENTUM * running + (1 - MOMENTUM) * batch`.
//! Eval mode uses the running estimates only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub(crate) fn absorb(&mut self, batch: &BatchStats) {
        for c in 0..self.mean.len() {
            self.mean[c] = MOMENTUM * self.mean[c] + (1.0 - MOMENTUM) * batch.mean[c];
            self.var[c] = MOMENTUM * self.var[c] + (1.0 - MOMENTUM) * batch.var[c];
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Intermediates kept from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// `(batch, channels, per-channel plane size)` for an `[N, C, ...]` tensor.
fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            left: dims.to_vec(),
            right: vec![],
        });
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

fn apply(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
    let (n, c, plane) = layout(x).expect("layout checked by caller");
    let mut xhat = Tensor::zeros(x.shape().clone());
    let mut y = Tensor::zeros(x.shape().clone());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

pub fn forward_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnCache, BatchStats)> {
    let (n, c, plane) = layout(x)?;
    if n < 2 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm (train mode needs batch >= 2)",
            left: x.dims().to_vec(),
            right: gamma.dims().to_vec(),
        });
    }
    check_params(x, gamma, beta, c)?;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            mean[ch] += x.data()[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            var[ch] += x.data()[off..off + plane]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPSILON).sqrt()).collect();
    let (y, normalized) = apply(x, gamma.data(), beta.data(), &mean, &inv_std);
    Ok((y, BnCache { normalized, inv_std }, BatchStats { mean, var }))
}

pub fn forward_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<Tensor> {
    let (_, c, _) = layout(x)?;
    check_params(x, gamma, beta, c)?;
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + EPSILON).sqrt()).collect();
    Ok(apply(x, gamma.data(), beta.data(), &stats.mean, &inv_std).0)
}

fn check_params(x: &Tensor, gamma: &Tensor, beta: &Tensor, c: usize) -> Result<()> {
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            left: x.dims().to_vec(),
            right: gamma.dims().to_vec(),
        });
    }
    Ok(())
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn backward(grad_out: &Tensor, gamma: &Tensor, cache: &BnCache) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, plane) = layout(grad_out)?;
    let count = (n * plane) as f64;
    let (dy, xhat) = (grad_out.data(), cache.normalized.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    // With dxhat = gamma * dy:
    // dx = inv_std / M * (M * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
    let mut dx = Tensor::zeros(grad_out.shape().clone());
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch];
            let scale = cache.inv_std[ch] / count;
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx.data_mut()[i] =
                    scale * (count * g * dy[i] - g * dbeta[ch] - xhat[i] * g * dgamma[ch]);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
