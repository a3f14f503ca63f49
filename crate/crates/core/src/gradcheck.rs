//! Central finite-difference checks of the analytic backward pass.
//!
//! The numeric derivative only ever calls the forward pass, so it is
//! independent of the code it checks. Relative error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`; the floor
//! keeps gradients that are zero up to rounding from reporting huge ratios.

use crate::error::Result;
use crate::init::{derive_stream, Purpose, RngStream};
use crate::models::ModelSpec;
use crate::nn::{LayerSpec, Mode, Model};
use crate::tensor::{Shape, Tensor};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error per parameter tensor, by param id.
    pub params: Vec<f64>,
    /// Worst relative error over the input gradient.
    pub input: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().copied().fold(self.input, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < TOLERANCE
    }
}

/// Compares every parameter and input gradient of the mean cross-entropy against central differences.
pub fn check_model(name: &str, model: &mut Model, input: &Tensor, labels: &[usize], eps: f64) -> Result<GradCheckReport> {
    model.zero_grads();
    let cache = model.forward(input, Mode::Train)?;
    let (_, dlogits) = crate::nn::loss::softmax_cross_entropy(cache.logits(), labels)?;
    let dinput = model.backward_from(&cache, dlogits)?;
    let mut checked = 0;

    let mut params = Vec::with_capacity(model.params().len());
    for p in 0..model.params().len() {
        let analytic = model.param(p).grad.clone();
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = model.param(p).value.data()[i];
            model.param_mut(p).value.data_mut()[i] = orig + eps;
            let plus = model.loss(input, labels, Mode::Train)?;
            model.param_mut(p).value.data_mut()[i] = orig - eps;
            let minus = model.loss(input, labels, Mode::Train)?;
            model.param_mut(p).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
        params.push(worst);
    }

    let mut x = input.clone();
    let mut input_worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = model.loss(&x, labels, Mode::Train)?;
        x.data_mut()[i] = orig - eps;
        let minus = model.loss(&x, labels, Mode::Train)?;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        input_worst = input_worst.max(relative_error(dinput.data()[i], numeric));
        checked += 1;
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        params,
        input: input_worst,
        checked,
    })
}

fn random_tensor(dims: &[usize], low: f64, high: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(dims.to_vec()).expect("positive dims"));
    for v in t.data_mut() {
        *v = rng.uniform(low, high);
    }
    t
}

fn random_labels(n: usize, classes: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes as u64) as usize).collect()
}

/// Perturbs every parameter away from its initial value so biases are not all zero.
fn jitter(model: &mut Model, rng: &mut RngStream) {
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.uniform(-0.1, 0.1);
        }
    }
}

fn stack(input: &[usize], layers: &[LayerSpec], rng: &mut RngStream) -> Result<Model> {
    let mut b = Model::builder(input);
    for &l in layers {
        b.then(l, rng)?;
    }
    b.build()
}

/// The standard suites: each layer kind on its own or in a minimal stack, then both full models.
pub fn standard_suites(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = derive_stream(seed, Purpose::Init, 77);
    let mut reports = Vec::new();
    let mut run = |name: &str, mut model: Model, batch: usize, rng: &mut RngStream| -> Result<()> {
        jitter(&mut model, rng);
        let mut dims = vec![batch];
        dims.extend_from_slice(model.input_dims());
        let x = random_tensor(&dims, -1.0, 1.0, rng);
        let classes = model.output_dims()[0];
        let y = random_labels(batch, classes, rng);
        reports.push(check_model(name, &mut model, &x, &y, EPSILON)?);
        Ok(())
    };

    let conv = stack(
        &[2, 6, 6],
        &[
            LayerSpec::Conv2d { out_channels: 3, kernel: 3, stride: 1 },
            LayerSpec::Conv2d { out_channels: 2, kernel: 2, stride: 2 },
            LayerSpec::Flatten,
        ],
        &mut rng,
    )?;
    run("conv2d", conv, 3, &mut rng)?;

    let dense = stack(&[5], &[LayerSpec::Dense { units: 4 }], &mut rng)?;
    run("dense", dense, 4, &mut rng)?;

    let relu = stack(
        &[4],
        &[
            LayerSpec::Dense { units: 6 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 3 },
        ],
        &mut rng,
    )?;
    run("relu", relu, 4, &mut rng)?;

    let bn = stack(
        &[2, 5, 5],
        &[
            LayerSpec::Conv2d { out_channels: 3, kernel: 2, stride: 1 },
            LayerSpec::Batchnorm,
            LayerSpec::AvgPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
        ],
        &mut rng,
    )?;
    run("batchnorm", bn, 4, &mut rng)?;

    let ce = stack(&[4, 1, 1], &[LayerSpec::Flatten], &mut rng)?;
    run("softmax_ce", ce, 5, &mut rng)?;

    let crater = ModelSpec::cratercnn(2).build(&mut rng)?;
    run("cratercnn", crater, 2, &mut rng)?;

    let mut inception = ModelSpec::mini_inception(2, false);
    inception.input_shape = vec![3, 8, 8];
    inception.num_classes = 3;
    run("mini_inception", inception.build(&mut rng)?, 2, &mut rng)?;

    inception.with_batchnorm = true;
    run("mini_inception_bn", inception.build(&mut rng)?, 3, &mut rng)?;

    Ok(reports)
}
