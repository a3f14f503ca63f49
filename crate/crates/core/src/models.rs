//! Concrete architectures.
//!
//! * CraterCNN: two stride-1 4x4 conv layers with ReLU, a dense layer and a
//!   softmax head over a 15x15 grayscale input.
//! * MiniInception: a scaled-down inception-style network. It is not
//!   Inception-V3; it keeps the pieces filter resets interact with (mixed
//!   1x1/3x3 filters, parallel branches joined by channel concat, optional
//!   BatchNorm after every conv) at a size that trains in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::RngStream;
use crate::nn::{Layer, LayerSpec, Model, ModelBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[serde(rename = "cratercnn")]
    CraterCnn,
    MiniInception,
}

/// Adds a constant to every bias of one conv layer after initialization.
///
/// A large negative value switches off every ReLU behind that layer, which
/// reproduces a "bad seed" deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasOffset {
    /// Ordinal of the conv layer, counting from 0 in forward order.
    pub conv_layer: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: Architecture,
    pub conv_width: usize,
    #[serde(default)]
    pub with_batchnorm: bool,
    pub num_classes: usize,
    /// `[C, H, W]`
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_offset: Option<BiasOffset>,
}

impl ModelSpec {
    pub fn cratercnn(width: usize) -> Self {
        ModelSpec {
            name: Architecture::CraterCnn,
            conv_width: width,
            with_batchnorm: false,
            num_classes: 2,
            input_shape: vec![1, 15, 15],
            bias_offset: None,
        }
    }

    pub fn mini_inception(base_width: usize, with_batchnorm: bool) -> Self {
        ModelSpec {
            name: Architecture::MiniInception,
            conv_width: base_width,
            with_batchnorm,
            num_classes: 10,
            input_shape: vec![3, 32, 32],
            bias_offset: None,
        }
    }

    pub fn build(&self, rng: &mut RngStream) -> Result<Model> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        let mut model = match self.name {
            Architecture::CraterCnn => {
                cratercnn(self.conv_width, self.with_batchnorm, &self.input_shape, self.num_classes, rng)?
            }
            Architecture::MiniInception => {
                mini_inception(self.conv_width, self.with_batchnorm, &self.input_shape, self.num_classes, rng)?
            }
        };
        if let Some(offset) = self.bias_offset {
            apply_bias_offset(&mut model, offset)?;
        }
        Ok(model)
    }

    /// Number of conv filters the architecture declares.
    pub fn declared_filters(&self) -> usize {
        match self.name {
            Architecture::CraterCnn => 2 * self.conv_width,
            Architecture::MiniInception => 7 * self.conv_width,
        }
    }
}

fn conv_unit(b: &mut ModelBuilder, from: usize, out: usize, k: usize, bn: bool, rng: &mut RngStream) -> Result<usize> {
    b.add(
        LayerSpec::Conv2d {
            out_channels: out,
            kernel: k,
            stride: 1,
        },
        &[from],
        rng,
    )?;
    if bn {
        b.then(LayerSpec::Batchnorm, rng)?;
    }
    b.then(LayerSpec::Relu, rng)
}

/// conv(w,4x4) -> ReLU -> conv(w,4x4) -> ReLU -> flatten -> dense(classes).
pub fn build_cratercnn(width: usize, rng: &mut RngStream) -> Result<Model> {
    cratercnn(width, false, &[1, 15, 15], 2, rng)
}

fn cratercnn(width: usize, bn: bool, input: &[usize], classes: usize, rng: &mut RngStream) -> Result<Model> {
    if width == 0 {
        return Err(Error::Config("conv width must be >= 1".into()));
    }
    let mut b = Model::builder(input);
    let x = b.input();
    let h = conv_unit(&mut b, x, width, 4, bn, rng)?;
    conv_unit(&mut b, h, width, 4, bn, rng)?;
    b.then(LayerSpec::Flatten, rng)?;
    b.then(LayerSpec::Dense { units: classes }, rng)?;
    b.build()
}

pub fn build_mini_inception(base_width: usize, with_batchnorm: bool, rng: &mut RngStream) -> Result<Model> {
    mini_inception(base_width, with_batchnorm, &[3, 32, 32], 10, rng)
}

/// Inception-style block: a pooled 1x1 branch and a 1x1-reduce then 3x3 branch, concatenated.
fn inception_block(b: &mut ModelBuilder, from: usize, w: usize, bn: bool, rng: &mut RngStream) -> Result<usize> {
    let pooled = b.add(LayerSpec::AvgPool { size: 3, stride: 1 }, &[from], rng)?;
    let branch_a = conv_unit(b, pooled, w, 1, bn, rng)?;
    let reduce = conv_unit(b, from, w, 1, bn, rng)?;
    let branch_b = conv_unit(b, reduce, w, 3, bn, rng)?;
    b.add(LayerSpec::Concat, &[branch_a, branch_b], rng)
}

fn mini_inception(w: usize, bn: bool, input: &[usize], classes: usize, rng: &mut RngStream) -> Result<Model> {
    if w < 2 {
        return Err(Error::Config("mini-inception base width must be >= 2".into()));
    }
    let mut b = Model::builder(input);
    let x = b.input();
    let stem = conv_unit(&mut b, x, w, 3, bn, rng)?;
    let b1 = inception_block(&mut b, stem, w, bn, rng)?;
    inception_block(&mut b, b1, w, bn, rng)?;
    b.then(LayerSpec::GlobalAvgPool, rng)?;
    b.then(LayerSpec::Flatten, rng)?;
    b.then(LayerSpec::Dense { units: classes }, rng)?;
    b.build()
}

fn apply_bias_offset(model: &mut Model, offset: BiasOffset) -> Result<()> {
    let bias = model
        .nodes()
        .iter()
        .filter_map(|n| match n.layer {
            Layer::Conv2d { bias, .. } => Some(bias),
            _ => None,
        })
        .nth(offset.conv_layer)
        .ok_or_else(|| Error::Config(format!("no conv layer #{}", offset.conv_layer)))?;
    for v in model.param_mut(bias).value.data_mut() {
        *v += offset.value;
    }
    Ok(())
}
