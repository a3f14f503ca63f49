#![allow(dead_code)]

use randomout::experiments::{DatasetSpec, TrainConfig};
use randomout::init::{derive_stream, Purpose};
use randomout::nn::{LayerSpec, Model, ParamRole};
use randomout::{Shape, Tensor};

/// Uniform `[0, 1)` tensor drawn from the data stream of `seed`.
pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let mut rng = derive_stream(seed, Purpose::Data, 99);
    let data = (0..shape.numel()).map(|_| rng.next_f64()).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// conv(width, 3x3) -> relu -> flatten -> dense(2) over a `[1, 6, 6]` input,
/// with the filters in `dead` switched off by a bias of -100.
pub fn dead_filter_net(width: usize, dead: &[usize], seed: u64) -> Model {
    let mut rng = derive_stream(seed, Purpose::Init, 0);
    let mut b = Model::builder(&[1, 6, 6]);
    b.then(
        LayerSpec::Conv2d {
            out_channels: width,
            kernel: 3,
            stride: 1,
        },
        &mut rng,
    )
    .unwrap();
    b.then(LayerSpec::Relu, &mut rng).unwrap();
    b.then(LayerSpec::Flatten, &mut rng).unwrap();
    b.then(LayerSpec::Dense { units: 2 }, &mut rng).unwrap();
    let mut model = b.build().unwrap();
    let bias = model
        .params()
        .iter()
        .position(|p| p.role == ParamRole::ConvBias)
        .unwrap();
    for &f in dead {
        model.param_mut(bias).value.data_mut()[f] = -100.0;
    }
    model
}

/// Small synthetic CraterCNN run that finishes in well under a second.
pub fn quick_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::crater_default(3, seed);
    cfg.dataset = DatasetSpec::synth(24, 24, 5);
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg
}
