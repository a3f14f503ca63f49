mod common;

use proptest::prelude::*;

use common::{dead_filter_net, random_tensor};
use randomout::init::{derive_stream, Purpose};
use randomout::models::ModelSpec;
use randomout::nn::{Mode, Model, ParamNode, ParamRole};
use randomout::optim::{OptimizerConfig, OptimizerState};
use randomout::randomout::{all_cgn, count_below_threshold, reset_filter, scan_and_reset, RandomOutConfig, ScanPoint};
use randomout::tensor::{conv2d_forward, ConvGeometry};
use randomout::{Shape, Tensor};

fn at(progress: f64) -> ScanPoint {
    ScanPoint {
        epoch: 0,
        batch: 0,
        progress,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_law(
        n in 1usize..3, c in 1usize..3, o in 1usize..4,
        h in 1usize..12, w in 1usize..12,
        kh in 1usize..5, kw in 1usize..5, stride in 1usize..4,
    ) {
        let accepted = ConvGeometry::new(&[n, c, h, w], &[o, c, kh, kw], stride).is_ok();
        prop_assert_eq!(accepted, kh <= h && kw <= w);
        if accepted {
            let x = random_tensor(&[n, c, h, w], 1);
            let k = random_tensor(&[o, c, kh, kw], 2);
            let b = Tensor::zeros(Shape::new(vec![o]).unwrap());
            let before = x.clone();
            let out = conv2d_forward(&x, &k, &b, stride).unwrap();
            prop_assert_eq!(out.dims(), &[n, o, (h - kh) / stride + 1, (w - kw) / stride + 1]);
            prop_assert_eq!(x, before);
        }
    }

    #[test]
    fn filter_groups_partition_conv_params(width in 2usize..5, inception in any::<bool>(), bn in any::<bool>(), seed in 0u64..1000) {
        let spec = if inception { ModelSpec::mini_inception(width, bn) } else { ModelSpec::cratercnn(width) };
        let model = spec.build(&mut derive_stream(seed, Purpose::Init, 0)).unwrap();
        let groups = model.filter_groups();
        prop_assert_eq!(groups.len(), spec.declared_filters());
        let mut owner: Vec<Vec<u32>> = model.params().iter().map(|p| vec![0; p.value.len()]).collect();
        for g in &groups {
            for i in g.kernel_slice.clone() {
                owner[g.kernel_param][i] += 1;
            }
            owner[g.bias_param][g.bias_index] += 1;
        }
        for (p, counts) in model.params().iter().zip(&owner) {
            let conv = matches!(p.role, ParamRole::ConvKernel | ParamRole::ConvBias);
            prop_assert!(counts.iter().all(|&c| c == u32::from(conv)), "param {} ({:?})", p.id, p.role);
        }
    }

    #[test]
    fn adam_without_momentum_steps_at_most_lr(grads in prop::collection::vec(-1e6f64..1e6, 1..40), lr in 1e-4f64..1.0) {
        let mut model = dead_filter_net(1, &[], 0);
        let cfg = OptimizerConfig::Adam { lr, beta1: 0.0, beta2: 0.0, eps: 1e-8 };
        let mut state = OptimizerState::new(cfg, model.params());
        for g in grads {
            let before: Vec<f64> = model.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
            for p in model.params_mut() {
                p.grad.fill(g);
            }
            state.step(model.params_mut());
            let after = model.params().iter().flat_map(|p| p.value.data().to_vec());
            for (a, b) in after.zip(before) {
                prop_assert!((a - b).abs() <= lr * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn optimizer_is_elementwise(seed in 0u64..1000, adam in any::<bool>(), steps in 1usize..4) {
        let cfg = if adam { OptimizerConfig::adam(0.01) } else { OptimizerConfig::Sgd { lr: 0.1 } };
        let model = dead_filter_net(3, &[], seed);
        let mut rng = derive_stream(seed, Purpose::Data, 3);
        let perm = rng.permutation(model.params().len());
        let mut a: Vec<ParamNode> = model.params().to_vec();
        let mut b: Vec<ParamNode> = perm.iter().map(|&i| a[i].clone()).collect();
        let mut sa = OptimizerState::new(cfg, &a);
        let mut sb = OptimizerState::new(cfg, &b);
        for _ in 0..steps {
            for p in a.iter_mut() {
                for g in p.grad.data_mut() {
                    *g = rng.uniform(-1.0, 1.0);
                }
            }
            for (slot, &i) in b.iter_mut().zip(&perm) {
                slot.grad = a[i].grad.clone();
            }
            sa.step(&mut a);
            sb.step(&mut b);
        }
        for (slot, &i) in b.iter().zip(&perm) {
            prop_assert_eq!(&slot.value, &a[i].value);
        }
    }

    #[test]
    fn reset_touches_only_reset_filters(width in 2usize..7, dead_mask in 0u32..64, seed in 0u64..1000, warmup in 0usize..3) {
        let dead: Vec<usize> = (0..width).filter(|f| dead_mask >> f & 1 == 1).collect();
        let mut model = dead_filter_net(width, &dead, seed);
        let mut state = OptimizerState::new(OptimizerConfig::adam(0.01), model.params());
        let x = random_tensor(&[4, 1, 6, 6], seed);
        let labels = [0, 1, 1, 0];
        for _ in 0..warmup {
            model.zero_grads();
            model.loss_and_grads(&x, &labels).unwrap();
            state.step(model.params_mut());
        }
        model.zero_grads();
        model.loss_and_grads(&x, &labels).unwrap();
        let before = model.clone();
        let state_before = state.clone();
        let cfg = RandomOutConfig::new(1e-8, 1.0).unwrap();
        let below: Vec<usize> = all_cgn(&model).iter().filter(|(_, s)| *s < 1e-8).map(|(g, _)| g.filter_index).collect();
        let events = scan_and_reset(&mut model, &mut state, &cfg, at(0.0), &mut derive_stream(seed, Purpose::RandomOut, 0));
        let reset: Vec<usize> = events.iter().map(|e| e.filter_index).collect();
        // the forced-dead filters, plus any that died at initialization
        prop_assert_eq!(&reset, &below);
        prop_assert!(dead.iter().all(|f| reset.contains(f)));

        let groups = before.filter_groups();
        for (pid, (p, q)) in before.params().iter().zip(model.params()).enumerate() {
            let m0 = state_before.moments(pid).unwrap();
            let m1 = state.moments(pid).unwrap();
            prop_assert_eq!(m0.t, m1.t);
            for i in 0..p.value.len() {
                let inside = groups.iter().any(|g| {
                    reset.contains(&g.filter_index)
                        && ((g.kernel_param == pid && g.kernel_slice.contains(&i)) || (g.bias_param == pid && g.bias_index == i))
                });
                if !inside {
                    prop_assert_eq!(p.value.data()[i].to_bits(), q.value.data()[i].to_bits());
                    prop_assert_eq!(p.grad.data()[i].to_bits(), q.grad.data()[i].to_bits());
                    prop_assert_eq!(m0.m[i].to_bits(), m1.m[i].to_bits());
                    prop_assert_eq!(m0.v[i].to_bits(), m1.v[i].to_bits());
                } else {
                    prop_assert_eq!(q.grad.data()[i], 0.0);
                    prop_assert_eq!((m1.m[i], m1.v[i]), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn threshold_semantics(tau_exp in -14i32..2, p in 0.0f64..=1.0, progress in 0.0f64..1.0, seed in 0u64..100) {
        let mut model = dead_filter_net(4, &[1], seed);
        let x = random_tensor(&[4, 1, 6, 6], seed);
        model.loss_and_grads(&x, &[1, 0, 1, 0]).unwrap();
        let tau = 10f64.powi(tau_exp);
        let scores = all_cgn(&model);
        let expect: Vec<usize> = if progress < p {
            scores.iter().filter(|(_, s)| *s < tau).map(|(g, _)| g.filter_index).collect()
        } else {
            Vec::new()
        };
        let mut state = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, model.params());
        let cfg = RandomOutConfig::new(tau, p).unwrap();
        let events = scan_and_reset(&mut model, &mut state, &cfg, at(progress), &mut derive_stream(0, Purpose::RandomOut, 0));
        prop_assert_eq!(events.iter().map(|e| e.filter_index).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn dead_relu_blocks_all_upstream_gradient(width in 1usize..5, seed in 0u64..1000) {
        let dead: Vec<usize> = (0..width).collect();
        let mut model = dead_filter_net(width, &dead, seed);
        let x = random_tensor(&[3, 1, 6, 6], seed);
        let (_, dx) = model.loss_and_grads(&x, &[0, 1, 0]).unwrap();
        prop_assert!(dx.data().iter().all(|&g| g == 0.0));
        for p in model.params() {
            if matches!(p.role, ParamRole::ConvKernel | ParamRole::ConvBias) {
                prop_assert!(p.grad.data().iter().all(|&g| g == 0.0));
            }
        }
        prop_assert_eq!(count_below_threshold(&model, 1e-300), width);
    }

    #[test]
    fn eval_forward_is_pure(seed in 0u64..1000, bn in any::<bool>()) {
        let mut spec = ModelSpec::mini_inception(2, bn);
        spec.input_shape = vec![3, 8, 8];
        let mut model = spec.build(&mut derive_stream(seed, Purpose::Init, 0)).unwrap();
        let x = random_tensor(&[2, 3, 8, 8], seed);
        let params = model.params().to_vec();
        let a = model.predict(&x).unwrap();
        let b = model.forward(&x, Mode::Eval).unwrap();
        prop_assert_eq!(&a, b.logits());
        prop_assert_eq!(model.params(), params.as_slice());
    }
}

/// Toy task on `[1, 6, 6]` inputs: is the left half brighter than the right half?
fn toy_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
    let x = random_tensor(&[n, 1, 6, 6], seed);
    let labels = (0..n)
        .map(|i| {
            let img = &x.data()[i * 36..(i + 1) * 36];
            let left: f64 = (0..36).filter(|j| j % 6 < 3).map(|j| img[j]).sum();
            let right: f64 = (0..36).filter(|j| j % 6 >= 3).map(|j| img[j]).sum();
            usize::from(left > right)
        })
        .collect();
    (x, labels)
}

fn trained_toy(seed: u64) -> Model {
    let mut model = dead_filter_net(4, &[(seed % 4) as usize], seed);
    let mut state = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, model.params());
    for step in 0..1000 {
        let (x, y) = toy_batch(1000 * seed + step, 16);
        model.zero_grads();
        model.loss_and_grads(&x, &y).unwrap();
        state.step(model.params_mut());
    }
    model
}

#[test]
fn resetting_a_low_gradient_filter_barely_moves_the_loss() {
    for seed in 0..12u64 {
        let model = trained_toy(seed);
        let (x, y) = toy_batch(u64::MAX - seed, 32);
        let mut scored = model.clone();
        scored.zero_grads();
        let loss0 = scored.loss_and_grads(&x, &y).unwrap().0;
        let scores = all_cgn(&scored);
        let low = scores.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let high = scores.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(low.1 < 1e-8, "seed {seed}: the dead filter has cgn {}", low.1);

        let loss_after = |group| {
            let mut m = scored.clone();
            let mut st = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, m.params());
            reset_filter(&mut m, &mut st, group, &mut derive_stream(seed, Purpose::RandomOut, 0));
            m.loss(&x, &y, Mode::Train).unwrap()
        };
        let d_low = (loss_after(&low.0) - loss0).abs();
        let d_high = (loss_after(&high.0) - loss0).abs();
        assert!(d_low < d_high, "seed {seed}: low-cgn reset moved loss by {d_low}, high-cgn by {d_high}");
    }
}
