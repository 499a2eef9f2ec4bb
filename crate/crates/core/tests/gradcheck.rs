//! Numerical gradient checks: analytic backward against central finite
//! differences, per layer kind and on mixed stacks.

use fullvideo_core::tensor::{
    compare_grads_to_fd, finite_difference_check, softmax_ce_rows, LayerSpec, Network, Tensor,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const RTOL: f64 = 1e-4;

fn random_input(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn check(net: &mut Network<f64>, input: &Tensor<f64>, label: usize, what: &str) {
    let report = finite_difference_check(net, input, label, RTOL).unwrap();
    assert!(
        report.pass,
        "{what}: max relative error {} exceeds {RTOL}",
        report.max_rel_err
    );
}

#[test]
fn linear_scalar_chain_rule() {
    // y = w * x on a single 1-feature row: dL/dw = x * upstream
    let mut net = Network::<f64>::new(vec![LayerSpec::Linear {
        in_features: 1,
        out_features: 2,
    }])
    .unwrap();
    net.params_mut()[0][0] = Tensor::from_vec(&[2, 1], vec![0.7, -0.3]).unwrap();
    let input = Tensor::from_vec(&[1, 1], vec![2.5]).unwrap();
    let (logits, mut tape) = net.forward(&input).unwrap();
    let (_, loss_grad) = softmax_ce_rows(&logits, 0).unwrap();
    let upstream = loss_grad.data().to_vec();
    let (grads, _) = net.backward(&mut tape, &loss_grad).unwrap();
    let gw = grads.per_layer[0][0].data();
    assert!((gw[0] - 2.5 * upstream[0]).abs() < 1e-12);
    assert!((gw[1] - 2.5 * upstream[1]).abs() < 1e-12);
}

#[test]
fn zero_upstream_gives_zero_parameter_grads() {
    let mut rng = StdRng::seed_from_u64(100);
    let mut net = Network::<f64>::new(vec![
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            in_features: 3,
            out_features: 2,
        },
    ])
    .unwrap();
    net.init_random(&mut rng);
    let input = random_input(&mut rng, &[2, 2, 5, 5]);
    let (logits, mut tape) = net.forward(&input).unwrap();
    let zero = Tensor::zeros(logits.shape());
    let (grads, _) = net.backward(&mut tape, &zero).unwrap();
    assert!(grads.flatten().iter().all(|&g| g == 0.0));
}

#[test]
fn tape_reuse_is_rejected() {
    let mut rng = StdRng::seed_from_u64(101);
    let mut net = Network::<f64>::new(vec![LayerSpec::Linear {
        in_features: 3,
        out_features: 2,
    }])
    .unwrap();
    net.init_random(&mut rng);
    let input = random_input(&mut rng, &[1, 3]);
    let (logits, mut tape) = net.forward(&input).unwrap();
    let g = Tensor::filled(logits.shape(), 1.0);
    net.backward(&mut tape, &g).unwrap();
    assert!(net.backward(&mut tape, &g).is_err());
}

#[test]
fn fd_conv2d_random_configs() {
    let mut rng = StdRng::seed_from_u64(102);
    for i in 0..6 {
        let in_c = rng.random_range(1..4);
        let out_c = rng.random_range(1..4);
        let kernel = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let hw = rng.random_range(kernel + stride..9);
        let mut net = Network::new(vec![
            LayerSpec::Conv2d {
                in_channels: in_c,
                out_channels: out_c,
                kernel,
                stride,
                padding,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: out_c,
                out_features: 3,
            },
        ])
        .unwrap();
        net.init_random(&mut rng);
        let frames = rng.random_range(1..4);
        let input = random_input(&mut rng, &[frames, in_c, hw, hw]);
        check(&mut net, &input, i % 3, &format!("conv2d config {i}"));
    }
}

#[test]
fn fd_relu_random_configs() {
    let mut rng = StdRng::seed_from_u64(103);
    for i in 0..4 {
        let mut net = Network::new(vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            },
        ])
        .unwrap();
        net.init_random(&mut rng);
        let input = random_input(&mut rng, &[2, 1, 6, 6]);
        check(&mut net, &input, i % 2, &format!("relu config {i}"));
    }
}

#[test]
fn fd_maxpool_random_configs() {
    let mut rng = StdRng::seed_from_u64(104);
    for i in 0..4 {
        let size = rng.random_range(2..4);
        let mut net = Network::new(vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::MaxPool2d { size, stride: size },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 3,
                out_features: 3,
            },
        ])
        .unwrap();
        net.init_random(&mut rng);
        let input = random_input(&mut rng, &[2, 2, 8, 8]);
        check(&mut net, &input, i % 3, &format!("maxpool config {i}"));
    }
}

#[test]
fn fd_gap_and_linear_random_configs() {
    let mut rng = StdRng::seed_from_u64(105);
    for i in 0..4 {
        let feats = rng.random_range(2..6);
        let mut net = Network::new(vec![LayerSpec::Linear {
            in_features: feats,
            out_features: 4,
        }])
        .unwrap();
        net.init_random(&mut rng);
        let input = random_input(&mut rng, &[3, feats]);
        check(&mut net, &input, i % 4, &format!("linear config {i}"));

        let mut net = Network::new(vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 2,
                out_features: 2,
            },
        ])
        .unwrap();
        net.init_random(&mut rng);
        let input = random_input(&mut rng, &[2, 2, 4, 4]);
        check(&mut net, &input, i % 2, &format!("gap config {i}"));
    }
}

#[test]
fn fd_temporal_shift_random_configs() {
    let mut rng = StdRng::seed_from_u64(106);
    for i in 0..4 {
        let mut net = Network::new(vec![
            LayerSpec::TemporalShift { fold_div: 4 },
            LayerSpec::Conv2d {
                in_channels: 4,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 3,
                out_features: 2,
            },
        ])
        .unwrap();
        net.init_random(&mut rng);
        let input = random_input(&mut rng, &[4, 4, 5, 5]);
        check(
            &mut net,
            &input,
            i % 2,
            &format!("temporal-shift config {i}"),
        );
    }
}

#[test]
fn fd_two_layer_net_seed_zero_passes() {
    let mut rng = StdRng::seed_from_u64(0);
    let mut net = Network::new(vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            in_features: 3,
            out_features: 2,
        },
    ])
    .unwrap();
    net.init_random(&mut rng);
    let input = random_input(&mut rng, &[1, 1, 6, 6]);
    check(&mut net, &input, 0, "two-layer seed 0");
}

#[test]
fn fd_negative_control_sign_flip_fails() {
    let mut rng = StdRng::seed_from_u64(107);
    let mut net = Network::new(vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 0,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            in_features: 2,
            out_features: 2,
        },
    ])
    .unwrap();
    net.init_random(&mut rng);
    let input = random_input(&mut rng, &[1, 1, 5, 5]);

    let (logits, mut tape) = net.forward(&input).unwrap();
    let (_, loss_grad) = softmax_ce_rows(&logits, 0).unwrap();
    let (mut grads, _) = net.backward(&mut tape, &loss_grad).unwrap();
    for ps in &mut grads.per_layer {
        for p in ps {
            p.scale(-1.0);
        }
    }
    let report = compare_grads_to_fd(&mut net, &input, 0, &grads, RTOL).unwrap();
    assert!(!report.pass, "sign-flipped gradients must fail the check");
}

#[test]
fn fd_zero_weights_zero_input_passes_exactly() {
    let mut net = Network::<f64>::new(vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            in_features: 2,
            out_features: 2,
        },
    ])
    .unwrap();
    let input = Tensor::zeros(&[1, 1, 4, 4]);
    let report = finite_difference_check(&mut net, &input, 0, RTOL).unwrap();
    assert!(report.pass);
    // every input-dependent path is dead: weight gradients are exactly
    // 0 analytic vs 0 numerical (biases still see the softmax pull)
    for p in report.per_param.iter().filter(|p| p.param == 0) {
        assert_eq!(p.max_abs_err, 0.0, "weight grads must be exactly 0 vs 0");
    }
}

#[test]
fn fd_full_backbone_stack() {
    // the desk backbone shape end to end as one flat stack
    let mut rng = StdRng::seed_from_u64(108);
    let mut net = Network::new(vec![
        LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2, stride: 2 },
        LayerSpec::Conv2d {
            in_channels: 4,
            out_channels: 6,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            in_features: 6,
            out_features: 4,
        },
    ])
    .unwrap();
    net.init_random(&mut rng);
    let input = random_input(&mut rng, &[2, 3, 8, 8]);
    check(&mut net, &input, 2, "backbone stack");
}
