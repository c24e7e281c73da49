mod common;

use camcert::layers::{softplus, LayerSpec};
use camcert::{NetworkSpec, Tensor};
use common::{micro_net, random_tensor, rng};
use proptest::prelude::*;

/// Central finite-difference gradient of `<logits(x), cot>`.
fn finite_difference(net: &NetworkSpec, x: &Tensor, cot: &Tensor, h: f64) -> Vec<f64> {
    let loss = |y: &Tensor| -> f64 {
        let out = net.logits(y).unwrap();
        out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
    };
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

#[test]
fn backprop_matches_finite_differences_on_100_probes() {
    let mut worst: f64 = 0.0;
    for probe in 0..100u64 {
        let net = micro_net(probe as usize, 1000 + probe).softplus_surrogate(10.0).unwrap();
        assert!(!net.has_relu());
        let r = &mut rng(probe);
        let x = random_tensor(r, net.input_shape().to_vec(), 0.0, 1.0);
        let cot = random_tensor(r, vec![net.class_count()], -1.0, 1.0);
        let grad = net.backward_network(&x, &cot).unwrap();
        let fd = finite_difference(&net, &x, &cot, 1e-5);
        for (&g, &n) in grad.data().iter().zip(&fd) {
            worst = worst.max(relative_error(g, n));
        }
    }
    println!("max relative gradient error over 100 probes: {worst:.3e}");
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn single_dense_gradient_is_its_weight() {
    let net = NetworkSpec::new(
        vec![1],
        vec![LayerSpec::Dense(
            camcert::layers::Dense::new(Tensor::full(vec![1, 1], 3.0), None).unwrap(),
        )],
    )
    .unwrap();
    let g = net.backward_network(&Tensor::from_slice(&[0.4]), &Tensor::from_slice(&[1.0])).unwrap();
    assert_eq!(g.data(), &[3.0]);
}

#[test]
fn forward_network_returns_every_activation() {
    let net = NetworkSpec::new(
        vec![2],
        vec![LayerSpec::Dense(
            camcert::layers::Dense::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), None).unwrap(),
        )],
    )
    .unwrap();
    let acts = net.forward_network(&Tensor::from_slice(&[1.0, 2.0])).unwrap();
    assert_eq!(acts.len(), 2);
    assert_eq!(acts[0].data(), &[1.0, 2.0]);
    assert_eq!(acts[1].data(), &[1.0, 2.0]);
}

#[test]
fn conv_relu_micro_net_matches_per_pixel_formula() {
    let r = &mut rng(5);
    let net = NetworkSpec::new(vec![3, 3, 2], vec![common::conv(r, 1, 2, 3, 0), LayerSpec::Relu]).unwrap();
    let x = random_tensor(r, vec![3, 3, 2], -1.0, 1.0);
    let out = net.logits(&x).unwrap();
    let LayerSpec::Conv2d(conv) = &net.layers()[0] else { unreachable!() };
    for p in 0..9 {
        for co in 0..3 {
            let mut v = conv.bias_at(co);
            for ci in 0..2 {
                v += x.data()[p * 2 + ci] * conv.kernel.data()[ci * 3 + co];
            }
            assert_eq!(out.data()[p * 3 + co], v.max(0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_bitwise_deterministic(which in 0usize..5, seed in 0u64..1000) {
        let net = micro_net(which, seed);
        let x = random_tensor(&mut rng(seed), net.input_shape().to_vec(), 0.0, 1.0);
        let a = net.forward_network(&x).unwrap();
        let b = net.forward_network(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn activations_and_pooling_are_monotone(
        base in prop::collection::vec(-5.0f64..5.0, 16),
        bump in prop::collection::vec(0.0f64..2.0, 16),
        t in 0.5f64..50.0,
    ) {
        let lo = Tensor::new(vec![4, 4, 1], base.clone()).unwrap();
        let hi = Tensor::new(vec![4, 4, 1], base.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        for layer in [
            LayerSpec::Relu,
            LayerSpec::Softplus { smoothing: t },
            LayerSpec::MaxPool2d { window: 2, stride: 2 },
            LayerSpec::MaxPool2d { window: 3, stride: 1 },
        ] {
            let a = layer.forward(0, &lo).unwrap();
            let b = layer.forward(0, &hi).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u <= v), "{}", layer.name());
        }
    }

    #[test]
    fn softplus_approaches_relu(v in -10.0f64..10.0) {
        prop_assert!((softplus(v, 1000.0) - v.max(0.0)).abs() < 1e-2);
    }
}
