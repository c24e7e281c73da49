mod common;

use camcert::bounds::{bound_layers, bounds_monotonicity_check, propagate_bounds};
use camcert::cam::cam_for_class;
use camcert::layers::{Conv2d, Dense, LayerSpec};
use camcert::{cam_bounds, compute_cam, Backend, NetworkSpec, PerturbationBall, Tensor};
use common::{corners, micro_net, random_tensor, rng};
use rand::Rng;

const BACKENDS: [Backend; 2] = [Backend::Interval, Backend::LinearRelax];
const SLACK: f64 = 1e-9;

/// Counts CAM and intermediate-layer values of `y` escaping the bounds.
fn escapes(net: &NetworkSpec, ball: &PerturbationBall, backend: Backend, samples: &mut dyn Iterator<Item = Tensor>) -> (usize, usize) {
    let count = net.cam_layout().unwrap().gap_index;
    let layers = bound_layers(net, count, ball, backend).unwrap();
    let class = net.class_count() - 1;
    let maps = cam_bounds(net, ball, class, backend).unwrap();
    let (mut checked, mut bad) = (0, 0);
    for mut y in samples {
        ball.project(&mut y);
        let acts = net.forward_prefix(&y, count).unwrap();
        for (b, a) in layers.iter().zip(&acts[1..]) {
            if !b.contains(a, SLACK) {
                bad += 1;
            }
        }
        let cam = cam_for_class(net, &y, class).unwrap();
        for i in 0..cam.len() {
            let v = cam.data()[i];
            if v < maps.lower.data()[i] - SLACK || v > maps.upper.data()[i] + SLACK {
                bad += 1;
            }
        }
        checked += 1;
    }
    (checked, bad)
}

#[test]
fn micro_nets_corners_and_samples_stay_inside_bounds() {
    let start = std::time::Instant::now();
    let mut total = 0;
    for which in 0..5 {
        let net = micro_net(which, 40 + which as u64);
        assert!(net.input_len() <= 12);
        let r = &mut rng(which as u64);
        let x = random_tensor(r, net.input_shape().to_vec(), 0.0, 1.0);
        for &delta in &[1e-3, 1e-2, 1e-1] {
            for clip in [None, Some((0.0, 1.0))] {
                let ball = PerturbationBall::new(x.clone(), delta, clip).unwrap();
                for backend in BACKENDS {
                    let (n, bad) = escapes(&net, &ball, backend, &mut corners(&x, delta));
                    assert_eq!(n, 1 << net.input_len());
                    assert_eq!(bad, 0, "net {which} δ={delta} {backend} clip={clip:?}: corner escapes");
                    let mut sampler = (0..10_000).map(|_| {
                        let mut y = x.clone();
                        for v in y.data_mut() {
                            *v += r.gen_range(-delta..=delta);
                        }
                        y
                    });
                    let (n, bad) = escapes(&net, &ball, backend, &mut sampler);
                    assert_eq!(n, 10_000);
                    assert_eq!(bad, 0, "net {which} δ={delta} {backend} clip={clip:?}: sample escapes");
                    total += n;
                }
            }
        }
    }
    println!("checked {total} random samples plus all corners in {:?}", start.elapsed());
}

#[test]
fn zero_radius_reproduces_forward_pass_exactly() {
    for which in 0..5 {
        let net = micro_net(which, 7);
        let x = random_tensor(&mut rng(9), net.input_shape().to_vec(), 0.0, 1.0);
        let ball = PerturbationBall::new(x.clone(), 0.0, Some((0.0, 1.0))).unwrap();
        let cam = compute_cam(&net, &x, None).unwrap();
        let features = net.forward_prefix(&x, net.cam_layout().unwrap().gap_index).unwrap();
        for backend in BACKENDS {
            let f = propagate_bounds(&net, &ball, backend).unwrap();
            assert_eq!(f.lower.data(), features.last().unwrap().data());
            assert_eq!(f.upper.data(), features.last().unwrap().data());
            let maps = cam_bounds(&net, &ball, cam.class_index, backend).unwrap();
            assert_eq!(maps.lower.data(), cam.values.data());
            assert_eq!(maps.upper.data(), cam.values.data());
        }
    }
}

#[test]
fn one_by_one_conv_example() {
    // weight 2, bias 0, ReLU; x = 1, δ = 0.25 → [1.5, 2.5]
    let net = NetworkSpec::cam(
        vec![1, 1, 1],
        vec![
            LayerSpec::Conv2d(Conv2d::new(Tensor::full(vec![1, 1, 1, 1], 2.0), None, 1, 0).unwrap()),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense(Dense::new(Tensor::full(vec![1, 1], 1.0), None).unwrap()),
        ],
    )
    .unwrap();
    let ball = PerturbationBall::new(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(), 0.25, None).unwrap();
    for backend in BACKENDS {
        let f = propagate_bounds(&net, &ball, backend).unwrap();
        assert_eq!((f.lower.data()[0], f.upper.data()[0]), (1.5, 2.5), "{backend}");
    }
}

#[test]
fn two_pixel_mixed_sign_dense_net_contains_grid_range() {
    let net = NetworkSpec::new(
        vec![2],
        vec![
            LayerSpec::Dense(Dense::new(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, -1.5, 1.0, 2.0]).unwrap(), Some(Tensor::from_slice(&[0.1, -0.2, 0.0]))).unwrap()),
            LayerSpec::Relu,
            LayerSpec::Dense(Dense::new(Tensor::new(vec![3, 1], vec![1.0, -1.0, 0.7]).unwrap(), None).unwrap()),
        ],
    )
    .unwrap();
    let x = Tensor::from_slice(&[0.3, -0.2]);
    let delta = 0.4;
    let ball = PerturbationBall::new(x.clone(), delta, None).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let n = 1000;
    for i in 0..n {
        for j in 0..n {
            let y = Tensor::from_slice(&[
                x.data()[0] - delta + 2.0 * delta * i as f64 / (n - 1) as f64,
                x.data()[1] - delta + 2.0 * delta * j as f64 / (n - 1) as f64,
            ]);
            let v = net.logits(&y).unwrap().data()[0];
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    for backend in BACKENDS {
        let b = bound_layers(&net, 3, &ball, backend).unwrap();
        let (l, u) = (b[2].lower.data()[0], b[2].upper.data()[0]);
        println!("{backend}: grid range [{lo:.4}, {hi:.4}], bounds [{l:.4}, {u:.4}]");
        assert!(l <= lo + SLACK && u >= hi - SLACK, "{backend}: [{l}, {u}] misses [{lo}, {hi}]");
    }
}

#[test]
fn linear_backend_is_never_looser_than_interval() {
    for which in 0..5 {
        let net = micro_net(which, 11);
        let x = random_tensor(&mut rng(3), net.input_shape().to_vec(), 0.0, 1.0);
        let ball = PerturbationBall::new(x, 0.05, None).unwrap();
        let i = propagate_bounds(&net, &ball, Backend::Interval).unwrap();
        let l = propagate_bounds(&net, &ball, Backend::LinearRelax).unwrap();
        assert!(l.mean_width() <= i.mean_width() + 1e-12);
    }
}

#[test]
fn monotone_in_radius_on_micro_nets() {
    for which in 0..5 {
        let net = micro_net(which, 21);
        let x = random_tensor(&mut rng(4), net.input_shape().to_vec(), 0.0, 1.0);
        for backend in BACKENDS {
            let report = bounds_monotonicity_check(&net, &x, 0, backend, &[0.0, 1e-3, 1e-2, 5e-2, 1e-1], Some((0.0, 1.0))).unwrap();
            assert_eq!(report.violations, 0, "net {which} {backend}: {report:?}");
        }
    }
}

#[test]
fn monotonicity_grid_on_reference_architecture() {
    let net = camcert::toy::reference_architecture(43, 2);
    let x = camcert::toy::toy_corpus(1, 5).remove(0).image;
    let class = compute_cam(&net, &x, None).unwrap().class_index;
    for backend in BACKENDS {
        let report = bounds_monotonicity_check(&net, &x, class, backend, &[0.0, 0.001, 0.01], Some((0.0, 1.0))).unwrap();
        assert_eq!(report.violations, 0, "{backend}: {report:?}");
        let single = bounds_monotonicity_check(&net, &x, class, backend, &[0.01], Some((0.0, 1.0))).unwrap();
        assert_eq!(single.max_violation, 0.0);
    }
    assert!(bounds_monotonicity_check(&net, &x, class, Backend::Interval, &[0.01, 0.001], None).is_err());
}

#[test]
fn reference_architecture_samples_stay_inside_bounds() {
    let net = camcert::toy::reference_architecture(43, 3);
    let x = camcert::toy::toy_corpus(2, 6).remove(1).image;
    let class = compute_cam(&net, &x, None).unwrap().class_index;
    let r = &mut rng(12);
    for backend in BACKENDS {
        let ball = PerturbationBall::new(x.clone(), 0.01, Some((0.0, 1.0))).unwrap();
        let maps = cam_bounds(&net, &ball, class, backend).unwrap();
        for s in 0..1000 {
            let mut y = x.clone();
            for v in y.data_mut() {
                *v += if s % 2 == 0 { if r.gen() { 0.01 } else { -0.01 } } else { r.gen_range(-0.01..=0.01) };
            }
            ball.project(&mut y);
            let cam = cam_for_class(&net, &y, class).unwrap();
            for i in 0..cam.len() {
                let v = cam.data()[i];
                assert!(v >= maps.lower.data()[i] - SLACK && v <= maps.upper.data()[i] + SLACK, "{backend} sample {s} pixel {i}");
            }
        }
    }
}
