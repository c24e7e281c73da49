mod common;

use camcert::certify::{check_relaxed_certificate, SOUNDNESS_SLACK};
use camcert::{
    cam_bounds, certify_binary_search, check_certificate, compute_cam, Backend, CertConfig, CertMode, PerturbationBall, Tensor,
};
use common::identity_cam_net;

fn unclipped(backend: Backend) -> CertConfig {
    CertConfig {
        backend,
        clip: None,
        ..Default::default()
    }
}

#[test]
fn binary_search_matches_closed_form_threshold() {
    // CAM = input; passes iff (0.7 - δ) >= (0.3 + δ) + slack
    let net = identity_cam_net(2);
    let x = Tensor::new(vec![1, 2, 1], vec![0.7, 0.3]).unwrap();
    let threshold = (0.4 - SOUNDNESS_SLACK) / 2.0;
    let p = 20;
    for backend in [Backend::Interval, Backend::LinearRelax] {
        let r = certify_binary_search(&net, &x, 1, CertMode::Exact, &unclipped(backend)).unwrap();
        assert_eq!(r.iterations, p);
        let width = 2f64.powi(-(p as i32));
        assert!(r.radius <= threshold);
        assert!(r.radius >= threshold * (1.0 - width) - width, "r = {}", r.radius);
        // bisection of [0, 1] only visits multiples of 2^-P
        assert_eq!(r.radius, (threshold / width).floor() * width);
        assert_eq!(r.bracket, (r.radius, r.radius + width));
    }
}

#[test]
fn passing_upper_end_returns_one() {
    let net = identity_cam_net(2);
    let x = Tensor::new(vec![1, 2, 1], vec![5.0, 0.0]).unwrap();
    for iterations in [1, 5, 20] {
        let cfg = CertConfig {
            iterations,
            ..unclipped(Backend::Interval)
        };
        let r = certify_binary_search(&net, &x, 1, CertMode::Exact, &cfg).unwrap();
        assert_eq!(r.radius, 1.0);
    }
}

#[test]
fn tie_certifies_zero() {
    let net = identity_cam_net(3);
    let x = Tensor::new(vec![1, 3, 1], vec![0.5, 0.5, 0.1]).unwrap();
    let r = certify_binary_search(&net, &x, 1, CertMode::Exact, &CertConfig::default()).unwrap();
    assert_eq!(r.radius, 0.0);
    assert_eq!(r.note.as_deref(), Some("tie"));
    // relaxing to k2 = 2 gets past the tie
    let r = certify_binary_search(&net, &x, 1, CertMode::Relaxed { k2: 2 }, &CertConfig::default()).unwrap();
    assert!(r.radius > 0.0);
    assert!(certify_binary_search(&net, &x, 2, CertMode::Relaxed { k2: 1 }, &CertConfig::default()).is_err());
}

#[test]
fn radii_pass_and_relaxation_is_monotone_on_reference_architecture() {
    let net = camcert::toy::reference_architecture(43, 8);
    let config = CertConfig {
        backend: Backend::Interval,
        ..Default::default()
    };
    for sample in camcert::toy::toy_corpus(3, 31) {
        let x = &sample.image;
        let k = 5;
        let exact = certify_binary_search(&net, x, k, CertMode::Exact, &config).unwrap();
        let same = certify_binary_search(&net, x, k, CertMode::Relaxed { k2: k }, &config).unwrap();
        assert_eq!(exact.radius.to_bits(), same.radius.to_bits());
        assert_eq!(exact.bracket, same.bracket);

        let ball = PerturbationBall::new(x.clone(), exact.radius, config.clip).unwrap();
        let maps = cam_bounds(&net, &ball, exact.class_index, config.backend).unwrap();
        assert!(check_certificate(&maps, &exact.top_k));
        assert_eq!(check_relaxed_certificate(&maps, &exact.top_k, k).unwrap(), check_certificate(&maps, &exact.top_k));

        let mut last = exact.radius;
        for k2 in k + 1..=k + 10 {
            let r = certify_binary_search(&net, x, k, CertMode::Relaxed { k2 }, &config).unwrap();
            assert!(r.radius >= last, "k2 = {k2}: {} < {last}", r.radius);
            last = r.radius;
        }
    }
}

#[test]
fn certificate_records_prediction_and_clip_flag() {
    let net = identity_cam_net(3);
    let x = Tensor::new(vec![1, 3, 1], vec![0.9, 0.2, 0.1]).unwrap();
    let cam = compute_cam(&net, &x, None).unwrap();
    let r = certify_binary_search(&net, &x, 1, CertMode::Exact, &CertConfig::default()).unwrap();
    assert_eq!(r.class_index, cam.class_index);
    assert!(r.clipped);
    assert_eq!(r.top_k.positions, vec![0]);
    let json = serde_json::to_string(&r).unwrap();
    let back: camcert::CertResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}
