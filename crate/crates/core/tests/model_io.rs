use std::path::PathBuf;

use camcert::io::{decode_image, encode_rawf32, network_to_cnnw, parse_network};
use camcert::layers::LayerSpec;
use camcert::{compute_cam, load_image, load_network, save_network, Error, NetworkSpec, Tensor};
use proptest::prelude::*;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn reference_model() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models/toy_signs.cnnw")
}

#[test]
fn golden_micro_file_loads_exact_weights() {
    let net = load_network(data("micro.cnnw")).unwrap();
    assert_eq!(net.input_shape(), &[2, 2, 1]);
    assert_eq!(net.class_count(), 3);
    let LayerSpec::Conv2d(conv) = &net.layers()[0] else { panic!("conv first") };
    assert_eq!(conv.kernel.data(), &[1.0, -0.5]);
    assert_eq!(conv.bias.as_ref().unwrap().data(), &[0.25, 0.125]);
    let LayerSpec::Dense(dense) = &net.layers()[3] else { panic!("dense last") };
    assert_eq!(dense.kernel.shape(), &[2, 3]);
    // 0.1 arrives as the nearest f32, widened
    assert_eq!(dense.kernel.data()[5], 0.1f32 as f64);

    // CAM oracle: f1 = relu(x + 0.25), f2 = relu(-0.5 x + 0.125), class 0 weights (1, 0.5)
    let x = Tensor::new(vec![2, 2, 1], vec![0.0, 0.5, 1.0, -1.0]).unwrap();
    let cam = compute_cam(&net, &x, Some(0)).unwrap();
    let expected: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| (v + 0.25f64).max(0.0) + 0.5 * (-0.5 * v + 0.125f64).max(0.0))
        .collect();
    assert_eq!(cam.values.data(), expected.as_slice());
}

#[test]
fn writer_output_is_stable() {
    let net = load_network(data("micro.cnnw")).unwrap();
    let text = network_to_cnnw(&net);
    let again = parse_network(&text).unwrap();
    assert_eq!(network_to_cnnw(&again), text);
    assert_eq!(again.layers(), net.layers());
}

#[test]
fn truncated_blob_is_a_parse_error() {
    match load_network(data("truncated.cnnw")) {
        Err(Error::Parse { offset, message }) => {
            assert!(offset > 0);
            assert!(message.contains("kernel"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_cam_tail_is_rejected() {
    assert!(matches!(load_network(data("dense_first.cnnw")), Err(Error::NotCamCompatible(_))));
}

#[test]
fn reference_model_has_expected_layout() {
    let net = load_network(reference_model()).unwrap();
    let layout = net.cam_layout().unwrap();
    assert_eq!(layout.gap_index, 9, "nine compute layers before pooling");
    assert_eq!(layout.feature_shape, (24, 24, 16));
    assert_eq!(net.class_count(), 43);
    let x = camcert::toy::toy_corpus(1, 0).remove(0).image;
    let acts = net.forward_network(&x).unwrap();
    assert_eq!(acts[9].shape(), &[24, 24, 16]);
    assert_eq!(acts.last().unwrap().shape(), &[43]);
    let cam = compute_cam(&net, &x, None).unwrap();
    assert_eq!(cam.values.shape(), &[24, 24]);
    assert!(cam.predicted);
}

#[test]
fn reference_model_classifies_toy_signs() {
    let net = load_network(reference_model()).unwrap();
    let corpus = camcert::toy::toy_corpus(60, 4242);
    let correct = corpus
        .iter()
        .filter(|s| net.logits(&s.image).unwrap().argmax() == s.class)
        .count();
    assert!(correct >= 57, "{correct}/60");
}

#[test]
fn ppm_sign_has_hwc_shape() {
    let t = load_image(data("sign48.ppm")).unwrap();
    assert_eq!(t.shape(), &[48, 48, 3]);
    let bytes = std::fs::read(data("sign48.ppm")).unwrap();
    let header_len = bytes.len() - 48 * 48 * 3;
    assert_eq!(t.data()[0], bytes[header_len] as f64 / 255.0);
}

#[test]
fn save_load_round_trip_through_disk() {
    let net = camcert::toy::reference_architecture(43, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.cnnw");
    save_network(&net, &path).unwrap();
    let back = load_network(&path).unwrap();
    // weights were f64 draws; the file stores f32
    for (a, b) in net.layers().iter().zip(back.layers()) {
        if let (LayerSpec::Conv2d(p), LayerSpec::Conv2d(q)) = (a, b) {
            for (u, v) in p.kernel.data().iter().zip(q.kernel.data()) {
                assert_eq!(*u as f32 as f64, *v);
            }
        }
    }
    save_network(&back, &path).unwrap();
    assert_eq!(load_network(&path).unwrap().layers(), back.layers());
}

fn f32_tensor(values: Vec<f32>, shape: Vec<usize>) -> Tensor {
    Tensor::new(shape, values.into_iter().map(f64::from).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cnnw_round_trip_is_bitwise(
        kernel in prop::collection::vec(-4.0f32..4.0, 2 * 2 * 2 * 3),
        bias in prop::collection::vec(-1.0f32..1.0, 3),
        dense in prop::collection::vec(-4.0f32..4.0, 3 * 4),
    ) {
        use camcert::layers::{Conv2d, Dense};
        let net = NetworkSpec::cam(
            vec![3, 3, 2],
            vec![
                LayerSpec::Conv2d(Conv2d::new(f32_tensor(kernel, vec![2, 2, 2, 3]), Some(f32_tensor(bias, vec![3])), 1, 1).unwrap()),
                LayerSpec::Softplus { smoothing: 3.5 },
                LayerSpec::MaxPool2d { window: 2, stride: 1 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense(Dense::new(f32_tensor(dense, vec![3, 4]), None).unwrap()),
            ],
        )
        .unwrap();
        let back = parse_network(&network_to_cnnw(&net)).unwrap();
        prop_assert_eq!(back.layers(), net.layers());
        prop_assert_eq!(back.input_shape(), net.input_shape());
    }

    #[test]
    fn rawf32_round_trip(values in prop::collection::vec(0.0f32..=1.0, 12)) {
        let t = f32_tensor(values, vec![2, 3, 2]);
        let back = decode_image(&encode_rawf32(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
