#![allow(dead_code)]

use camcert::layers::{Conv2d, Dense, LayerSpec};
use camcert::{NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn conv(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, padding: usize) -> LayerSpec {
    conv_strided(rng, k, cin, cout, 1, padding)
}

pub fn conv_strided(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, stride: usize, padding: usize) -> LayerSpec {
    let kernel = random_tensor(rng, vec![k, k, cin, cout], -1.0, 1.0);
    let bias = random_tensor(rng, vec![cout], -0.5, 0.5);
    LayerSpec::Conv2d(Conv2d::new(kernel, Some(bias), stride, padding).unwrap())
}

pub fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> LayerSpec {
    let kernel = random_tensor(rng, vec![inputs, outputs], -1.0, 1.0);
    let bias = random_tensor(rng, vec![outputs], -0.5, 0.5);
    LayerSpec::Dense(Dense::new(kernel, Some(bias)).unwrap())
}

/// Five small CAM networks, each with at most 12 input values, covering every
/// layer type.
pub fn micro_net(which: usize, seed: u64) -> NetworkSpec {
    let r = &mut rng(seed);
    let (shape, layers) = match which % 5 {
        0 => (
            vec![3, 3, 1],
            vec![
                conv(r, 3, 1, 2, 1),
                LayerSpec::Relu,
                conv(r, 3, 2, 2, 1),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                dense(r, 2, 3),
            ],
        ),
        1 => (
            vec![2, 2, 3],
            vec![
                conv(r, 1, 3, 4, 0),
                LayerSpec::Relu,
                conv(r, 2, 4, 3, 1),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                dense(r, 3, 2),
            ],
        ),
        2 => (
            vec![4, 3, 1],
            vec![
                conv(r, 3, 1, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 1 },
                conv(r, 1, 3, 2, 0),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                dense(r, 2, 3),
            ],
        ),
        3 => (
            vec![3, 4, 1],
            vec![
                conv(r, 3, 1, 3, 1),
                LayerSpec::Softplus { smoothing: 2.0 },
                conv(r, 3, 3, 2, 1),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                dense(r, 2, 2),
            ],
        ),
        _ => (
            vec![2, 3, 2],
            vec![
                conv(r, 1, 2, 4, 0),
                LayerSpec::Relu,
                conv(r, 3, 4, 4, 1),
                LayerSpec::Relu,
                conv(r, 1, 4, 3, 0),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                dense(r, 3, 3),
            ],
        ),
    };
    NetworkSpec::cam(shape, layers).unwrap()
}

/// CAM network whose map is the input itself: `[1, n, 1]` input, identity
/// 1x1 conv, no activation.
pub fn identity_cam_net(n: usize) -> NetworkSpec {
    NetworkSpec::cam(
        vec![1, n, 1],
        vec![
            LayerSpec::Conv2d(Conv2d::new(Tensor::full(vec![1, 1, 1, 1], 1.0), None, 1, 0).unwrap()),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense(Dense::new(Tensor::full(vec![1, 1], 1.0), None).unwrap()),
        ],
    )
    .unwrap()
}

/// Every sign corner of the box `x ± radius`, in binary counting order.
pub fn corners(x: &Tensor, radius: f64) -> impl Iterator<Item = Tensor> + '_ {
    let n = x.len();
    assert!(n <= 16, "corner enumeration is exponential");
    (0..1u32 << n).map(move |mask| {
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += if mask >> i & 1 == 1 { radius } else { -radius };
        }
        y
    })
}
