//! Synthetic "toy signs": geometric glyphs on coloured discs, 48x48x3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Conv2d, Dense, LayerSpec};
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

pub const TOY_SIDE: usize = 48;
pub const TOY_CLASSES: usize = 6;
pub const TOY_CLASS_NAMES: [&str; TOY_CLASSES] = [
    "bar", "vertical_bar", "cross", "triangle", "ring_dot", "hollow",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub class: usize,
    pub image: Tensor,
}

type Rgb = [f64; 3];

const WHITE: Rgb = [0.95, 0.95, 0.95];
const BLACK: Rgb = [0.08, 0.08, 0.08];

fn disc_colour(class: usize) -> Rgb {
    match class {
        0 => [0.85, 0.1, 0.1],
        1 => [0.1, 0.25, 0.8],
        2 => [0.95, 0.8, 0.1],
        3 => [0.1, 0.6, 0.2],
        4 => [0.95, 0.95, 0.95],
        _ => [0.95, 0.5, 0.05],
    }
}

/// Colour of the glyph at offset `(u, v)` from the disc centre, in units of
/// the disc radius, or `None` where the disc colour shows through.
fn glyph(class: usize, u: f64, v: f64) -> Option<Rgb> {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => (u.abs() < 0.65 && v.abs() < 0.18).then_some(WHITE),
        1 => (u.abs() < 0.18 && v.abs() < 0.65).then_some(WHITE),
        2 => (((u - v).abs() < 0.2 || (u + v).abs() < 0.2) && r < 0.7).then_some(BLACK),
        3 => {
            // upward triangle with apex at v = -0.6 and base at v = 0.45
            let inside = v < 0.45 && v > -0.6 && u.abs() < (v + 0.6) * 0.6;
            inside.then_some(WHITE)
        }
        4 => {
            if r > 0.78 {
                Some([0.85, 0.1, 0.1])
            } else if r < 0.25 {
                Some(BLACK)
            } else {
                None
            }
        }
        _ => (r > 0.35 && r < 0.6).then_some(WHITE),
    }
}

/// Renders one sign of `class` with random placement, size, lighting and noise.
pub fn render_toy_sign(class: usize, rng: &mut impl Rng) -> Tensor {
    let class = class % TOY_CLASSES;
    let side = TOY_SIDE as f64;
    let cx = side / 2.0 + rng.gen_range(-4.0..4.0);
    let cy = side / 2.0 + rng.gen_range(-4.0..4.0);
    let radius = rng.gen_range(14.0..19.0);
    let light = rng.gen_range(0.7..1.1);
    let bg: Rgb = [
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.2..0.6),
    ];
    let bg_tilt = rng.gen_range(-0.15..0.15);
    let disc = disc_colour(class);
    let mut data = Vec::with_capacity(TOY_SIDE * TOY_SIDE * 3);
    for row in 0..TOY_SIDE {
        for col in 0..TOY_SIDE {
            let mut acc = [0.0; 3];
            // 2x2 supersampling softens the edges
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (col as f64 + sx - cx) / radius;
                let v = (row as f64 + sy - cy) / radius;
                let colour = if u * u + v * v <= 1.0 {
                    glyph(class, u, v).unwrap_or(disc)
                } else {
                    let shade = 1.0 + bg_tilt * (row as f64 / side - 0.5);
                    [bg[0] * shade, bg[1] * shade, bg[2] * shade]
                };
                for c in 0..3 {
                    acc[c] += colour[c] / 4.0;
                }
            }
            for a in acc {
                let noise = rng.gen_range(-0.04..0.04);
                data.push((a * light + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![TOY_SIDE, TOY_SIDE, 3], data).expect("toy image shape")
}

/// `count` samples cycling through the classes; sample `i` depends only on
/// `(seed, i)`, so a shorter corpus is a prefix of a longer one.
pub fn toy_corpus(count: usize, seed: u64) -> Vec<ToySample> {
    (0..count)
        .map(|i| {
            let class = i % TOY_CLASSES;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            ToySample {
                id: format!("toy_{i:05}_c{class}"),
                class,
                image: render_toy_sign(class, &mut rng),
            }
        })
        .collect()
}

/// Randomly initialised (He-uniform) network with the reference CAM
/// architecture: two 8-filter and two 16-filter 3x3 convs around a 2x2
/// max-pool, then global average pooling and a dense layer.
pub fn reference_architecture(classes: usize, seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |cin: usize, cout: usize| {
        let limit = (6.0 / (9 * cin) as f64).sqrt();
        let kernel = (0..9 * cin * cout).map(|_| rng.gen_range(-limit..limit)).collect();
        let bias = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
        LayerSpec::Conv2d(
            Conv2d::new(
                Tensor::new(vec![3, 3, cin, cout], kernel).expect("kernel shape"),
                Some(Tensor::new(vec![cout], bias).expect("bias shape")),
                1,
                1,
            )
            .expect("valid conv"),
        )
    };
    let mut layers = vec![
        conv(3, 8),
        LayerSpec::Relu,
        conv(8, 8),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        conv(8, 16),
        LayerSpec::Relu,
        conv(16, 16),
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
    ];
    let limit = (6.0 / 16.0_f64).sqrt();
    let dense = (0..16 * classes).map(|_| rng.gen_range(-limit..limit)).collect();
    layers.push(LayerSpec::Dense(
        Dense::new(Tensor::new(vec![16, classes], dense).expect("dense shape"), None).expect("valid dense"),
    ));
    NetworkSpec::cam(vec![TOY_SIDE, TOY_SIDE, 3], layers).expect("reference architecture is CAM compatible")
}
