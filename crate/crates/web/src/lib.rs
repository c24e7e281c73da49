//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes the image as a flat `48*48*3` RGB array in `[0, 1]`
//! and returns a JSON string; the page parses it with `JSON.parse`.

use camcert::attack::{top_k_attack, AttackConfig};
use camcert::bounds::UNIT_BOX;
use camcert::certify::{certify_binary_search, CertConfig, CertMode};
use camcert::io::parse_network;
use camcert::toy::{render_toy_sign, TOY_CLASSES, TOY_CLASS_NAMES, TOY_SIDE};
use camcert::{cam_bounds, compute_cam, top_k, Backend, NetworkSpec, PerturbationBall, Tensor};
use rand::SeedableRng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MODEL: &str = include_str!("../../../models/toy_signs.cnnw");

#[derive(Serialize)]
struct CamView {
    class_index: usize,
    class_name: String,
    side: usize,
    cam: Vec<f64>,
    positions: Vec<usize>,
    gap: f64,
}

#[derive(Serialize)]
struct CertView {
    radius: f64,
    bracket: (f64, f64),
    note: Option<String>,
    /// CAM bounds at the certified radius.
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize)]
struct AttackView {
    epsilon: f64,
    success: bool,
    common_top_k: usize,
    image: Vec<f64>,
    cam: CamView,
}

fn class_name(i: usize) -> String {
    TOY_CLASS_NAMES.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string())
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("views serialize")
}

/// The demo state: the embedded toy model.
#[wasm_bindgen]
pub struct Demo {
    net: NetworkSpec,
}

impl Demo {
    pub fn load() -> Result<Demo, String> {
        let net = parse_network(MODEL).map_err(|e| e.to_string())?;
        Ok(Demo { net })
    }

    fn image(&self, pixels: &[f64]) -> Result<Tensor, String> {
        Tensor::new(vec![TOY_SIDE, TOY_SIDE, 3], pixels.to_vec()).map_err(|e| e.to_string())
    }

    fn cam_view(&self, x: &Tensor, k: usize) -> Result<CamView, String> {
        let cam = compute_cam(&self.net, x, None).map_err(|e| e.to_string())?;
        let top = top_k(&cam, k).map_err(|e| e.to_string())?;
        Ok(CamView {
            class_index: cam.class_index,
            class_name: class_name(cam.class_index),
            side: cam.side().0,
            cam: cam.values.data().to_vec(),
            positions: top.positions.clone(),
            gap: top.gap(),
        })
    }

    pub fn cam_json(&self, pixels: &[f64], k: usize) -> Result<String, String> {
        Ok(to_json(&self.cam_view(&self.image(pixels)?, k)?))
    }

    pub fn certify_json(&self, pixels: &[f64], k: usize, linear: bool) -> Result<String, String> {
        let x = self.image(pixels)?;
        let config = CertConfig {
            backend: if linear { Backend::LinearRelax } else { Backend::Interval },
            ..CertConfig::default()
        };
        let cert = certify_binary_search(&self.net, &x, k, CertMode::Exact, &config).map_err(|e| e.to_string())?;
        let ball = PerturbationBall::new(x, cert.radius, Some(UNIT_BOX)).map_err(|e| e.to_string())?;
        let maps = cam_bounds(&self.net, &ball, cert.class_index, config.backend).map_err(|e| e.to_string())?;
        Ok(to_json(&CertView {
            radius: cert.radius,
            bracket: cert.bracket,
            note: cert.note,
            lower: maps.lower.data().to_vec(),
            upper: maps.upper.data().to_vec(),
        }))
    }

    pub fn attack_json(&self, pixels: &[f64], k: usize, epsilon: f64, steps: usize) -> Result<String, String> {
        let x = self.image(pixels)?;
        let config = AttackConfig {
            steps,
            ..AttackConfig::default()
        };
        let a = top_k_attack(&self.net, &x, epsilon, k, &config).map_err(|e| e.to_string())?;
        let (perturbed, common) = match &a.verification {
            Some(v) => (v.perturbed.clone(), v.common_top_k),
            None => (a.perturbed.clone(), a.common_top_k),
        };
        let cam = self.cam_view(&perturbed, k)?;
        Ok(to_json(&AttackView {
            epsilon,
            success: a.verified_success(),
            common_top_k: common,
            image: perturbed.data().to_vec(),
            cam,
        }))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Demo::load().map_err(|e| JsError::new(&e))
    }

    /// Top-k CAM of the predicted class.
    pub fn cam(&self, pixels: &[f64], k: usize) -> Result<String, JsError> {
        self.cam_json(pixels, k).map_err(|e| JsError::new(&e))
    }

    /// Certified radius and the CAM bounds at that radius.
    pub fn certify(&self, pixels: &[f64], k: usize, linear: bool) -> Result<String, JsError> {
        self.certify_json(pixels, k, linear).map_err(|e| JsError::new(&e))
    }

    /// Top-k attack at a fixed budget.
    pub fn attack(&self, pixels: &[f64], k: usize, epsilon: f64, steps: usize) -> Result<String, JsError> {
        self.attack_json(pixels, k, epsilon, steps).map_err(|e| JsError::new(&e))
    }
}

/// A fresh toy sign as flat RGB.
#[wasm_bindgen]
pub fn toy_sign(class: usize, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    render_toy_sign(class % TOY_CLASSES, &mut rng).data().to_vec()
}

#[wasm_bindgen]
pub fn class_names() -> String {
    to_json(&TOY_CLASS_NAMES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_operations_round_trip() {
        let demo = Demo::load().unwrap();
        let x = toy_sign(4, 1);
        assert_eq!(x.len(), 48 * 48 * 3);
        let cam: serde_json::Value = serde_json::from_str(&demo.cam_json(&x, 10).unwrap()).unwrap();
        assert_eq!(cam["side"], 24);
        assert_eq!(cam["positions"].as_array().unwrap().len(), 10);
        assert_eq!(cam["class_name"], "ring_dot");

        let cert: serde_json::Value = serde_json::from_str(&demo.certify_json(&x, 10, false).unwrap()).unwrap();
        let r = cert["radius"].as_f64().unwrap();
        assert!(r > 0.0 && r < 0.01);
        let lower = cert["lower"].as_array().unwrap();
        let values = cam["cam"].as_array().unwrap();
        assert_eq!(lower.len(), 576);
        assert!(lower.iter().zip(values).all(|(l, v)| l.as_f64() <= v.as_f64()));

        let attack: serde_json::Value = serde_json::from_str(&demo.attack_json(&x, 10, 0.0, 3).unwrap()).unwrap();
        assert_eq!(attack["success"], false);
        assert_eq!(attack["common_top_k"], 10);
        assert_eq!(attack["image"].as_array().unwrap().len(), x.len());
    }

    #[test]
    fn bad_input_is_an_error() {
        let demo = Demo::load().unwrap();
        assert!(demo.cam_json(&[0.5; 12], 5).is_err());
        assert!(demo.cam_json(&toy_sign(0, 0), 0).is_err());
    }
}
