//! Certified and empirical robustness of top-k class activation maps.
//!
//! A CAM-compatible network is a stack of convolution, activation and
//! max-pool layers followed by global average pooling and one dense layer.
//! The CAM of class `c` weights the last feature maps by the dense column of
//! `c`. This crate bounds how much an ℓ∞ input perturbation can move that map,
//! turns the bounds into certified radii for the top-k pixel set, and attacks
//! the set to find empirical upper limits.

pub mod attack;
pub mod bounds;
pub mod cam;
pub mod certify;
pub mod dataset;
pub mod error;
pub mod falsify;
pub mod io;
pub mod layers;
pub mod lipschitz;
pub mod network;
pub mod tensor;
pub mod toy;

pub use attack::{attack_threshold_search, top_k_attack, AttackConfig, AttackResult};
pub use bounds::{cam_bounds, propagate_bounds, Backend, BoundMaps, LayerBounds, PerturbationBall};
pub use cam::{compute_cam, top_k, CamMap, TopKSet};
pub use certify::{certify_binary_search, check_certificate, CertConfig, CertMethod, CertMode, CertResult};
pub use error::{Error, Result};
pub use io::{load_image, load_network, save_network};
pub use layers::LayerSpec;
pub use lipschitz::{estimate_lipschitz, lipschitz_certify, Estimator};
pub use network::NetworkSpec;
pub use tensor::Tensor;
