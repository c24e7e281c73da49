//! Empirical falsification of certified radii: sample perturbations inside the
//! radius and check the guarantee on every one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::PerturbationBall;
use crate::cam::{cam_for_class, sorted_positions, TopKSet};
use crate::certify::{CertMethod, CertResult};
use crate::error::Result;
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guarantee {
    /// The top-k position set is unchanged.
    SameTopK,
    /// Every original top-k position stays within the top-`k2`.
    WithinTopK2(usize),
}

impl Guarantee {
    pub fn of(cert: &CertResult) -> Self {
        match (cert.method, cert.k2) {
            (CertMethod::RelaxedTopK, Some(k2)) => Guarantee::WithinTopK2(k2),
            _ => Guarantee::SameTopK,
        }
    }

    pub fn holds(&self, top: &TopKSet, cam: &[f64]) -> bool {
        let order = sorted_positions(cam);
        let limit = match *self {
            Guarantee::SameTopK => top.k,
            Guarantee::WithinTopK2(k2) => k2.min(cam.len()),
        };
        let head = &order[..limit];
        top.positions.iter().all(|p| head.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FalsificationReport {
    pub radius: f64,
    pub checked: usize,
    pub violations: usize,
}

#[derive(Debug, Clone)]
pub struct FalsifyConfig {
    pub samples: usize,
    pub seed: u64,
    pub clip: Option<(f64, f64)>,
}

/// Checks `guarantee` on random sign-corner and uniform perturbations of size
/// at most `radius`, plus every tensor in `probes` after projecting it into
/// the same ball.
pub fn falsify(
    net: &NetworkSpec,
    x: &Tensor,
    class_index: usize,
    top: &TopKSet,
    radius: f64,
    guarantee: Guarantee,
    config: &FalsifyConfig,
    probes: &[Tensor],
) -> Result<FalsificationReport> {
    let ball = PerturbationBall::new(x.clone(), radius, config.clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = FalsificationReport {
        radius,
        checked: 0,
        violations: 0,
    };
    let check = |y: &Tensor, report: &mut FalsificationReport| -> Result<()> {
        let cam = cam_for_class(net, y, class_index)?;
        report.checked += 1;
        if !guarantee.holds(top, cam.data()) {
            report.violations += 1;
        }
        Ok(())
    };
    for i in 0..config.samples {
        let mut y = x.clone();
        for v in y.data_mut() {
            let e = if i % 2 == 0 {
                if rng.gen::<bool>() {
                    radius
                } else {
                    -radius
                }
            } else {
                rng.gen_range(-radius..=radius)
            };
            *v += e;
        }
        ball.project(&mut y);
        check(&y, &mut report)?;
    }
    for p in probes {
        let mut y = p.clone();
        ball.project(&mut y);
        check(&y, &mut report)?;
    }
    Ok(report)
}
