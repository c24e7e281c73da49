//! Gradient-sign attack on the top-k CAM pixel set.
//!
//! The attack runs on the softplus surrogate of the network, whose CAM has
//! informative gradients. Starting from `x` it repeatedly steps
//! `α · sign(∇ D)` where `D(y) = -Σ_{i∈B} I(y)_i` sums the surrogate CAM over
//! the original top-k set `B`, projecting back into the ε-ball after every
//! step. Among all iterates it keeps the one sharing the fewest pixels with
//! `B`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{PerturbationBall, UNIT_BOX};
use crate::cam::{class_weights, compute_cam, top_k_of, weighted_map, TopKSet};
use crate::error::{Error, Result};
use crate::layers::DEFAULT_SOFTPLUS_SMOOTHING;
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size as a fraction of ε.
    pub step_scale: f64,
    pub smoothing: f64,
    pub clip: bool,
    pub seed: u64,
    /// Extra runs from uniformly random starting points in the ball.
    pub restarts: usize,
    /// Also evaluate every iterate on the original (ReLU) network.
    pub verify_original: bool,
    /// Class to attack; the original network's prediction when `None`.
    pub class_index: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            step_scale: 0.1,
            smoothing: DEFAULT_SOFTPLUS_SMOOTHING,
            clip: true,
            seed: 0,
            restarts: 0,
            verify_original: true,
            class_index: None,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::precondition("attack needs at least one step"));
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return Err(Error::precondition(format!(
                "step scale must lie in (0, 1], got {}",
                self.step_scale
            )));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::precondition(format!(
                "softplus smoothing must be positive, got {}",
                self.smoothing
            )));
        }
        Ok(())
    }
}

/// Best iterate as judged on the original network.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub common_top_k: usize,
    pub success: bool,
    pub perturbed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub epsilon: f64,
    pub perturbed: Tensor,
    /// Overlap between the surrogate top-k of `x` and of the returned iterate.
    pub common_top_k: usize,
    pub success: bool,
    pub dissimilarity: f64,
    /// Surrogate overlap of every iterate `y_0..=y_P` of the first run.
    pub trace: Vec<usize>,
    pub class_index: usize,
    pub verification: Option<Verification>,
    /// Every iterate of every run (only populated by [`top_k_attack_with_iterates`]).
    pub iterates: Vec<Tensor>,
}

impl AttackResult {
    /// Success on the original network when verified, else on the surrogate.
    pub fn verified_success(&self) -> bool {
        match &self.verification {
            Some(v) => v.success,
            None => self.success,
        }
    }
}

struct Objective<'a> {
    surrogate: NetworkSpec,
    original: &'a NetworkSpec,
    gap_index: usize,
    weights: Vec<f64>,
    surrogate_top: TopKSet,
    original_top: TopKSet,
}

impl Objective<'_> {
    /// `(surrogate overlap, D)` at `y`, and the gradient of `D` when requested.
    fn evaluate(&self, y: &Tensor, want_grad: bool) -> Result<(usize, f64, Option<Tensor>)> {
        let acts = self.surrogate.forward_prefix(y, self.gap_index)?;
        let features = &acts[self.gap_index];
        let cam = weighted_map(features, &self.weights);
        let k = self.surrogate_top.k;
        let now = top_k_of(cam.data(), k)?;
        let common = self.surrogate_top.common_with(&now.positions);
        let d = -self
            .surrogate_top
            .positions
            .iter()
            .map(|&p| cam.data()[p])
            .sum::<f64>();
        if !want_grad {
            return Ok((common, d, None));
        }
        let f = self.weights.len();
        let mut cot = Tensor::zeros(features.shape().to_vec());
        for &p in &self.surrogate_top.positions {
            for (kk, &w) in self.weights.iter().enumerate() {
                cot.data_mut()[p * f + kk] = -w;
            }
        }
        let grad = self.surrogate.pullback(&acts, self.gap_index, &cot)?;
        Ok((common, d, Some(grad)))
    }

    fn original_common(&self, y: &Tensor) -> Result<usize> {
        let acts = self.original.forward_prefix(y, self.gap_index)?;
        let cam = weighted_map(&acts[self.gap_index], &self.weights);
        let now = top_k_of(cam.data(), self.original_top.k)?;
        Ok(self.original_top.common_with(&now.positions))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn top_k_attack(
    net: &NetworkSpec,
    x: &Tensor,
    epsilon: f64,
    k: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(net, x, epsilon, k, config, false)
}

/// Like [`top_k_attack`] but also returns every iterate, for use as
/// attack-guided probes.
pub fn top_k_attack_with_iterates(
    net: &NetworkSpec,
    x: &Tensor,
    epsilon: f64,
    k: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(net, x, epsilon, k, config, true)
}

fn run_attack(
    net: &NetworkSpec,
    x: &Tensor,
    epsilon: f64,
    k: usize,
    config: &AttackConfig,
    keep_iterates: bool,
) -> Result<AttackResult> {
    config.validate()?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::precondition(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let layout = net.cam_layout()?;
    let original_cam = compute_cam(net, x, config.class_index)?;
    let class_index = original_cam.class_index;
    let weights = class_weights(net, class_index)?;
    let surrogate = if net.has_relu() {
        net.softplus_surrogate(config.smoothing)?
    } else {
        net.clone()
    };
    let surrogate_cam = {
        let acts = surrogate.forward_prefix(x, layout.gap_index)?;
        weighted_map(&acts[layout.gap_index], &weights)
    };
    let objective = Objective {
        surrogate,
        original: net,
        gap_index: layout.gap_index,
        surrogate_top: top_k_of(surrogate_cam.data(), k)?,
        original_top: top_k_of(original_cam.values.data(), k)?,
        weights,
    };
    let ball = PerturbationBall::new(x.clone(), epsilon, config.clip.then_some(UNIT_BOX))?;
    let alpha = config.step_scale * epsilon;

    // (common, D, step) ordering: fewer common, then larger D, then earlier
    let mut best: Option<(usize, f64, Tensor)> = None;
    let mut best_verified: Option<(usize, Tensor)> = None;
    let mut trace = Vec::new();
    let mut iterates = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for run in 0..=config.restarts {
        let mut y = x.clone();
        if run > 0 {
            for (v, &c) in y.data_mut().iter_mut().zip(x.data()) {
                *v = c + rng.gen_range(-1.0..=1.0) * epsilon;
            }
            ball.project(&mut y);
        }
        for step in 0..=config.steps {
            let last = step == config.steps;
            let (common, d, grad) = objective.evaluate(&y, !last && epsilon > 0.0)?;
            if run == 0 {
                trace.push(common);
            }
            let better = match &best {
                None => true,
                Some((bc, bd, _)) => common < *bc || (common == *bc && d > *bd),
            };
            if better {
                best = Some((common, d, y.clone()));
            }
            if config.verify_original {
                let oc = objective.original_common(&y)?;
                if best_verified.as_ref().map_or(true, |(b, _)| oc < *b) {
                    best_verified = Some((oc, y.clone()));
                }
            }
            if keep_iterates {
                iterates.push(y.clone());
            }
            let Some(grad) = grad else {
                if epsilon == 0.0 {
                    // every further iterate equals x
                    if run == 0 {
                        trace.resize(config.steps + 1, common);
                    }
                    break;
                }
                continue;
            };
            for (v, &g) in y.data_mut().iter_mut().zip(grad.data()) {
                *v += alpha * sign(g);
            }
            ball.project(&mut y);
        }
    }

    let (common, dissimilarity, perturbed) = best.expect("at least one iterate");
    let verification = best_verified.map(|(c, y)| Verification {
        common_top_k: c,
        success: c < k,
        perturbed: y,
    });
    Ok(AttackResult {
        epsilon,
        perturbed,
        common_top_k: common,
        success: common < k,
        dissimilarity,
        trace,
        class_index,
        verification,
        iterates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    /// Smallest ε with a successful attack; `None` if even `epsilon_hi` failed.
    pub epsilon: Option<f64>,
    pub attack: Option<AttackResult>,
    /// Every `(ε, success)` probe in order.
    pub probes: Vec<(f64, bool)>,
}

/// Bisects ε in `(0, epsilon_hi]` for the smallest successful attack.
///
/// Success is judged on the original network when `config.verify_original`
/// is set, so the returned ε always comes with a concrete counterexample.
pub fn attack_threshold_search(
    net: &NetworkSpec,
    x: &Tensor,
    k: usize,
    config: &AttackConfig,
    epsilon_hi: f64,
    iterations: usize,
) -> Result<ThresholdSearch> {
    if !(epsilon_hi > 0.0 && epsilon_hi.is_finite()) {
        return Err(Error::precondition(format!("epsilon_hi must be positive, got {epsilon_hi}")));
    }
    if iterations == 0 {
        return Err(Error::precondition("threshold search needs at least one iteration"));
    }
    let mut probes = Vec::with_capacity(iterations + 1);
    let top = top_k_attack(net, x, epsilon_hi, k, config)?;
    let ok = top.verified_success();
    probes.push((epsilon_hi, ok));
    if !ok {
        return Ok(ThresholdSearch {
            epsilon: None,
            attack: None,
            probes,
        });
    }
    let (mut lo, mut hi) = (0.0, epsilon_hi);
    let mut best = top;
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let res = top_k_attack(net, x, mid, k, config)?;
        let ok = res.verified_success();
        log::debug!("attack k={k}: ε={mid:e} {}", if ok { "success" } else { "failure" });
        probes.push((mid, ok));
        if ok {
            hi = mid;
            best = res;
        } else {
            lo = mid;
        }
    }
    Ok(ThresholdSearch {
        epsilon: Some(hi),
        attack: Some(best),
        probes,
    })
}
