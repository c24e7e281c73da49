//! Command-line definitions.

use std::path::PathBuf;

use camcert::attack::AttackConfig;
use camcert::layers::DEFAULT_SOFTPLUS_SMOOTHING;
use camcert::Backend;
use clap::{Args, Parser, Subcommand, ValueEnum};

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: camcert::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "camcert",
    version,
    about = "Certify and attack the top-k pixel set of class activation maps",
    after_help = "Set CORGI_LOG (error, warn, info, debug, trace) to control logging."
)]
pub struct Cli {
    /// Model in CNNW v1 format.
    #[arg(long, global = true, default_value = "models/toy_signs.cnnw")]
    pub model: PathBuf,

    /// Bound propagation backend: interval or linear.
    #[arg(long, global = true, default_value = "linear", value_parser = parse_backend)]
    pub backend: Backend,

    /// Worker threads for per-image work; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Seed for image sampling, attack restarts and toy data.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ImageArgs {
    /// Input image (PPM P6 or RAWF32).
    #[arg(long)]
    pub image: PathBuf,

    /// Size of the top-k pixel set.
    #[arg(long, short, default_value_t = 15)]
    pub k: usize,

    /// Class whose CAM is used; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    /// Gradient steps per attack run.
    #[arg(long, default_value_t = 300)]
    pub steps: usize,

    /// Step size as a fraction of epsilon.
    #[arg(long, default_value_t = 0.1)]
    pub step_scale: f64,

    /// Softplus smoothing of the attack surrogate.
    #[arg(long, default_value_t = DEFAULT_SOFTPLUS_SMOOTHING)]
    pub smoothing: f64,

    /// Additional runs from random starting points.
    #[arg(long, default_value_t = 0)]
    pub restarts: usize,

    /// Upper end of the epsilon threshold search.
    #[arg(long, default_value_t = 0.1)]
    pub eps_hi: f64,

    /// Bisection steps of the threshold search.
    #[arg(long, default_value_t = 10)]
    pub search_iters: usize,
}

impl AttackArgs {
    pub fn config(&self, seed: u64, clip: bool, class_index: Option<usize>) -> AttackConfig {
        AttackConfig {
            steps: self.steps,
            step_scale: self.step_scale,
            smoothing: self.smoothing,
            clip,
            seed,
            restarts: self.restarts,
            verify_original: true,
            class_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    /// Bound propagation with binary search.
    Corgi,
    /// Lipschitz margin bound.
    Lipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Ppm,
    Rawf32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the CAM and its top-k set; writes cam.rawf32 and topk_mask.ppm.
    Cam(ImageArgs),

    /// Certified radius for the top-k set.
    Certify {
        #[command(flatten)]
        image: ImageArgs,

        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,

        /// Relaxed mode: top-k must stay within the top-k2.
        #[arg(long)]
        k2: Option<usize>,

        /// Relaxed mode: certify every k2 in k..=k+N and write k2_sweep.csv.
        #[arg(long, value_name = "N")]
        k2_sweep: Option<usize>,

        #[arg(long, value_enum, default_value_t = MethodArg::Corgi)]
        method: MethodArg,

        /// Region radius for the Lipschitz method.
        #[arg(long, default_value_t = 1.0)]
        delta_cap: f64,

        /// Classification-robustness radius to fold into the result with min.
        #[arg(long)]
        classification_radius: Option<f64>,

        /// Bisection steps.
        #[arg(long, default_value_t = 20)]
        iters: usize,

        /// Do not intersect the perturbation ball with [0, 1].
        #[arg(long)]
        no_clip: bool,
    },

    /// Top-k attack at a fixed epsilon or with a threshold search.
    Attack {
        #[command(flatten)]
        image: ImageArgs,

        /// Perturbation budget (l-infinity).
        #[arg(long, required_unless_present = "search")]
        epsilon: Option<f64>,

        /// Search for the smallest successful epsilon instead.
        #[arg(long, conflicts_with = "epsilon")]
        search: bool,

        #[command(flatten)]
        attack: AttackArgs,

        #[arg(long)]
        no_clip: bool,
    },

    /// Certified radius against attack threshold over an image set.
    Compare {
        /// Image directory (flat or one numeric subdirectory per class).
        #[arg(long, required_unless_present = "toy", conflicts_with = "toy")]
        images: Option<PathBuf>,

        /// Use N generated toy images instead of a directory.
        #[arg(long, value_name = "N")]
        toy: Option<usize>,

        /// Evaluate a seeded random subset of this many images.
        #[arg(long)]
        samples: Option<usize>,

        #[arg(long, short, default_value_t = 15)]
        k: usize,

        /// Certify the relaxed top-k2 property instead of the exact one.
        #[arg(long)]
        k2: Option<usize>,

        #[arg(long, default_value_t = 20)]
        iters: usize,

        #[command(flatten)]
        attack: AttackArgs,

        #[arg(long)]
        no_clip: bool,
    },

    /// CAM gap, certified radius and attack threshold for k over a range.
    GapSweep {
        /// Input images; repeat for several.
        #[arg(long, required_unless_present = "toy", conflicts_with = "toy")]
        image: Vec<PathBuf>,

        /// Use N generated toy images instead.
        #[arg(long, value_name = "N")]
        toy: Option<usize>,

        #[arg(long, default_value_t = 1)]
        k_min: usize,

        #[arg(long, default_value_t = 50)]
        k_max: usize,

        #[arg(long, default_value_t = 20)]
        iters: usize,

        #[command(flatten)]
        attack: AttackArgs,

        #[arg(long)]
        no_clip: bool,
    },

    /// Write synthetic toy sign images, one numeric directory per class.
    GenToy {
        #[arg(long, default_value_t = 60)]
        count: usize,

        #[arg(long, value_enum, default_value_t = ImageFormat::Ppm)]
        format: ImageFormat,
    },
}
