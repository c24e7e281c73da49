//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use camcert::attack::{attack_threshold_search, top_k_attack};
use camcert::bounds::UNIT_BOX;
use camcert::cam::{compute_cam, top_k};
use camcert::certify::{certify_binary_search, CertConfig, CertMode, CertResult};
use camcert::dataset::load_image_dir;
use camcert::io::{load_image, parse_network, save_ppm, save_rawf32};
use camcert::lipschitz::lipschitz_certify;
use camcert::toy::toy_corpus;
use camcert::{NetworkSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cli::{Cli, Command, ImageArgs, ImageFormat, MethodArg, ModeArg};
use crate::experiments::{
    evaluate_all, sha256_hex, summarize_ratios, summarize_sweep, sweep_k, ExperimentRecord, ImageInput, Settings,
    Status,
};
use crate::output::{
    fmt_f64, write_compare_csv, write_gap_sweep_csv, write_ratio_summary, write_sweep_summary, Manifest,
    TimingEntry,
};
use crate::Failure;

struct Context {
    net: NetworkSpec,
    model_sha256: String,
    pool: rayon::ThreadPool,
    start: Instant,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, Failure> {
        let bytes = fs::read(&cli.model)
            .map_err(|e| Failure::Validation(format!("cannot read model {}: {e}", cli.model.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Failure::Validation(format!("model {} is not UTF-8 text", cli.model.display())))?;
        let net = parse_network(text)?;
        net.cam_layout()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build()
            .map_err(|e| Failure::Validation(format!("cannot start {} workers: {e}", cli.jobs)))?;
        Ok(Self {
            net,
            model_sha256: sha256_hex(&bytes),
            pool,
            start: Instant::now(),
        })
    }

    fn manifest(&self, cli: &Cli, command: &str) -> Manifest {
        Manifest::new(command, &cli.model, &self.model_sha256, cli.seed, cli.jobs)
    }

    fn side(&self) -> usize {
        self.net.input_shape()[0]
    }
}

fn clip(no_clip: bool) -> Option<(f64, f64)> {
    (!no_clip).then_some(UNIT_BOX)
}

fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    // a closed pipe (e.g. `| head`) is not an error worth a panic
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn finish(ctx: &Context, mut manifest: Manifest, out: &Path) -> Result<(), Failure> {
    manifest.total_seconds = ctx.start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    if let Command::GenToy { count, format } = &cli.command {
        return gen_toy(cli, *count, *format);
    }
    let ctx = Context::load(cli)?;
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Cam(args) => cam(cli, &ctx, args),
        Command::Certify {
            image,
            mode,
            k2,
            k2_sweep,
            method,
            delta_cap,
            classification_radius,
            iters,
            no_clip,
        } => {
            let x = load_image(&image.image)?;
            let config = CertConfig {
                backend: cli.backend,
                iterations: *iters,
                clip: clip(*no_clip),
                class_index: image.class,
            };
            let finish_result = |r: CertResult| match classification_radius {
                Some(c) => r.with_classification_radius(*c),
                None => r,
            };
            let mut manifest = ctx.manifest(cli, "certify");
            manifest.config = json!({
                "k": image.k, "mode": format!("{mode:?}").to_lowercase(), "k2": k2, "k2_sweep": k2_sweep,
                "method": format!("{method:?}").to_lowercase(), "delta_cap": delta_cap,
                "cert": config, "image": image.image,
            });
            let results: Vec<CertResult> = match (method, mode) {
                (MethodArg::Lipschitz, _) => {
                    vec![lipschitz_certify(&ctx.net, &x, image.k, *delta_cap, image.class)?]
                }
                (MethodArg::Corgi, ModeArg::Exact) => {
                    vec![certify_binary_search(&ctx.net, &x, image.k, CertMode::Exact, &config)?]
                }
                (MethodArg::Corgi, ModeArg::Relaxed) => {
                    let k2s: Vec<usize> = match (k2, k2_sweep) {
                        (_, Some(n)) => (image.k..=image.k + n).collect(),
                        (Some(k2), None) => vec![*k2],
                        (None, None) => {
                            return Err(Failure::Validation("relaxed mode needs --k2 or --k2-sweep".into()))
                        }
                    };
                    let k = image.k;
                    ctx.pool.install(|| {
                        use rayon::prelude::*;
                        k2s.par_iter()
                            .map(|&k2| certify_binary_search(&ctx.net, &x, k, CertMode::Relaxed { k2 }, &config))
                            .collect::<camcert::Result<Vec<_>>>()
                    })?
                }
            };
            let results: Vec<CertResult> = results.into_iter().map(finish_result).collect();
            if k2_sweep.is_some() && *method == MethodArg::Corgi {
                let path = cli.out.join("k2_sweep.csv");
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::CRLF)
                    .from_path(&path)
                    .map_err(io_error)?;
                w.write_record(["k", "k2", "corgi_r", "bracket_hi"]).map_err(io_error)?;
                for r in &results {
                    w.write_record([
                        r.k.to_string(),
                        r.k2.map(|v| v.to_string()).unwrap_or_default(),
                        fmt_f64(r.radius),
                        fmt_f64(r.bracket.1),
                    ])
                    .map_err(io_error)?;
                }
                w.flush()?;
                manifest.outputs.push("k2_sweep.csv".into());
                print_json(&results);
            } else {
                print_json(&results[0]);
            }
            let text = serde_json::to_string_pretty(&results).expect("serializable");
            fs::write(cli.out.join("certify.json"), text + "\n")?;
            manifest.outputs.push("certify.json".into());
            finish(&ctx, manifest, &cli.out)
        }
        Command::Attack {
            image,
            epsilon,
            search,
            attack,
            no_clip,
        } => {
            let x = load_image(&image.image)?;
            let config = attack.config(cli.seed, !no_clip, image.class);
            let mut manifest = ctx.manifest(cli, "attack");
            manifest.config = json!({"k": image.k, "epsilon": epsilon, "search": search, "attack": config,
                "eps_hi": attack.eps_hi, "search_iters": attack.search_iters, "image": image.image});
            let (report, perturbed) = if *search {
                let s = attack_threshold_search(&ctx.net, &x, image.k, &config, attack.eps_hi, attack.search_iters)?;
                let perturbed = s.attack.as_ref().map(best_perturbed);
                let report = json!({
                    "k": image.k,
                    "epsilon": s.epsilon.map_or("inf".to_string(), fmt_f64),
                    "found": s.epsilon.is_some(),
                    "probes": s.probes,
                });
                (report, perturbed)
            } else {
                let eps = epsilon.expect("clap requires epsilon without --search");
                let a = top_k_attack(&ctx.net, &x, eps, image.k, &config)?;
                let best = best_perturbed(&a);
                let report = json!({
                    "k": image.k,
                    "epsilon": eps,
                    "class_index": a.class_index,
                    "success": a.verified_success(),
                    "common_top_k": a.verification.as_ref().map_or(a.common_top_k, |v| v.common_top_k),
                    "surrogate_common_top_k": a.common_top_k,
                    "linf": best.linf_distance(&x).ok_or_else(|| Failure::Validation("shape mismatch".into()))?,
                });
                (report, Some(best))
            };
            if let Some(p) = perturbed {
                save_ppm(&p, cli.out.join("perturbed.ppm"))?;
                save_rawf32(&p, cli.out.join("perturbed.rawf32"))?;
                manifest.outputs.extend(["perturbed.ppm".into(), "perturbed.rawf32".into()]);
            }
            print_json(&report);
            manifest.summary = report;
            finish(&ctx, manifest, &cli.out)
        }
        Command::Compare {
            images,
            toy,
            samples,
            k,
            k2,
            iters,
            attack,
            no_clip,
        } => {
            let mut set = match (images, toy) {
                (Some(dir), _) => load_image_dir(dir, ctx.side())?
                    .into_iter()
                    .map(|i| (i.id, i.class, i.image))
                    .collect::<Vec<_>>(),
                (None, Some(n)) => toy_set(*n, cli.seed),
                (None, None) => unreachable!("clap requires --images or --toy"),
            };
            if set.is_empty() {
                return Err(Failure::Validation("no images found".into()));
            }
            if let Some(n) = samples {
                if *n < set.len() {
                    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
                    let mut keep = rand::seq::index::sample(&mut rng, set.len(), *n).into_vec();
                    keep.sort_unstable();
                    set = keep.into_iter().map(|i| set[i].clone()).collect();
                }
            }
            let settings = Settings {
                k: *k,
                k2: *k2,
                cert: CertConfig {
                    backend: cli.backend,
                    iterations: *iters,
                    clip: clip(*no_clip),
                    class_index: None,
                },
                attack: attack.config(cli.seed, !no_clip, None),
                epsilon_hi: attack.eps_hi,
                search_iterations: attack.search_iters,
            };
            let hash = settings.config_hash(&ctx.model_sha256);
            let inputs: Vec<ImageInput<'_>> = set
                .iter()
                .map(|(id, label, image)| ImageInput { id, label: *label, image })
                .collect();
            let rows = ctx.pool.install(|| evaluate_all(&ctx.net, &inputs, &settings, &hash))?;
            write_compare_csv(&cli.out.join("compare.csv"), &rows)?;
            let summary = summarize_ratios(&rows);
            write_ratio_summary(&cli.out.join("compare_summary.csv"), &summary)?;
            let mut manifest = ctx.manifest(cli, "compare");
            manifest.config = serde_json::to_value(&settings).expect("serializable");
            manifest.config_hash = Some(hash);
            manifest.outputs = vec!["compare.csv".into(), "compare_summary.csv".into()];
            manifest.summary = serde_json::to_value(&summary).expect("serializable");
            manifest.timings = rows.iter().map(TimingEntry::from).collect();
            finish(&ctx, manifest, &cli.out)?;
            check_violations(&rows)
        }
        Command::GapSweep {
            image,
            toy,
            k_min,
            k_max,
            iters,
            attack,
            no_clip,
        } => {
            if *k_min == 0 || k_min > k_max {
                return Err(Failure::Validation(format!("invalid k range {k_min}..={k_max}")));
            }
            let set = match toy {
                Some(n) => toy_set(*n, cli.seed),
                None => image
                    .iter()
                    .map(|p| Ok((image_id(p), None, load_image(p)?)))
                    .collect::<Result<Vec<_>, Failure>>()?,
            };
            let settings = Settings {
                k: *k_min,
                k2: None,
                cert: CertConfig {
                    backend: cli.backend,
                    iterations: *iters,
                    clip: clip(*no_clip),
                    class_index: None,
                },
                attack: attack.config(cli.seed, !no_clip, None),
                epsilon_hi: attack.eps_hi,
                search_iterations: attack.search_iters,
            };
            let hash = settings.config_hash(&ctx.model_sha256);
            let ks: Vec<usize> = (*k_min..=*k_max).collect();
            let mut rows = Vec::new();
            let mut summaries = Vec::new();
            for (id, label, img) in &set {
                let input = ImageInput { id, label: *label, image: img };
                let sweep = ctx.pool.install(|| sweep_k(&ctx.net, &input, &ks, &settings, &hash))?;
                summaries.push(summarize_sweep(id, &sweep));
                rows.extend(sweep);
            }
            rows.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(a.k.cmp(&b.k)));
            summaries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            write_gap_sweep_csv(&cli.out.join("gap_sweep.csv"), &rows)?;
            write_sweep_summary(&cli.out.join("gap_sweep_summary.csv"), &summaries)?;
            let mut manifest = ctx.manifest(cli, "gap-sweep");
            manifest.config = json!({"k_min": k_min, "k_max": k_max, "settings": settings});
            manifest.config_hash = Some(hash);
            manifest.outputs = vec!["gap_sweep.csv".into(), "gap_sweep_summary.csv".into()];
            manifest.summary = serde_json::to_value(&summaries).expect("serializable");
            manifest.timings = rows.iter().map(TimingEntry::from).collect();
            finish(&ctx, manifest, &cli.out)?;
            check_violations(&rows)
        }
        Command::GenToy { .. } => unreachable!("handled above"),
    }
}

fn io_error(e: csv::Error) -> Failure {
    Failure::Validation(format!("csv: {e}"))
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn toy_set(n: usize, seed: u64) -> Vec<(String, Option<usize>, Tensor)> {
    toy_corpus(n, seed)
        .into_iter()
        .map(|s| (s.id, Some(s.class), s.image))
        .collect()
}

/// Perturbed image judged on the ReLU network when available.
fn best_perturbed(a: &camcert::AttackResult) -> Tensor {
    a.verification
        .as_ref()
        .map_or_else(|| a.perturbed.clone(), |v| v.perturbed.clone())
}

fn check_violations(rows: &[ExperimentRecord]) -> Result<(), Failure> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| r.status == Status::Violation)
        .map(|r| format!("{} (k={}, r={}, eps={})", r.image_id, r.k, r.corgi_r, r.attack_eps.unwrap_or(f64::NAN)))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "certified radius exceeds a successful attack for {}",
            bad.join(", ")
        )))
    }
}

fn cam(cli: &Cli, ctx: &Context, args: &ImageArgs) -> Result<(), Failure> {
    let x = load_image(&args.image)?;
    let cam = compute_cam(&ctx.net, &x, args.class)?;
    let top = top_k(&cam, args.k)?;
    let (h, w) = cam.side();
    save_rawf32(&cam.values, cli.out.join("cam.rawf32"))?;
    // nearest-neighbour upsample to the input resolution
    let scale = (ctx.side() / h).max(1);
    let mask = top.mask(cam.len());
    let data = (0..h * scale)
        .flat_map(|r| (0..w * scale).map(move |c| (r / scale) * w + c / scale))
        .map(|p| if mask[p] { 1.0 } else { 0.0 })
        .collect();
    save_ppm(&Tensor::new(vec![h * scale, w * scale], data)?, cli.out.join("topk_mask.ppm"))?;
    let report = json!({
        "class_index": cam.class_index,
        "predicted": cam.predicted,
        "cam_shape": [h, w],
        "k": top.k,
        "positions": top.positions,
        "kth_value": top.kth_value,
        "k_plus_1_value": top.k_plus_1_value,
        "cam_gap": top.gap(),
    });
    print_json(&report);
    let mut manifest = ctx.manifest(cli, "cam");
    manifest.config = json!({"k": args.k, "class": args.class, "image": args.image});
    manifest.outputs = vec!["cam.rawf32".into(), "topk_mask.ppm".into()];
    manifest.summary = report;
    finish(ctx, manifest, &cli.out)
}

fn gen_toy(cli: &Cli, count: usize, format: ImageFormat) -> Result<(), Failure> {
    let start = Instant::now();
    let mut outputs = Vec::with_capacity(count);
    for s in toy_corpus(count, cli.seed) {
        let dir = cli.out.join(format!("{:05}", s.class));
        fs::create_dir_all(&dir)?;
        let name = match format {
            ImageFormat::Ppm => format!("{}.ppm", s.id),
            ImageFormat::Rawf32 => format!("{}.rawf32", s.id),
        };
        let path = dir.join(&name);
        match format {
            ImageFormat::Ppm => save_ppm(&s.image, &path)?,
            ImageFormat::Rawf32 => save_rawf32(&s.image, &path)?,
        }
        outputs.push(format!("{:05}/{name}", s.class));
    }
    let mut manifest = Manifest::new("gen-toy", &cli.model, "", cli.seed, cli.jobs);
    manifest.config = json!({"count": count, "format": format!("{format:?}").to_lowercase()});
    manifest.outputs = outputs;
    manifest.total_seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&cli.out)?;
    manifest.write(&cli.out)?;
    Ok(())
}
