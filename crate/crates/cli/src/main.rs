use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use avatar_core::gradsuite;
use avatar_core::imageio::{contact_sheet, load_image, save_image};
use avatar_core::model::{AvatarNet, DecodeMode, ParamStore};
use avatar_core::objectives::{LossWeights, RandomPyramid};
use avatar_core::persist::{export_ply, load_code, save_code, Checkpoint, RunConfig};
use avatar_core::raster::{render, RenderSettings};
use avatar_core::synthdata::{build_all, load_dataset, save_dataset, DataConfig, Dataset};
use avatar_core::trainer::{
    evaluate, fit_avatar, interpolate_codes, run_ablation, summarize, train, Observation, TrainConfig, Variant,
    LOG_HEADER,
};
use avatar_core::Tensor;

#[derive(Parser)]
#[command(name = "avatar", version, about = "Single-image Gaussian head avatars")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic monocular, multi-view and held-out datasets.
    GenData {
        /// JSON config file or preset name (desk-scale, paper-scale).
        #[arg(long, default_value = "desk-scale")]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a metrics log next to it.
    Train {
        #[arg(long, default_value = "desk-scale")]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feed-forward evaluation on held-out identities, per azimuth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an avatar code to a few posed images with the model frozen.
    Fit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Images to fit; each must be listed in the manifest.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Dataset manifest.json holding the camera and expression of each image.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a PNG sequence orbiting the head.
    RenderTurntable {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        code: PathBuf,
        #[arg(long, default_value_t = 36)]
        frames: usize,
        /// Comma separated expression code; zeros when omitted.
        #[arg(long)]
        z: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        elevation_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convex combinations between two avatar codes.
    Interpolate {
        #[arg(long, num_args = 2, required = true)]
        codes: Vec<PathBuf>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// Also render each code from the front.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four training variants.
    Ablate {
        #[arg(long, default_value = "desk-scale")]
        config: String,
        /// Reuse a dataset written by gen-data instead of rendering one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma separated subset of only2D, only3D, mixedNoSinks, full.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes `run.json` into `dir`, or `<file>.run.json` beside a file output.
fn write_run_json(out: &Path, command: &str, config: serde_json::Value, seed: u64) -> Result<()> {
    let path = if out.is_dir() {
        out.join("run.json")
    } else {
        let mut name = out.file_name().context("output path has no file name")?.to_os_string();
        name.push(".run.json");
        out.with_file_name(name)
    };
    let doc = json!({
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_config(arg: &str) -> Result<RunConfig> {
    RunConfig::load(arg).with_context(|| format!("loading config {arg}"))
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())),
        None => Ok(build_all(&cfg.data, &cfg.raster)?),
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Camera rig matching the synthetic data at the model's input resolution.
fn rig(net: &AvatarNet) -> DataConfig {
    DataConfig { image_size: net.config.image_size, ..DataConfig::default() }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let ds = build_all(&cfg.data, &cfg.raster)?;
            save_dataset(&ds, &out)?;
            eprintln!("wrote {} samples to {}", ds.samples.len(), out.display());
            write_run_json(&out, "gen-data", serde_json::to_value(&cfg)?, cfg.data.seed)
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let ds = dataset(&cfg, Some(&data))?;
            create_parent(&out)?;
            let (net, mut params): (AvatarNet, ParamStore<f32>) = AvatarNet::new(cfg.model.clone(), cfg.train.seed)?;
            let mut log = format!("{LOG_HEADER}\n");
            let outcome = train(&net, &mut params, &ds, &cfg.train, &cfg.raster, |row| {
                eprintln!("{}", row.csv());
                log.push_str(&row.csv());
                log.push('\n');
            })?;
            eprintln!(
                "token use: z2d {} z3d {} ({} monocular, {} multi-view samples)",
                outcome.counters.z2d, outcome.counters.z3d, outcome.counters.monocular_samples, outcome.counters.multiview_samples
            );
            Checkpoint { net, params, adam: Some(outcome.adam) }.save(&out)?;
            std::fs::write(out.with_extension("log.csv"), log)?;
            write_run_json(&out, "train", serde_json::to_value(&cfg)?, cfg.train.seed)
        }
        Cmd::Eval { ckpt, data, out } => {
            let ck = load_ckpt(&ckpt)?;
            let ds = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let (rows, _) = evaluate(&ck.net, &ck.params, &ds, &RenderSettings::default())?;
            let mut csv = String::from("azimuth_deg,psnr,ssim\n");
            for (az, p, s) in summarize(&rows) {
                println!("azimuth {az:>5}: psnr {p:.3} ssim {s:.4}");
                csv.push_str(&format!("{az},{p:.4},{s:.5}\n"));
            }
            create_parent(&out)?;
            std::fs::write(&out, csv)?;
            write_run_json(&out, "eval", json!({ "model": ck.net.config, "data": ds.config }), 0)
        }
        Cmd::Fit { ckpt, images, manifest, steps, lr, out } => {
            let ck = load_ckpt(&ckpt)?;
            let dir = manifest.parent().unwrap_or(Path::new("."));
            let ds = load_dataset(dir).with_context(|| format!("loading manifest {}", manifest.display()))?;
            let text = std::fs::read_to_string(&manifest)?;
            let doc: serde_json::Value = serde_json::from_str(&text)?;
            let records = doc["samples"].as_array().context("manifest has no samples")?;
            let mut obs = Vec::new();
            for img in &images {
                let want = std::fs::canonicalize(img).with_context(|| format!("reading {}", img.display()))?;
                let idx = records
                    .iter()
                    .position(|r| r["image"].as_str().and_then(|p| std::fs::canonicalize(dir.join(p)).ok()).as_ref() == Some(&want))
                    .with_context(|| format!("{} is not listed in the manifest", img.display()))?;
                let mut o = Observation::from(&ds.samples[idx]);
                let (pixels, w, h) = load_image(img)?;
                if (w, h) != (o.camera.width, o.camera.height) {
                    bail!("{} is {w}x{h}, manifest camera is {}x{}", img.display(), o.camera.width, o.camera.height);
                }
                o.image = pixels;
                obs.push(o);
            }
            let fx = RandomPyramid::<f32>::new(TrainConfig::default().feature_seed);
            let weights = LossWeights::default();
            let fit = fit_avatar(&ck.net, &ck.params, &obs, steps, lr, &weights, &fx, &RenderSettings::default())?;
            eprintln!(
                "fit loss {:.5} -> {:.5}",
                fit.losses.first().copied().unwrap_or(f64::NAN),
                fit.losses.last().copied().unwrap_or(f64::NAN)
            );
            create_parent(&out)?;
            save_code(&out, &fit.code)?;
            write_run_json(&out, "fit", json!({ "model": ck.net.config, "steps": steps, "learning_rate": lr }), 0)
        }
        Cmd::RenderTurntable { ckpt, code, frames, z, elevation_deg, out } => {
            if frames == 0 {
                bail!("--frames must be positive");
            }
            let ck = load_ckpt(&ckpt)?;
            let code: Tensor<f32> = load_code(&code)?;
            let z = parse_z(z.as_deref(), ck.net.config.expr_dim)?;
            let g = ck.net.decode(&ck.params, &code, &z, DecodeMode::Inference)?;
            std::fs::create_dir_all(&out)?;
            let rig = rig(&ck.net);
            for i in 0..frames {
                let az = std::f64::consts::TAU * i as f64 / frames as f64;
                let img = render(&g, &rig.camera(az, elevation_deg.to_radians()), &RenderSettings::default())?;
                save_image(&out.join(format!("frame_{i:03}.png")), &img.to_f64_vec(), rig.image_size, rig.image_size)?;
            }
            export_ply(&out.join("avatar.ply"), &g.to_params())?;
            write_run_json(&out, "render-turntable", json!({ "model": ck.net.config, "frames": frames, "z_exp": z }), 0)
        }
        Cmd::Interpolate { codes, steps, ckpt, out } => {
            if steps < 2 {
                bail!("--steps must be at least 2");
            }
            let a: Tensor<f32> = load_code(&codes[0])?;
            let b: Tensor<f32> = load_code(&codes[1])?;
            let ck = ckpt.as_deref().map(load_ckpt).transpose()?;
            std::fs::create_dir_all(&out)?;
            for i in 0..steps {
                let alpha = i as f64 / (steps - 1) as f64;
                let c = interpolate_codes(&a, &b, alpha)?;
                save_code(&out.join(format!("code_{i:03}.ckpt")), &c)?;
                if let Some(ck) = &ck {
                    let g = ck.net.decode(&ck.params, &c, &vec![0.0; ck.net.config.expr_dim], DecodeMode::Inference)?;
                    let rig = rig(&ck.net);
                    let img = render(&g, &rig.camera(0.0, 0.0), &RenderSettings::default())?;
                    save_image(&out.join(format!("frame_{i:03}.png")), &img.to_f64_vec(), rig.image_size, rig.image_size)?;
                }
            }
            write_run_json(&out, "interpolate", json!({ "steps": steps }), 0)
        }
        Cmd::Ablate { config, data, variants, out } => {
            let cfg = load_config(&config)?;
            let variants: Vec<Variant> = match variants {
                Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(anyhow::Error::msg)?,
                None => Variant::ALL.to_vec(),
            };
            let ds = dataset(&cfg, data.as_deref())?;
            std::fs::create_dir_all(&out)?;
            write_run_json(&out, "ablate", serde_json::to_value(&cfg)?, cfg.train.seed)?;
            let start = std::time::Instant::now();
            let mut log = format!("{LOG_HEADER}\n");
            let result = run_ablation(&cfg.model, cfg.train.seed, &ds, &cfg.train, &variants, &cfg.raster, |row| {
                eprintln!("{} {:.0}s", row.csv(), start.elapsed().as_secs_f64());
                log.push_str(&row.csv());
                log.push('\n');
            })?;
            std::fs::write(out.join("train_log.csv"), log)?;
            std::fs::write(out.join("ablation.csv"), result.csv())?;
            for (v, net, params) in &result.models {
                Checkpoint { net: net.clone(), params: params.clone(), adam: None }.save(&out.join(format!("{v}.ckpt")))?;
            }
            print!("{}", result.csv());
            for &v in &variants {
                if let (Some(front), Some(back)) = (result.psnr(v, 0.0), result.psnr(v, 180.0)) {
                    println!("{v}: completeness gap {:.3} dB", front - back);
                }
            }
            let n = cfg.data.image_size;
            let mut tiles = Vec::new();
            if let Some((_, first)) = result.renders.first() {
                tiles.push(first.input.clone());
                tiles.extend(first.views.iter().map(|(_, _, gt)| gt.clone()));
            }
            for (_, r) in &result.renders {
                tiles.push(r.input.clone());
                tiles.extend(r.views.iter().map(|(_, pred, _)| pred.clone()));
            }
            let cols = 1 + avatar_core::trainer::EVAL_AZIMUTHS.len();
            let sheet = contact_sheet(&tiles, cols, n, n);
            save_image(&out.join("contact_sheet.png"), &sheet, cols * n, tiles.len().div_ceil(cols) * n)?;
            Ok(())
        }
        Cmd::Gradcheck { seeds, filter } => {
            let cases: Vec<_> = gradsuite::all_cases()
                .into_iter()
                .filter(|c| filter.as_deref().map_or(true, |f| c.name.contains(f)))
                .collect();
            if cases.is_empty() {
                bail!("no gradient case matches the filter");
            }
            let results = gradsuite::run_cases(&cases, seeds, |r| {
                println!("{}", r.summary());
                if !r.passed() {
                    println!("    {}", r.detail());
                }
            })?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} of {} cases passed", results.len() - failed, results.len());
            if failed > 0 {
                bail!("{failed} gradient case(s) failed");
            }
            Ok(())
        }
    }
}

fn parse_z(arg: Option<&str>, dim: usize) -> Result<Vec<f64>> {
    let Some(text) = arg else { return Ok(vec![0.0; dim]) };
    let z: Vec<f64> = text.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>()?;
    if z.len() != dim {
        bail!("expression code has {} values, model expects {dim}", z.len());
    }
    Ok(z)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
