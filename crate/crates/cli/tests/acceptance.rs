//! One PASS/FAIL line per acceptance criterion.
//!
//! Ablation runs are slow, so their outputs are cached under `runs/` at the
//! workspace root (or `$AVATAR_RUNS`) and only produced when missing.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use avatar_core::model::{AvatarNet, DecodeMode, ModelConfig, ParamStore};
use avatar_core::objectives::{psnr, LossWeights, RandomPyramid};
use avatar_core::persist::{import_ply, ply_bytes, Checkpoint, RunConfig};
use avatar_core::raster::{rasterize_reference, render, render_params, sigmoid, RenderSettings};
use avatar_core::scenes::{random_scene, scene_camera};
use avatar_core::synthdata::{build_all, DataConfig, Dataset, Split, SynthSample};
use avatar_core::trainer::{
    fit_avatar, forward, image_tensor, interpolate_codes, train, Observation, TrainConfig, Variant,
};
use avatar_core::Tensor;

const RASTER_TOL: f64 = 1e-5;
const OVERFIT_DB: f64 = 35.0;
const GAP_MARGIN_DB: f64 = 2.0;
const FRONTAL_MARGIN_DB: f64 = 1.0;
const LAMBDAS: [&str; 3] = ["0.1", "0.3", "1.0"];
const FIT_GAIN_DB: f64 = 1.0;
const FIT_IDS: usize = 8;
const FIT_STEPS: usize = 600;
const PLY_TOL: f64 = 1e-6;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn runs_dir() -> PathBuf {
    std::env::var_os("AVATAR_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs"))
}

fn avatar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_avatar"))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn rasterizer_oracle() -> Result<Verdict> {
    let cam = scene_camera(32, 1.0);
    let s = RenderSettings { background: [0.1, 0.2, 0.3], ..Default::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let g = random_scene(1000 + seed, 1 + (seed as usize * 41) % 128);
        let tiled = render_params(&g, &cam, &s);
        let reference = rasterize_reference(&g, &cam, &s, true);
        worst = worst.max(max_diff(&tiled.image, &reference.image));
    }
    verdict(worst <= RASTER_TOL, format!("max |tiled - reference| {worst:.2e} over 50 scenes (tol {RASTER_TOL:.0e})"))
}

struct GradRun {
    ok: bool,
    lines: Vec<String>,
}

fn gradcheck_cli() -> Result<GradRun> {
    let out = avatar().arg("gradcheck").output().context("running avatar gradcheck")?;
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    Ok(GradRun { ok: out.status.success(), lines: text.lines().map(str::to_string).collect() })
}

fn gradient_suite(run: &GradRun) -> Result<Verdict> {
    let cases: Vec<&String> = run.lines.iter().filter(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")).collect();
    let failed: Vec<&String> = cases.iter().copied().filter(|l| l.starts_with("FAIL")).collect();
    for l in &failed {
        println!("    {l}");
    }
    if cases.is_empty() {
        bail!("gradcheck printed no case lines");
    }
    verdict(failed.is_empty(), format!("{} of {} cases within tolerance at 10 seeds", cases.len() - failed.len(), cases.len()))
}

fn overfit_smoke() -> Result<Verdict> {
    let settings = RenderSettings::default();
    let data = DataConfig { mono_ids: 1, frames_per_id: 1, mv_ids: 0, heldout_ids: 0, ..Default::default() };
    let ds = build_all(&data, &settings)?;
    let (net, mut store): (AvatarNet, ParamStore<f32>) = AvatarNet::new(ModelConfig::desk(), 0)?;
    let cfg = TrainConfig { batch_size: 1, total_steps: 500, log_every: 500, ..Default::default() };
    let t = Instant::now();
    train(&net, &mut store, &ds, &cfg, &settings, |_| {})?;
    let s = &ds.samples[0];
    let mode = cfg.variant.decode_mode(s.provenance);
    let pred = forward(&net, &store, s, &s.z_tracked, mode, &s.camera, &settings)?;
    let p = psnr(&pred.to_f64_vec(), &s.image());
    verdict(p > OVERFIT_DB, format!("train-view PSNR {p:.2} dB after 500 steps (need > {OVERFIT_DB}), {:.0}s", t.elapsed().as_secs_f64()))
}

/// `(variant, azimuth) -> psnr` from an ablation CSV.
fn read_ablation(path: &Path) -> Result<Vec<(Variant, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(Variant, f64, f64)> = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            bail!("malformed row {line:?} in {}", path.display());
        }
        rows.push((f[0].parse().map_err(anyhow::Error::msg)?, f[1].parse()?, f[2].parse()?));
    }
    if rows.len() != 16 || rows.iter().any(|r| !r.2.is_finite()) {
        bail!("{} does not hold 16 finite rows", path.display());
    }
    Ok(rows)
}

fn ablation_dir(lambda: &str) -> Result<PathBuf> {
    let dir = runs_dir().join("ablation").join(format!("lambda_{lambda}"));
    let csv = dir.join("ablation.csv");
    if !csv.exists() {
        std::fs::create_dir_all(&dir)?;
        let config = dir.join("config.json");
        if !config.exists() {
            let text = format!(
                "{{\"data\": {{\"lambda\": {lambda}}}, \"train\": {{\"batch_size\": 2, \"total_steps\": 10000, \"log_every\": 500}}}}\n"
            );
            std::fs::write(&config, text)?;
        }
        println!("    running ablation for lambda {lambda} into {} (hours)", dir.display());
        let status = avatar()
            .args(["ablate", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&dir)
            .stdout(std::process::Stdio::null())
            .stderr(std::fs::File::create(dir.join("stderr.txt"))?)
            .status()?;
        if !status.success() {
            bail!("ablate for lambda {lambda} exited with {status}");
        }
    }
    Ok(dir)
}

fn entanglement() -> Result<Verdict> {
    let mut holds = Vec::new();
    for lambda in LAMBDAS {
        let rows = read_ablation(&ablation_dir(lambda)?.join("ablation.csv"))?;
        let at = |v: Variant, az: f64| rows.iter().find(|r| r.0 == v && r.1 == az).map(|r| r.2).unwrap_or(f64::NAN);
        let gap = |v: Variant| at(v, 0.0) - at(v, 180.0);
        let (full, mixed, only2d) = (gap(Variant::Full), gap(Variant::MixedNoSinks), gap(Variant::Only2D));
        let frontal = at(Variant::Full, 0.0) - at(Variant::Only3D, 0.0);
        let ok = [full <= mixed - GAP_MARGIN_DB, full <= only2d - GAP_MARGIN_DB, frontal >= FRONTAL_MARGIN_DB];
        println!(
            "    lambda {lambda}: gap full {full:.2} mixedNoSinks {mixed:.2} only2D {only2d:.2} dB; frontal full - only3D {frontal:+.2} dB; checks {ok:?}"
        );
        holds.push((lambda, ok.iter().all(|&b| b)));
    }
    let larger = holds.iter().filter(|(l, _)| *l != "0.1").all(|(_, ok)| *ok);
    let list: Vec<String> = holds.iter().map(|(l, ok)| format!("{l}:{}", if *ok { "holds" } else { "fails" })).collect();
    verdict(larger, format!("claim per lambda [{}], required at 0.3 and 1.0", list.join(" ")))
}

fn trained() -> Result<(Checkpoint, Dataset)> {
    let dir = ablation_dir("0.3")?;
    let ck = Checkpoint::load(&dir.join("full.ckpt"))?;
    let cfg = RunConfig::load(dir.join("config.json").to_str().context("non utf-8 path")?)?;
    let ds = build_all(&cfg.data, &cfg.raster)?;
    Ok((ck, ds))
}

fn view<'a>(ds: &'a Dataset, id: usize, az_deg: f64) -> Result<&'a SynthSample> {
    ds.samples_of(id)
        .find(|s| {
            let d = (s.azimuth.to_degrees() - az_deg).rem_euclid(360.0);
            d.min(360.0 - d) < 1e-6
        })
        .with_context(|| format!("identity {id} has no {az_deg} degree view"))
}

fn fitting(ck: &Checkpoint, ds: &Dataset) -> Result<Verdict> {
    let settings = RenderSettings::default();
    let fx = RandomPyramid::<f32>::new(TrainConfig::default().feature_seed);
    let weights = LossWeights::default();
    let before = ck.params.fingerprint();
    let (mut ff, mut fit) = (0.0, 0.0);
    let mut n = 0usize;
    let ids: Vec<usize> = ds.ids(Split::HeldOut, None).into_iter().take(FIT_IDS).collect();
    for &id in &ids {
        let obs: Vec<Observation> = [0.0, 90.0, 180.0, 270.0]
            .iter()
            .map(|&az| view(ds, id, az).map(Observation::from))
            .collect::<Result<_>>()?;
        let front = view(ds, id, 0.0)?;
        let code = ck.net.encode(&ck.params, &image_tensor::<f32>(front), &front.camera)?;
        let fitted = fit_avatar(&ck.net, &ck.params, &obs, FIT_STEPS, TrainConfig::default().learning_rate, &weights, &fx, &settings)?;
        for az in [45.0, 135.0, 225.0, 315.0] {
            let v = view(ds, id, az)?;
            let score = |c: &Tensor<f32>| -> Result<f64> {
                let g = ck.net.decode(&ck.params, c, &v.z_tracked, DecodeMode::Inference)?;
                Ok(psnr(&render(&g, &v.camera, &settings)?.to_f64_vec(), &v.image()))
            };
            ff += score(&code)?;
            fit += score(&fitted.code)?;
            n += 1;
        }
    }
    let (ff, fit) = (ff / n as f64, fit / n as f64);
    let unchanged = ck.params.fingerprint() == before;
    verdict(
        fit - ff >= FIT_GAIN_DB && unchanged,
        format!(
            "held-out-view PSNR {ff:.2} -> {fit:.2} dB ({:+.2}, need >= +{FIT_GAIN_DB}) on {} identities, parameters {}",
            fit - ff,
            ids.len(),
            if unchanged { "unchanged" } else { "CHANGED" }
        ),
    )
}

fn bias_tokens() -> Result<Verdict> {
    let (net, mut store): (AvatarNet, ParamStore<f32>) = AvatarNet::new(ModelConfig::desk(), 5)?;
    let settings = RenderSettings::default();
    let data = DataConfig::default();
    let cam = data.camera(0.4, 0.1);
    let image = Tensor::<f32>::from_f64(&vec![0.5; 3 * 64 * 64], &[3, 64, 64])?;
    let code = net.encode(&store, &image, &data.camera(0.0, 0.0))?;
    let z = [0.3, -0.2, 0.5, 0.0, 0.1, -0.7, 0.9, 0.2];
    let draw = |store: &ParamStore<f32>, mode| -> Result<Vec<f32>> {
        Ok(render(&net.decode(store, &code, &z, mode)?, &cam, &settings)?.to_vec())
    };
    let inference_is_mv = draw(&store, DecodeMode::Inference)? == draw(&store, DecodeMode::MultiView)?;
    let tokens_differ = draw(&store, DecodeMode::Monocular)? != draw(&store, DecodeMode::MultiView)?;
    let z3d = store.get(net.decoder.z3d).to_vec();
    store.set_values(net.decoder.z2d, &z3d);
    let tied = draw(&store, DecodeMode::Monocular)? == draw(&store, DecodeMode::MultiView)?;
    verdict(
        inference_is_mv && tied,
        format!(
            "inference == multi-view: {inference_is_mv}; with z2d := z3d monocular == multi-view: {tied} (untied renders differ: {tokens_differ})"
        ),
    )
}

fn interpolation(ck: &Checkpoint, ds: &Dataset) -> Result<Verdict> {
    let settings = RenderSettings::default();
    let ids = ds.ids(Split::HeldOut, None);
    let mut rng_state = 0x9e37_79b9u64;
    let mut next = |n: usize| {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (rng_state >> 33) as usize % n
    };
    let mut worst_ratio: f64 = 0.0;
    let mut all = true;
    for _ in 0..5 {
        let a = next(ids.len());
        let b = (a + 1 + next(ids.len() - 1)) % ids.len();
        let fa = view(ds, ids[a], 0.0)?;
        let fb = view(ds, ids[b], 0.0)?;
        let ca = ck.net.encode(&ck.params, &image_tensor::<f32>(fa), &fa.camera)?;
        let cb = ck.net.encode(&ck.params, &image_tensor::<f32>(fb), &fb.camera)?;
        let frames: Vec<Vec<f64>> = (0..11)
            .map(|i| -> Result<Vec<f64>> {
                let c = interpolate_codes(&ca, &cb, i as f64 / 10.0)?;
                let g = ck.net.decode(&ck.params, &c, &fa.z_tracked, DecodeMode::Inference)?;
                Ok(render(&g, &fa.camera, &settings)?.to_f64_vec())
            })
            .collect::<Result<_>>()?;
        let end = mean_abs_diff(&frames[0], &frames[10]);
        let step = frames.windows(2).map(|w| mean_abs_diff(&w[0], &w[1])).fold(0.0, f64::max);
        all &= step < end;
        worst_ratio = worst_ratio.max(step / end);
    }
    verdict(all, format!("max adjacent delta / endpoint delta {worst_ratio:.3} over 5 held-out pairs (need < 1)"))
}

fn persistence(ck: &Checkpoint, ds: &Dataset, grad: &GradRun) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a)?;
    let back = Checkpoint::load(&a)?;
    back.save(&b)?;
    let bit_exact = std::fs::read(&a)? == std::fs::read(&b)? && back.params.fingerprint() == ck.params.fingerprint();
    let id = ds.ids(Split::HeldOut, None)[0];
    let front = view(ds, id, 0.0)?;
    let code = ck.net.encode(&ck.params, &image_tensor::<f32>(front), &front.camera)?;
    let g = ck.net.decode(&ck.params, &code, &front.z_tracked, DecodeMode::Inference)?.to_params();
    let ply = dir.path().join("avatar.ply");
    std::fs::write(&ply, ply_bytes(&g))?;
    let r = import_ply(&ply)?;
    let mut err: f64 = 0.0;
    for i in 0..g.len() {
        for k in 0..3 {
            err = err.max((r.position[i][k] - g.position[i][k]).abs());
            err = err.max((r.log_scale[i][k].exp() - g.log_scale[i][k].exp()).abs());
            err = err.max((sigmoid(r.color[i][k]) - sigmoid(g.color[i][k])).abs());
        }
        err = err.max((sigmoid(r.opacity_logit[i]) - sigmoid(g.opacity_logit[i]).min(0.999)).abs());
    }
    let ply_ok = r.len() == g.len() && err <= PLY_TOL;
    verdict(
        bit_exact && ply_ok && grad.ok,
        format!(
            "checkpoint round trip bit-exact: {bit_exact}; PLY max attribute error {err:.1e} over {} Gaussians (tol {PLY_TOL:.0e}); gradcheck exit {}",
            g.len(),
            if grad.ok { "0" } else { "nonzero" }
        ),
    )
}

fn paper_shapes() -> Result<Verdict> {
    let cfg = ModelConfig::preset("paper-scale").context("paper-scale preset")?;
    let (net, store): (AvatarNet, ParamStore<f32>) = AvatarNet::new(cfg.clone(), 0)?;
    // without gradient tracking the full-size encoder fits in a few hundred MB
    let store = store.frozen();
    let rig = DataConfig { image_size: cfg.image_size, ..Default::default() };
    let cam = rig.camera(0.0, 0.0);
    let image = Tensor::<f32>::from_f64(&vec![0.5; 3 * 512 * 512], &[3, 512, 512])?;
    let feats = net.encoder.image_features(&cfg, &store, &image, &cam)?;
    let code = net.encode(&store, &image, &cam)?;
    let mlp: Vec<Vec<usize>> = net.decoder.expr_mlp.iter().map(|l| store.get(l.weight).shape().to_vec()).collect();
    let seq = net.expression_tokens(&store, &vec![0.0; cfg.expr_dim], DecodeMode::Inference)?;
    let ok = code.shape() == [32, 32, 768]
        && feats.shape() == [1024, 768]
        && cfg.patch == 16
        && mlp.len() == 2
        && mlp[0].contains(&135)
        && mlp[0].contains(&256)
        && mlp[1].contains(&256)
        && seq.shape() == [cfg.expr_tokens + 1, 768];
    verdict(
        ok,
        format!(
            "code {:?}, encoder tokens {:?}, expression MLP weights {mlp:?}, s_exp {:?} (N_exp {})",
            code.shape(),
            feats.shape(),
            seq.shape(),
            cfg.expr_tokens
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut passed = 0;
    let mut total = 0;
    let mut report = |n: usize, name: &str, r: Result<Verdict>| {
        total += 1;
        let line = match r {
            Ok(v) => {
                passed += v.pass as usize;
                format!("{} {n}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail)
            }
            Err(e) => format!("FAIL {n}. {name}: error: {e:#}"),
        };
        println!("{line} [{:.0}s]", start.elapsed().as_secs_f64());
    };
    report(1, "rasterizer oracle equivalence", rasterizer_oracle());
    let grad = gradcheck_cli();
    report(2, "gradient suite", grad.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(gradient_suite));
    report(3, "overfit smoke", overfit_smoke());
    report(4, "entanglement reproduction", entanglement());
    let model = trained();
    let with_model = |f: &dyn Fn(&Checkpoint, &Dataset) -> Result<Verdict>| match &model {
        Ok((ck, ds)) => f(ck, ds),
        Err(e) => Err(anyhow::anyhow!("trained model unavailable: {e:#}")),
    };
    report(5, "fitting improves over feed-forward", with_model(&fitting));
    report(6, "bias-token identity", bias_tokens());
    report(7, "interpolation continuity", with_model(&interpolation));
    report(
        8,
        "persistence",
        match &grad {
            Ok(g) => with_model(&|ck, ds| persistence(ck, ds, g)),
            Err(e) => Err(anyhow::anyhow!("gradcheck did not run: {e:#}")),
        },
    );
    report(9, "paper-preset shapes", paper_shapes());
    println!("{passed} of {total} acceptance criteria passed");
}
