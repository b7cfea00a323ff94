use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"image_size": 16, "patch": 8, "dim": 32, "vit_blocks": 1, "encoder_blocks": 1, "decoder_blocks": 1,
            "latent": [2, 2], "expr_dim": 3, "expr_tokens": 2, "expr_hidden": 8, "expr_layers": 2, "up_levels": 2,
            "up_width": 4, "map_upsample_extra": 1, "gaussians": 32, "pe_freqs": 3, "ffn_mult": 1, "head_hidden": 8},
  "data": {"image_size": 16, "expr_dim": 3, "gt_gaussians": 200, "mono_ids": 3, "frames_per_id": 2, "mv_ids": 2,
           "mv_expressions": 2, "heldout_ids": 2},
  "train": {"batch_size": 1, "total_steps": 4, "log_every": 2}
}"#;

fn avatar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(avatar(&[]).status.code(), Some(1));
    assert_eq!(avatar(&["train", "--bogus"]).status.code(), Some(1));
    let help = avatar(&["fit", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--manifest"));
    assert_eq!(avatar(&["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent", "--out", "/tmp/x.csv"]).status.code(), Some(2));
    assert_eq!(avatar(&["gen-data", "--config", "no-such-preset", "--out", "/tmp/x"]).status.code(), Some(2));
}

#[test]
fn gradcheck_reports_each_case() {
    let out = ok(avatar(&["gradcheck", "--seeds", "2", "--filter", "ssim"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS ssim")), "{text}");
    assert_eq!(avatar(&["gradcheck", "--filter", "no such op"]).status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(avatar(&["gen-data", "--config", s(&config), "--out", s(&data)]));
    assert!(data.join("manifest.json").exists() && data.join("run.json").exists());

    let ckpt = root.join("model.ckpt");
    ok(avatar(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&ckpt)]));
    let log = std::fs::read_to_string(root.join("model.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,variant,loss,l1,ssim,feat,psnr"));
    assert_eq!(log.lines().count(), 3);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("model.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["train"]["total_steps"], 4);
    assert!(run["git_describe"].is_string());

    let csv = root.join("eval.csv");
    ok(avatar(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv)]));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let images: Vec<String> = manifest["samples"].as_array().unwrap()[..2]
        .iter()
        .map(|r| s(&data.join(r["image"].as_str().unwrap())).to_string())
        .collect();
    let code = root.join("code.ckpt");
    let mut args = vec!["fit", "--ckpt", s(&ckpt), "--manifest"];
    let manifest_path = data.join("manifest.json");
    args.push(s(&manifest_path));
    args.extend(["--steps", "3", "--out", s(&code), "--images"]);
    args.extend(images.iter().map(String::as_str));
    ok(avatar(&args));
    assert!(code.exists());
    let stranger = root.join("stranger.png");
    std::fs::copy(&images[0], &stranger).unwrap();
    assert_eq!(
        avatar(&["fit", "--ckpt", s(&ckpt), "--manifest", s(&manifest_path), "--out", s(&code), "--images", s(&stranger)])
            .status
            .code(),
        Some(2)
    );

    let turn = root.join("turn");
    ok(avatar(&["render-turntable", "--ckpt", s(&ckpt), "--code", s(&code), "--frames", "36", "--out", s(&turn)]));
    let mut frames: Vec<String> = std::fs::read_dir(&turn)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("frame_"))
        .collect();
    frames.sort();
    assert_eq!(frames.len(), 36);
    assert_eq!((frames[0].as_str(), frames[35].as_str()), ("frame_000.png", "frame_035.png"));
    assert!(turn.join("avatar.ply").exists());

    let interp = root.join("interp");
    ok(avatar(&["interpolate", "--codes", s(&code), s(&code), "--steps", "11", "--ckpt", s(&ckpt), "--out", s(&interp)]));
    assert!(interp.join("code_010.ckpt").exists() && interp.join("frame_010.png").exists());

    let ablate = root.join("ablate");
    ok(avatar(&["ablate", "--config", s(&config), "--data", s(&data), "--out", s(&ablate)]));
    let table = std::fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 17);
    assert!(table.lines().skip(1).all(|l| l.split(',').all(|f| !f.contains("NaN"))));
    assert!(ablate.join("contact_sheet.png").exists() && ablate.join("full.ckpt").exists());
}
