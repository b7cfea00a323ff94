use std::f64::consts::PI;

use avatar_core::geometry::sphere_point;
use avatar_core::model::Provenance;
use avatar_core::raster::{render_params, RenderSettings};
use avatar_core::synthdata::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> DataConfig {
    DataConfig {
        image_size: 32,
        gt_gaussians: 500,
        mono_ids: 6,
        frames_per_id: 3,
        mv_ids: 2,
        mv_expressions: 2,
        mv_views: 8,
        heldout_ids: 2,
        heldout_views: 8,
        ..Default::default()
    }
}

#[test]
fn zero_expression_is_undeformed_sphere() {
    let id = SynthIdentity::from_seed(3, 8);
    let g = synth_gaussians(&id, &[0.0; 8], 700);
    assert_eq!(g.len(), 700);
    for p in &g.position {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((r - 1.0).abs() < 1e-12);
    }
    let other = synth_gaussians(&SynthIdentity::from_seed(4, 8), &[0.0; 8], 700);
    assert_eq!(g.position, other.position);
    assert_ne!(g.color, other.color);
}

#[test]
fn bump_apex_moves_linearly_with_amplitude_slope() {
    let id = SynthIdentity::from_seed(11, 6);
    for (i, b) in id.bumps.iter().enumerate() {
        let apex = sphere_point(b.center_uv);
        let mut z = vec![0.3; 6];
        let base = id.displacement(apex, &z);
        z[i] += 0.5;
        let moved = id.displacement(apex, &z);
        assert!(((moved - base) / 0.5 - b.amplitude).abs() < 1e-9);
    }
}

#[test]
fn leak_model() {
    let z = [0.1, -0.4, 0.7, 0.2, 0.0, 1.0, -1.0, 0.5];
    assert_eq!(leaky_track(&z, 0.8, 0.1, 0.0), z.to_vec());
    let a = leaky_track(&z, 0.0, 0.0, 0.3);
    let b = leaky_track(&z, PI, 0.0, 0.3);
    for i in 0..8 {
        let d = a[i] - b[i];
        match i % 3 {
            0 | 2 => assert!(d.abs() < 1e-12),
            _ => assert!((d - 0.6).abs() < 1e-12),
        }
    }
    let z2 = [0.9; 8];
    let l1: Vec<f64> = leaky_track(&z, 0.4, -0.2, 0.3).iter().zip(&z).map(|(t, z)| t - z).collect();
    let l2: Vec<f64> = leaky_track(&z2, 0.4, -0.2, 0.3).iter().zip(&z2).map(|(t, z)| t - z).collect();
    for (x, y) in l1.iter().zip(&l2) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn monocular_identities_have_one_camera_and_deterministic_leak() {
    let cfg = small();
    let ds = build_monocular(&cfg, &RenderSettings::default(), 0, cfg.mono_ids);
    assert_eq!(ds.samples.len(), cfg.mono_ids * cfg.frames_per_id);
    assert!(cameras_per_identity(&ds).values().all(|&n| n == 1));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in &ds.samples {
        assert_eq!(s.provenance, Provenance::Monocular);
        let leak = s.z_tracked[0] - s.z_true[0];
        assert!((leak - cfg.lambda * s.azimuth.sin()).abs() < 1e-12);
        xs.push(s.azimuth.sin());
        ys.push(leak);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    assert!((cov / (vx * vy).sqrt() - 1.0).abs() < 1e-9);
}

#[test]
fn front_bias_of_azimuths() {
    let cfg = DataConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let inside = (0..1000).filter(|_| front_biased_angles(&mut rng, &cfg).0.abs() <= 60f64.to_radians()).count();
    assert!(inside >= 950, "{inside}");
}

#[test]
fn multiview_shares_tracked_code_and_covers_circle() {
    let cfg = small();
    let ds = build_multiview(&cfg, &RenderSettings::default(), 100, 2, 3, 8, Split::Train);
    for id in [100, 101] {
        for frame in 0..3 {
            let views: Vec<_> = ds.samples.iter().filter(|s| s.identity_id == id && s.frame == frame).collect();
            assert_eq!(views.len(), 8);
            let mut bins = [0; 8];
            for v in &views {
                assert_eq!(v.z_tracked, views[0].z_tracked);
                assert_eq!(v.provenance, Provenance::MultiView);
                bins[((v.azimuth / (2.0 * PI) * 8.0).round() as usize) % 8] += 1;
            }
            assert_eq!(bins, [1; 8]);
            assert!(views.iter().any(|v| (v.azimuth - PI).abs() < 1e-12));
            let expect = leaky_track(&views[0].z_true, 0.0, 0.0, cfg.lambda);
            assert_eq!(views[0].z_tracked, expect);
        }
    }
}

#[test]
fn images_reproduce_from_seed_expression_and_camera() {
    let cfg = small();
    let settings = RenderSettings::default();
    let ds = build_all(&cfg, &settings).unwrap();
    for s in ds.samples.iter().step_by(5) {
        let rec = ds.identity(s.identity_id).unwrap();
        let g = synth_gaussians(&SynthIdentity::from_seed(rec.seed, cfg.expr_dim), &s.z_true, cfg.gt_gaussians);
        let img = render_params(&g, &s.camera, &settings).image;
        assert_eq!(avatar_core::imageio::to_rgb8(&img, 32, 32), s.rgb);
    }
    let held = ds.ids(Split::HeldOut, None);
    let train = ds.ids(Split::Train, None);
    assert_eq!(held.len(), 2);
    assert!(held.iter().all(|h| !train.contains(h)));
}

#[test]
fn dataset_round_trips_through_directory() {
    let cfg = DataConfig { mono_ids: 2, mv_ids: 1, heldout_ids: 1, ..small() };
    let ds = build_all(&cfg, &RenderSettings::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.samples.len(), ds.samples.len());
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert!(a.rgb == b.rgb, "pixels differ");
        assert_eq!(a.camera, b.camera);
        assert_eq!((&a.z_tracked, &a.z_true, a.azimuth, a.elevation), (&b.z_tracked, &b.z_true, b.azimuth, b.elevation));
        assert_eq!((a.provenance, a.identity_id, a.frame, a.split), (b.provenance, b.identity_id, b.frame, b.split));
    }
    assert_eq!(back.identities, ds.identities);
    assert_eq!(back.config, ds.config);
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}
