use serde::{Deserialize, Serialize};

use crate::model::{AvatarNet, ModelConfig, ParamStore};
use crate::raster::RenderSettings;
use crate::synthdata::Dataset;

use super::{evaluate, summarize, train, EvalRenders, LogRow, Result, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub azimuth_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    /// One row per variant and evaluation azimuth.
    pub rows: Vec<AblationRow>,
    /// Renders of the first held-out identity per variant.
    pub renders: Vec<(Variant, EvalRenders)>,
    pub logs: Vec<(Variant, Vec<LogRow>)>,
    /// Trained weights per variant.
    pub models: Vec<(Variant, AvatarNet, ParamStore<f32>)>,
}

pub const ABLATION_HEADER: &str = "variant,azimuth_deg,psnr,ssim";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.4},{:.5}", self.variant, self.azimuth_deg, self.psnr, self.ssim)
    }
}

impl AblationResult {
    pub fn csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn psnr(&self, variant: Variant, azimuth_deg: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.azimuth_deg == azimuth_deg).map(|r| r.psnr)
    }

    /// PSNR of `variant` minus PSNR of `full` at one azimuth.
    pub fn delta(&self, variant: Variant, azimuth_deg: f64) -> Option<f64> {
        Some(self.psnr(variant, azimuth_deg)? - self.psnr(Variant::Full, azimuth_deg)?)
    }
}

/// Trains every variant from the same initialization and evaluates each on
/// the held-out identities.
pub fn run_ablation(
    model: &ModelConfig,
    model_seed: u64,
    ds: &Dataset,
    base: &TrainConfig,
    variants: &[Variant],
    settings: &RenderSettings,
    mut on_log: impl FnMut(&LogRow),
) -> Result<AblationResult> {
    let mut out = AblationResult { rows: Vec::new(), renders: Vec::new(), logs: Vec::new(), models: Vec::new() };
    for &variant in variants {
        let (net, mut store): (AvatarNet, ParamStore<f32>) = AvatarNet::new(model.clone(), model_seed)?;
        let cfg = TrainConfig { variant, ..base.clone() };
        let outcome = train(&net, &mut store, ds, &cfg, settings, &mut on_log)?;
        let (rows, renders) = evaluate(&net, &store, ds, settings)?;
        for (az, p, s) in summarize(&rows) {
            out.rows.push(AblationRow { variant, azimuth_deg: az, psnr: p, ssim: s });
        }
        if let Some(first) = renders.into_iter().next() {
            out.renders.push((variant, first));
        }
        out.logs.push((variant, outcome.log));
        out.models.push((variant, net, store));
    }
    Ok(out)
}
