//! Binary little-endian PLY in the layout common to Gaussian splatting
//! viewers. Colors and opacities are stored as logits, scales as logs.

use std::path::Path;

use super::{io_err, PersistError, Result};
use crate::imageio::write_atomic;
use crate::raster::{sigmoid, GaussianParams};

/// Opacities are clamped to this value before taking the logit, matching the
/// rasterizer's alpha ceiling.
pub const PLY_OPACITY_MAX: f64 = 0.999;

const FIELDS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn ply_bytes(g: &GaussianParams) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", g.len()).into_bytes();
    for f in FIELDS {
        out.extend_from_slice(format!("property float {f}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for i in 0..g.len() {
        let opacity = logit(sigmoid(g.opacity_logit[i]).min(PLY_OPACITY_MAX));
        let row = [g.position[i].as_slice(), &[0.0; 3], &g.color[i], &[opacity], &g.log_scale[i], &g.rotation[i]].concat();
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn export_ply(path: &Path, g: &GaussianParams) -> Result<()> {
    write_atomic(path, &ply_bytes(g)).map_err(io_err(path))
}

/// Parses a binary little-endian PLY whose vertex element has float
/// properties covering the splat layout, in any order.
pub fn read_ply(bytes: &[u8]) -> Result<GaussianParams> {
    let bad = |m: &str| PersistError::Ply(m.to_string());
    let marker = b"end_header\n";
    let end = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply signature"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(bad(&format!("unsupported format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("vertex count"))?),
            ["element", other, ..] => return Err(bad(&format!("unsupported element {other}"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, ..] => return Err(bad(&format!("unsupported property type {ty}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(bad(&format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let col = |f: &str| props.iter().position(|p| p == f).ok_or_else(|| bad(&format!("missing property {f}")));
    let cols: Vec<usize> = FIELDS.iter().map(|f| col(f)).collect::<Result<_>>()?;
    let body = &bytes[end + marker.len()..];
    let stride = props.len() * 4;
    if body.len() != count * stride {
        return Err(bad(&format!("expected {} data bytes, found {}", count * stride, body.len())));
    }
    let mut g = GaussianParams::default();
    for row in body.chunks_exact(stride) {
        let v = |k: usize| f32::from_le_bytes(row[cols[k] * 4..cols[k] * 4 + 4].try_into().unwrap()) as f64;
        g.push([v(0), v(1), v(2)], [v(10), v(11), v(12)], [v(13), v(14), v(15), v(16)], v(9), [v(6), v(7), v(8)]);
    }
    Ok(g)
}

pub fn import_ply(path: &Path) -> Result<GaussianParams> {
    read_ply(&std::fs::read(path).map_err(io_err(path))?)
}
