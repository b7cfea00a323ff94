//! 8-bit RGB images on disk. Stored values are linear intensities; no gamma
//! curve is applied in either direction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png decode of {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("png encode: {0}")]
    Encode(String),
    #[error("{0}")]
    Format(String),
}

/// Quantizes a channel-first `[3, H, W]` float image to interleaved RGB bytes.
pub fn to_rgb8(chw: &[f64], width: usize, height: usize) -> Vec<u8> {
    let hw = width * height;
    assert_eq!(chw.len(), 3 * hw, "image buffer size");
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push((chw[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Interleaved RGB bytes to a channel-first `[3, H, W]` image in `[0, 1]`.
pub fn from_rgb8(rgb: &[u8], width: usize, height: usize) -> Vec<f64> {
    let hw = width * height;
    let mut out = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            out[c * hw + p] = rgb[p * 3 + c] as f64 / 255.0;
        }
    }
    out
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn encode_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>, ImageError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| ImageError::Encode(e.to_string()))?;
        w.write_image_data(rgb).map_err(|e| ImageError::Encode(e.to_string()))?;
    }
    Ok(buf)
}

pub fn save_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<(), ImageError> {
    let bytes = encode_png(rgb, width, height)?;
    write_atomic(path, &bytes).map_err(|source| ImageError::Io { path: path.display().to_string(), source })
}

/// Saves a `[3, H, W]` float image.
pub fn save_image(path: &Path, chw: &[f64], width: usize, height: usize) -> Result<(), ImageError> {
    save_png(path, &to_rgb8(chw, width, height), width, height)
}

/// Reads an 8-bit RGB or RGBA PNG; returns `(rgb bytes, width, height)`.
pub fn load_png(path: &Path) -> Result<(Vec<u8>, usize, usize), ImageError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| ImageError::Io { path: shown.clone(), source })?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| ImageError::Decode { path: shown.clone(), msg: e.to_string() })?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode { path: shown.clone(), msg: e.to_string() })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Decode { path: shown, msg: "only 8-bit images are supported".into() });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        other => return Err(ImageError::Decode { path: shown, msg: format!("unsupported color type {other:?}") }),
    };
    Ok((rgb, w, h))
}

/// Reads a PNG as a `[3, H, W]` float image; returns `(pixels, width, height)`.
pub fn load_image(path: &Path) -> Result<(Vec<f64>, usize, usize), ImageError> {
    let (rgb, w, h) = load_png(path)?;
    Ok((from_rgb8(&rgb, w, h), w, h))
}

/// Tiles equally sized `[3, H, W]` images into a grid, row-major.
pub fn contact_sheet(tiles: &[Vec<f64>], cols: usize, width: usize, height: usize) -> Vec<f64> {
    let rows = tiles.len().div_ceil(cols.max(1));
    let (sw, sh) = (cols * width, rows * height);
    let mut out = vec![0.0; 3 * sw * sh];
    for (t, img) in tiles.iter().enumerate() {
        let (ty, tx) = (t / cols, t % cols);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    out[c * sw * sh + (ty * height + y) * sw + tx * width + x] = img[c * width * height + y * width + x];
                }
            }
        }
    }
    out
}
