//! On-disk formats: the binary tensor archive used for checkpoints and avatar
//! codes, PLY export of Gaussian sets, and JSON run configuration.
//!
//! Archive layout, all integers little-endian:
//!
//! ```text
//! "FLXA" | version u32 | count u32 | count × entry | crc32 u32
//! entry = name_len u32 | name utf-8 | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! dtype 0 is f32 and 1 is f64. The CRC covers every preceding byte.

mod ply;
mod runconfig;

use std::path::Path;

use thiserror::Error;

pub use ply::{export_ply, import_ply, ply_bytes, read_ply, PLY_OPACITY_MAX};
pub use runconfig::RunConfig;

use crate::geometry::{SurfaceSamples, Vec3};
use crate::imageio::write_atomic;
use crate::model::{AvatarNet, ModelConfig, ModelError, ParamStore};
use crate::tensor::{DType, Float, Tensor, TensorError};
use crate::trainer::Adam;

pub const MAGIC: &[u8; 4] = b"FLXA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not an archive (bad magic)")]
    Magic,
    #[error("archive checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unsupported archive content: {0}")]
    Version(String),
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("ply: {0}")]
    Ply(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PersistError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    fn of_tensor<T: Float>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|x| x.f64() as f32).collect()),
            DType::F64 => Payload::F64(t.to_f64_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn f64(name: &str, dims: &[usize], values: Vec<f64>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), payload: Payload::F64(values) }
    }

    pub fn tensor<T: Float>(name: &str, t: &Tensor<T>) -> Self {
        Self { name: name.into(), dims: t.shape().to_vec(), payload: Payload::of_tensor(t) }
    }

    /// Values as a tensor of `T`; the payload must already have that dtype so
    /// that loading never rounds.
    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        if self.payload.dtype() != T::DTYPE {
            return Err(PersistError::Format(format!("{} is {:?}, expected {:?}", self.name, self.payload.dtype(), T::DTYPE)));
        }
        Ok(Tensor::from_f64(&self.payload.to_f64(), &self.dims)?)
    }
}

pub fn encode_archive(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if e.dims.iter().product::<usize>() != e.payload.len() {
            return Err(PersistError::Format(format!("{}: dims {:?} do not match {} values", e.name, e.dims, e.payload.len())));
        }
        if e.dims.len() > u8::MAX as usize {
            return Err(PersistError::Format(format!("{}: rank {} too large", e.name, e.dims.len())));
        }
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.payload.dtype().code());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PersistError::Format(format!("unexpected end of data at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PersistError::Magic);
    }
    if bytes.len() < 16 {
        return Err(PersistError::Crc { stored: 0, computed: crc32fast::hash(bytes) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PersistError::Crc { stored, computed });
    }
    let mut c = Cursor { bytes: body, at: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(PersistError::Version(format!("format version {version}, this build reads {VERSION}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|e| PersistError::Format(format!("entry name: {e}")))?.to_string();
        let code = c.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| PersistError::Version(format!("entry {name} has unknown dtype code {code}")))?;
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let payload = match dtype {
            DType::F32 => Payload::F32(c.take(len * 4)?.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => Payload::F64(c.take(len * 8)?.chunks_exact(8).map(f64::read_le).collect()),
        };
        entries.push(Entry { name, dims, payload });
    }
    if c.at != body.len() {
        return Err(PersistError::Format(format!("{} trailing bytes", body.len() - c.at)));
    }
    Ok(entries)
}

pub fn save_archive(path: &Path, entries: &[Entry]) -> Result<()> {
    write_atomic(path, &encode_archive(entries)?).map_err(io_err(path))
}

pub fn load_archive(path: &Path) -> Result<Vec<Entry>> {
    decode_archive(&std::fs::read(path).map_err(io_err(path))?)
}

fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| PersistError::Format(format!("missing entry {name}")))
}

fn rows<const N: usize>(e: &Entry) -> Result<Vec<[f64; N]>> {
    if e.dims.len() != 2 || e.dims[1] != N {
        return Err(PersistError::Format(format!("{} has shape {:?}, expected [_, {N}]", e.name, e.dims)));
    }
    Ok(e.payload.to_f64().chunks_exact(N).map(|c| c.try_into().unwrap()).collect())
}

fn flat<const N: usize>(name: &str, v: &[[f64; N]]) -> Entry {
    Entry::f64(name, &[v.len(), N], v.iter().flatten().copied().collect())
}

const CONFIG_ENTRY: &str = "meta.model_config";
const PARAM_PREFIX: &str = "param.";

/// Trained model with its fixed geometry and, optionally, optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: AvatarNet,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn to_entries(&self) -> Result<Vec<Entry>> {
        let json = serde_json::to_vec(&self.net.config).map_err(|e| PersistError::Config(e.to_string()))?;
        let mut entries = vec![
            Entry { name: CONFIG_ENTRY.into(), dims: vec![json.len()], payload: Payload::F32(json.iter().map(|&b| b as f32).collect()) },
            flat("geom.x_mesh", &self.net.samples.x_mesh),
            flat("geom.x_uv", &self.net.samples.x_uv),
            flat("geom.normals", &self.net.samples.normals),
            flat("geom.lattice", &self.net.lattice),
        ];
        for (name, t) in self.params.iter() {
            entries.push(Entry::tensor(&format!("{PARAM_PREFIX}{name}"), t));
        }
        if let Some(adam) = &self.adam {
            entries.push(Entry::f64("adam.hyper", &[4], vec![adam.lr, adam.beta1, adam.beta2, adam.eps]));
            entries.push(Entry::f64("adam.steps", &[adam.steps.len()], adam.steps.iter().map(|&s| s as f64).collect()));
            for (i, name) in self.params.names().iter().enumerate() {
                entries.push(Entry::f64(&format!("adam.m.{name}"), &[adam.m[i].len()], adam.m[i].clone()));
                entries.push(Entry::f64(&format!("adam.v.{name}"), &[adam.v[i].len()], adam.v[i].clone()));
            }
        }
        Ok(entries)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let cfg = find(entries, CONFIG_ENTRY)?;
        let json: Vec<u8> = cfg.payload.to_f64().iter().map(|&b| b as u8).collect();
        let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| PersistError::Config(e.to_string()))?;
        let samples = SurfaceSamples {
            x_mesh: rows::<3>(find(entries, "geom.x_mesh")?)?,
            x_uv: rows::<2>(find(entries, "geom.x_uv")?)?,
            normals: rows::<3>(find(entries, "geom.normals")?)?,
        };
        let lattice: Vec<Vec3> = rows::<3>(find(entries, "geom.lattice")?)?;
        let (net, mut params) = AvatarNet::with_geometry::<f32>(config, samples, lattice, 0)?;
        let stored = entries.iter().filter(|e| e.name.starts_with(PARAM_PREFIX)).count();
        if stored != params.len() {
            return Err(PersistError::Format(format!("archive has {stored} parameters, model has {}", params.len())));
        }
        for name in params.names().to_vec() {
            let e = find(entries, &format!("{PARAM_PREFIX}{name}"))?;
            let id = params.id(&name).expect("name from store");
            if e.dims != params.get(id).shape() {
                return Err(PersistError::Format(format!("{name}: stored {:?}, model {:?}", e.dims, params.get(id).shape())));
            }
            *params.get_mut(id) = e.to_tensor::<f32>()?.requires_grad();
        }
        let adam = match entries.iter().find(|e| e.name == "adam.hyper") {
            None => None,
            Some(h) => {
                let h = h.payload.to_f64();
                if h.len() != 4 {
                    return Err(PersistError::Format("adam.hyper must have 4 values".into()));
                }
                let mut adam = Adam::new(&params, h[0]);
                (adam.beta1, adam.beta2, adam.eps) = (h[1], h[2], h[3]);
                let steps = find(entries, "adam.steps")?.payload.to_f64();
                if steps.len() != params.len() {
                    return Err(PersistError::Format("adam.steps length".into()));
                }
                adam.steps = steps.iter().map(|&s| s as u64).collect();
                for (i, name) in params.names().iter().enumerate() {
                    let m = find(entries, &format!("adam.m.{name}"))?.payload.to_f64();
                    let v = find(entries, &format!("adam.v.{name}"))?.payload.to_f64();
                    if m.len() != adam.m[i].len() || v.len() != adam.v[i].len() {
                        return Err(PersistError::Format(format!("optimizer state size of {name}")));
                    }
                    (adam.m[i], adam.v[i]) = (m, v);
                }
                Some(adam)
            }
        };
        Ok(Self { net, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_archive(path, &self.to_entries()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&load_archive(path)?)
    }
}

const CODE_ENTRY: &str = "avatar_code";

pub fn save_code<T: Float>(path: &Path, code: &Tensor<T>) -> Result<()> {
    save_archive(path, &[Entry::tensor(CODE_ENTRY, code)])
}

pub fn load_code<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let entries = load_archive(path)?;
    let e = find(&entries, CODE_ENTRY)?;
    Ok(Tensor::from_f64(&e.payload.to_f64(), &e.dims)?)
}
