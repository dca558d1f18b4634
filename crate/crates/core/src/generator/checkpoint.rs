//! Checkpoint file: `EVGNCKPT` magic, u32 version, u64 header length, JSON
//! header, then a little-endian f64 blob holding parameters, normalization
//! statistics and (optionally) optimizer moments. The header carries the
//! blob's SHA-256, so truncation or corruption is always detected.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BnBuffer, Generator, GeneratorConfig, ParamSpec};
use crate::autograd::Tensor;
use crate::hashing::sha256_hex;
use crate::losses::DualLossBreakdown;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EVGNCKPT";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint architecture differs from the requested config")]
    ConfigMismatch {
        expected: Box<GeneratorConfig>,
        found: Box<GeneratorConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    /// Most recent loss rows.
    #[serde(default)]
    pub loss_tail: Vec<DualLossBreakdown>,
    /// Free-form trainer state.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Adam first and second moments, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: Generator,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerMoments>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: GeneratorConfig,
    meta: CheckpointMeta,
    params: Vec<ParamSpec>,
    buffer_channels: Vec<usize>,
    optimizer_step: Option<u64>,
    blob_len: u64,
    blob_sha256: String,
}

fn push_all<'a>(blob: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    generator: &Generator,
    meta: &CheckpointMeta,
    optimizer: Option<&OptimizerMoments>,
) -> Result<(), CheckpointError> {
    let mut blob = Vec::new();
    for p in generator.params() {
        push_all(&mut blob, p.iter());
    }
    for b in generator.buffers() {
        push_all(&mut blob, b.mean.iter().chain(&b.var));
    }
    if let Some(opt) = optimizer {
        assert_eq!(opt.first.len(), generator.params().len());
        for t in opt.first.iter().chain(&opt.second) {
            push_all(&mut blob, t.iter());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: generator.config().clone(),
        meta: meta.clone(),
        params: generator.param_specs().to_vec(),
        buffer_channels: generator.buffers().iter().map(|b| b.mean.len()).collect(),
        optimizer_step: optimizer.map(|o| o.step),
        blob_len: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;
    f.write_all(&blob).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::ChecksumMismatch(format!("file truncated while reading {what}"))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensor(&mut self, shape: [usize; 4]) -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        Ok(Tensor::from_shape_vec(shape, self.f64s(n)?).expect("shape matches length"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8, "tensor data")?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Loads and checks that the stored architecture equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &GeneratorConfig) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.generator.config() != expected {
        return Err(CheckpointError::ConfigMismatch {
            expected: Box::new(expected.clone()),
            found: Box::new(ckpt.generator.config().clone()),
        });
    }
    Ok(ckpt)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::ChecksumMismatch("not a generator checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().unwrap());
    let header_bytes = r.take(header_len as usize, "header")?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| CheckpointError::ChecksumMismatch(format!("unreadable header: {e}")))?;
    if header.version != version {
        return Err(CheckpointError::ChecksumMismatch("header version disagrees".into()));
    }
    let blob = &bytes[r.pos..];
    if blob.len() as u64 != header.blob_len || sha256_hex(blob) != header.blob_sha256 {
        return Err(CheckpointError::ChecksumMismatch(format!(
            "blob of {} bytes does not match the recorded {} byte digest",
            blob.len(),
            header.blob_len
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for spec in &header.params {
        params.push(r.tensor(spec.shape)?);
    }
    let mut buffers = Vec::with_capacity(header.buffer_channels.len());
    for &c in &header.buffer_channels {
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        buffers.push(BnBuffer { mean, var });
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut first = Vec::with_capacity(params.len());
            for spec in &header.params {
                first.push(r.tensor(spec.shape)?);
            }
            let mut second = Vec::with_capacity(params.len());
            for spec in &header.params {
                second.push(r.tensor(spec.shape)?);
            }
            Some(OptimizerMoments { step, first, second })
        }
        None => None,
    };
    let generator = Generator::from_parts(header.config, params, buffers)
        .map_err(|e| CheckpointError::ChecksumMismatch(e.to_string()))?;
    if generator.param_specs() != header.params.as_slice() {
        return Err(CheckpointError::ChecksumMismatch("parameter names disagree with config".into()));
    }
    Ok(Checkpoint {
        generator,
        meta: header.meta,
        optimizer,
    })
}
