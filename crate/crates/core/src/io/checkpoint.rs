//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MIMD" | u32 version | u64 seed | u64 step
//! u32 len | config text (UTF-8)
//! tensor table
//! u8 has_optimizer [ u64 opt_step | tensor table (m) | tensor table (v) ]
//!
//! tensor table: u32 count, then per tensor
//!   u16 name len | name | u8 dtype | u8 ndim | u64 dims.. | raw values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::NamedTempFile;

use super::config::{config_to_string, parse_config, ExperimentConfig, TargetDim};
use crate::error::{Error, Result};
use crate::teacher::check_grid;
use crate::tensor::{DType, Real, Tensor};
use crate::train::OptimizerState;
use crate::vit::{ViTConfig, ViTParams};

pub const MAGIC: &[u8; 4] = b"MIMD";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor as stored, values widened to `f64` (exact for both dtypes).
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl StoredTensor {
    fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|x| x.as_f64()).collect(),
        }
    }

    fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.values.iter().map(|&x| T::c(x)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredOptimizer {
    pub step: u64,
    pub m: Vec<StoredTensor>,
    pub v: Vec<StoredTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    /// Config text with a concrete head width.
    pub config_text: String,
    pub tensors: Vec<StoredTensor>,
    pub optimizer: Option<StoredOptimizer>,
}

fn table<T: Real>(params: &ViTParams<T>) -> Vec<StoredTensor> {
    params
        .named()
        .iter()
        .map(|(n, t)| StoredTensor::from_tensor(n, t))
        .collect()
}

fn fill<T: Real>(model: &ViTConfig, stored: &[StoredTensor]) -> Result<ViTParams<T>> {
    let mut params: ViTParams<T> = crate::vit::init_params(model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut slots = params.named_mut();
    if slots.len() != stored.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} tensors stored, config implies {}",
            stored.len(),
            slots.len()
        )));
    }
    for ((name, slot), s) in slots.iter_mut().zip(stored) {
        if *name != s.name || slot.shape() != s.shape.as_slice() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {name} {:?}, found {} {:?}",
                slot.shape(),
                s.name,
                s.shape
            )));
        }
        **slot = s.to_tensor()?;
    }
    drop(slots);
    Ok(params)
}

impl Checkpoint {
    pub fn new<T: Real>(
        params: &ViTParams<T>,
        optimizer: Option<&OptimizerState<T>>,
        config: &ExperimentConfig,
        model: &ViTConfig,
        seed: u64,
        step: u64,
    ) -> Result<Self> {
        params.check_shapes(model)?;
        let concrete = ExperimentConfig {
            model: model.clone(),
            target_dim: TargetDim::Fixed(model.target_dim),
            ..config.clone()
        };
        Ok(Self {
            version: FORMAT_VERSION,
            seed,
            step,
            config_text: config_to_string(&concrete),
            tensors: table(params),
            optimizer: optimizer.map(|o| StoredOptimizer {
                step: o.step,
                m: table(&o.m),
                v: table(&o.v),
            }),
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        parse_config(&self.config_text)
    }

    /// Architecture of the stored parameters.
    pub fn model(&self) -> Result<ViTConfig> {
        Ok(self.config()?.model)
    }

    pub fn params<T: Real>(&self) -> Result<ViTParams<T>> {
        fill(&self.model()?, &self.tensors)
    }

    pub fn optimizer_state<T: Real>(&self) -> Result<Option<OptimizerState<T>>> {
        let Some(opt) = &self.optimizer else {
            return Ok(None);
        };
        let model = self.model()?;
        Ok(Some(OptimizerState {
            step: opt.step,
            m: fill(&model, &opt.m)?,
            v: fill(&model, &opt.v)?,
        }))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        write_table(&mut out, &self.tensors);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                write_table(&mut out, &opt.m);
                write_table(&mut out, &opt.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let step = u64::from_le_bytes(read_array(&mut r)?);
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let config_text = String::from_utf8(read_vec(&mut r, len)?)
            .map_err(|_| Error::CorruptCheckpoint("config block is not UTF-8".into()))?;
        let tensors = read_table(&mut r)?;
        let optimizer = match read_array::<1>(&mut r)?[0] {
            0 => None,
            1 => Some(StoredOptimizer {
                step: u64::from_le_bytes(read_array(&mut r)?),
                m: read_table(&mut r)?,
                v: read_table(&mut r)?,
            }),
            flag => return Err(Error::CorruptCheckpoint(format!("optimizer flag {flag}"))),
        };
        if !r.is_empty() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            version,
            seed,
            step,
            config_text,
            tensors,
            optimizer,
        })
    }
}

fn write_table(out: &mut Vec<u8>, tensors: &[StoredTensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.tag());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.values {
            match t.dtype {
                DType::F32 => (v as f32).write_le(out),
                DType::F64 => v.write_le(out),
            }
        }
    }
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_vec(r: &mut &[u8], len: usize) -> Result<Vec<u8>> {
    if len > r.len() {
        return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    Ok(head.to_vec())
}

fn read_table(r: &mut &[u8]) -> Result<Vec<StoredTensor>> {
    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let name = String::from_utf8(read_vec(r, name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let [tag, ndim] = read_array(r)?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::CorruptCheckpoint(format!("dtype tag {tag}")))?;
        let shape = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(read_array(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflows")))?;
        let bytes = read_vec(r, n.saturating_mul(dtype.size()))?;
        let values = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        out.push(StoredTensor {
            name,
            dtype,
            shape,
            values,
        });
    }
    Ok(out)
}

/// Writes to a temporary file in the target directory, then renames it into
/// place.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(&checkpoint.to_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads a frozen teacher and checks its patch grid against the student.
pub fn load_teacher<T: Real>(path: &Path, student: &ViTConfig) -> Result<(ViTParams<T>, ViTConfig)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint);
    }
    let ck = load_checkpoint(path)?;
    let model = ck.model()?;
    check_grid(&model, student)?;
    Ok((ck.params()?, model))
}
