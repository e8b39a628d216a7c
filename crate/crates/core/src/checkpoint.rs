//! Checkpoint container: named binary32 tensors plus an optional
//! transition-schedule block, digest-guarded against config drift.
//!
//! Layout (all integers little-endian):
//!   "STAK" | version u32 | stage (u32 len + utf8) | config digest u64 |
//!   tensor count u32 |
//!     per tensor: name (u32 len + utf8), ndim u32, dims u32.., values f32.. |
//!   schedule flag u8 | if 1: T u32, M u32, alpha/beta/gamma f64 each T

use crate::diffusion::TransitionSchedule;
use crate::error::{Result, StaError};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"STAK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: String,
    pub config_digest: u64,
    pub tensors: Vec<CheckpointTensor>,
    pub schedule: Option<TransitionSchedule>,
}

impl Checkpoint {
    pub fn new(stage: &str, config_digest: u64) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            config_digest,
            tensors: Vec::new(),
            schedule: None,
        }
    }

    pub fn push_named(&mut self, named: &[(String, &Tensor)]) {
        for (name, t) in named {
            self.tensors.push(CheckpointTensor {
                name: name.clone(),
                shape: t.shape.clone(),
                values: t.values.iter().map(|&v| v as f32).collect(),
            });
        }
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.tensors.push(CheckpointTensor {
            name: name.to_string(),
            shape: vec![1],
            values: vec![value as f32],
        });
    }

    pub fn push_vec(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) {
        self.tensors.push(CheckpointTensor {
            name: name.to_string(),
            shape,
            values: values.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.tensor(name).map(|t| t.values[0] as f64)
    }

    /// Copy stored values into live tensors by name; names and shapes must
    /// match exactly.
    pub fn apply_to(&self, named: &mut [(String, &mut Tensor)]) -> Result<()> {
        for (name, dst) in named.iter_mut() {
            let src = self.tensor(name).ok_or_else(|| {
                StaError::Checkpoint(format!("tensor `{}` missing from checkpoint", name))
            })?;
            if src.shape != dst.shape {
                return Err(StaError::Checkpoint(format!(
                    "tensor `{}` shape {:?} != expected {:?}",
                    name, src.shape, dst.shape
                )));
            }
            dst.values = src.values.iter().map(|&v| v as f64).collect();
            dst.grad = None;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stage.len() as u32).to_le_bytes());
        out.extend_from_slice(self.stage.as_bytes());
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.schedule {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&(s.t_steps as u32).to_le_bytes());
                out.extend_from_slice(&(s.m as u32).to_le_bytes());
                for series in [&s.alpha, &s.beta, &s.gamma] {
                    for &v in series.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(StaError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(StaError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                version
            )));
        }
        let stage_len = cur.u32()? as usize;
        let stage = String::from_utf8(cur.take(stage_len)?.to_vec())
            .map_err(|_| StaError::Checkpoint("stage tag is not utf-8".into()))?;
        let config_digest = cur.u64()?;
        let n_tensors = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| StaError::Checkpoint("tensor name is not utf-8".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(cur.f32()?);
            }
            tensors.push(CheckpointTensor { name, shape, values });
        }
        let schedule = match cur.u8()? {
            0 => None,
            1 => {
                let t_steps = cur.u32()? as usize;
                let m = cur.u32()? as usize;
                let mut series = Vec::new();
                for _ in 0..3 {
                    let mut v = Vec::with_capacity(t_steps);
                    for _ in 0..t_steps {
                        v.push(cur.f64()?);
                    }
                    series.push(v);
                }
                let gamma = series.pop().unwrap();
                let beta = series.pop().unwrap();
                let alpha = series.pop().unwrap();
                let mut alpha_bar = Vec::with_capacity(t_steps);
                let mut beta_bar = Vec::with_capacity(t_steps);
                let mut gamma_bar = Vec::with_capacity(t_steps);
                let mut abar = 1.0f64;
                let mut keep = 1.0f64;
                for t in 0..t_steps {
                    abar *= alpha[t];
                    keep *= 1.0 - gamma[t];
                    let gbar = 1.0 - keep;
                    alpha_bar.push(abar);
                    gamma_bar.push(gbar);
                    beta_bar.push((1.0 - abar - gbar) / m as f64);
                }
                let s = TransitionSchedule {
                    t_steps,
                    m,
                    alpha,
                    beta,
                    gamma,
                    alpha_bar,
                    beta_bar,
                    gamma_bar,
                };
                s.check_invariants()?;
                Some(s)
            }
            other => {
                return Err(StaError::Checkpoint(format!(
                    "bad schedule flag {}",
                    other
                )))
            }
        };
        if cur.pos != bytes.len() {
            return Err(StaError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            stage,
            config_digest,
            tensors,
            schedule,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| StaError::Checkpoint(format!("{}: {}", path.display(), e)))?;
        Self::decode(&bytes)
    }

    /// Load and enforce the config digest (hard error on mismatch unless
    /// explicitly allowed).
    pub fn load_checked(path: &Path, expected_digest: u64, allow_mismatch: bool) -> Result<Checkpoint> {
        let ckpt = Self::load(path)?;
        if ckpt.config_digest != expected_digest && !allow_mismatch {
            return Err(StaError::Checkpoint(format!(
                "config digest mismatch for {}: checkpoint {:016x}, current {:016x} \
                 (pass --allow-mismatch to override)",
                path.display(),
                ckpt.config_digest,
                expected_digest
            )));
        }
        Ok(ckpt)
    }
}

/// FNV checksum of a file's raw bytes (reported with metrics).
pub fn file_checksum(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&std::fs::read(path)?))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(StaError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
