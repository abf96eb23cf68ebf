//! Single-file model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "CRYODIFF"
//! version    u32      currently 1
//! kind       str      "diffusion" or "post"
//! config     str      JSON echo of the model (and training) configuration
//! n_tensors  u32
//! tensor*    n_tensors parameter tensors
//! has_optim  u8       0 or 1
//! [step u64, lr f64, beta1 f64, beta2 f64, eps f64,
//!  n_tensors first moments, n_tensors second moments]   if has_optim = 1
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. A tensor is
//! `name: str, dtype: u8 (1 = f32, 2 = f64), ndim: u32, dims: u64 × ndim`,
//! then the row-major data. Nothing may follow the last section.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, DenoiserModel, ScheduleSpec};
use crate::nn::{Adam, AdamConfig, DType, Param, ParamSet, Real};
use crate::postprocess::{PostConfig, PostModel};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRYODIFF";
pub const VERSION: u32 = 1;
pub const KIND_DIFFUSION: &str = "diffusion";
pub const KIND_POST: &str = "post";

/// A tensor as stored: raw little-endian bytes of `dtype`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn from_param<T: Real>(p: &Param<T>) -> Self {
        let mut data = vec![0u8; p.data.len() * T::DTYPE.size()];
        match T::DTYPE {
            DType::F32 => {
                for (chunk, v) in data.chunks_exact_mut(4).zip(&p.data) {
                    LittleEndian::write_f32(chunk, v.as_f64() as f32);
                }
            }
            DType::F64 => {
                for (chunk, v) in data.chunks_exact_mut(8).zip(&p.data) {
                    LittleEndian::write_f64(chunk, v.as_f64());
                }
            }
        }
        Tensor {
            name: p.name.clone(),
            dtype: T::DTYPE,
            shape: p.shape.clone(),
            data,
        }
    }

    /// Decodes into `T`, converting between float widths if needed.
    pub fn to_param<T: Real>(&self) -> Param<T> {
        let data = match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| T::from_f64(LittleEndian::read_f32(c) as f64))
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| T::from_f64(LittleEndian::read_f64(c)))
                .collect(),
        };
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data,
        }
    }
}

pub fn tensors_of<T: Real>(params: &ParamSet<T>) -> Vec<Tensor> {
    params.params.iter().map(Tensor::from_param).collect()
}

pub fn params_of<T: Real>(tensors: &[Tensor]) -> ParamSet<T> {
    ParamSet {
        params: tensors.iter().map(Tensor::to_param).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn from_adam<T: Real>(adam: &Adam<T>) -> Self {
        OptimizerState {
            step: adam.step,
            config: adam.config,
            m: tensors_of(&adam.m),
            v: tensors_of(&adam.v),
        }
    }

    pub fn to_adam<T: Real>(&self, params: &ParamSet<T>) -> Result<Adam<T>> {
        let adam = Adam {
            config: self.config,
            step: self.step,
            m: params_of(&self.m),
            v: params_of(&self.v),
        };
        if !params.same_layout(&adam.m) || !params.same_layout(&adam.v) {
            return Err(Error::Checkpoint(
                "optimizer moments do not match the parameters".into(),
            ));
        }
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<Tensor>,
    pub optimizer: Option<OptimizerState>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[Tensor]) {
    for t in tensors {
        put_str(out, &t.name);
        out.push(t.dtype.tag());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.data);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn tensors(&mut self, count: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.str()?;
            let tag = self.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for {name}")))?;
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("{name} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut len: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(self.u64()?)
                    .map_err(|_| Error::Checkpoint(format!("{name} dimension overflows")))?;
                len = len
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("{name} size overflows")))?;
                shape.push(d);
            }
            let bytes = len
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Checkpoint(format!("{name} size overflows")))?;
            let data = self.take(bytes)?.to_vec();
            out.push(Tensor {
                name,
                dtype,
                shape,
                data,
            });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config.to_string());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        put_tensors(&mut out, &self.tensors);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for v in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_tensors(&mut out, &o.m);
                put_tensors(&mut out, &o.v);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)
            .map_err(|_| Error::Checkpoint("file too short".into()))?
            != MAGIC
        {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.str()?;
        let config: serde_json::Value = serde_json::from_str(&r.str()?)?;
        let count = r.u32()? as usize;
        let tensors = r.tensors(count)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let m = r.tensors(count)?;
                let v = r.tensors(count)?;
                Some(OptimizerState { step, config, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            config,
            tensors,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file first, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DiffusionEcho {
    model: DenoiserConfig,
    schedule: ScheduleSpec,
    #[serde(default)]
    train: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct PostEcho {
    model: PostConfig,
    #[serde(default)]
    train: serde_json::Value,
}

/// `train` is echoed verbatim for provenance and ignored on load.
pub fn denoiser_checkpoint<T: Real>(
    model: &DenoiserModel<T>,
    adam: Option<&Adam<T>>,
    train: serde_json::Value,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: KIND_DIFFUSION.into(),
        config: serde_json::to_value(DiffusionEcho {
            model: model.config,
            schedule: model.schedule,
            train,
        })?,
        tensors: tensors_of(&model.net.params),
        optimizer: adam.map(OptimizerState::from_adam),
    })
}

pub fn load_denoiser<T: Real>(ckpt: &Checkpoint) -> Result<(DenoiserModel<T>, Option<Adam<T>>)> {
    ckpt.expect_kind(KIND_DIFFUSION)?;
    let echo: DiffusionEcho = serde_json::from_value(ckpt.config.clone())?;
    let model = DenoiserModel::from_params(echo.model, echo.schedule, params_of(&ckpt.tensors))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let adam = ckpt
        .optimizer
        .as_ref()
        .map(|o| o.to_adam(model.params()))
        .transpose()?;
    Ok((model, adam))
}

pub fn post_checkpoint<T: Real>(
    model: &PostModel<T>,
    adam: Option<&Adam<T>>,
    train: serde_json::Value,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: KIND_POST.into(),
        config: serde_json::to_value(PostEcho {
            model: model.config,
            train,
        })?,
        tensors: tensors_of(&model.net.params),
        optimizer: adam.map(OptimizerState::from_adam),
    })
}

pub fn load_post<T: Real>(ckpt: &Checkpoint) -> Result<(PostModel<T>, Option<Adam<T>>)> {
    ckpt.expect_kind(KIND_POST)?;
    let echo: PostEcho = serde_json::from_value(ckpt.config.clone())?;
    let model = PostModel::from_params(echo.model, params_of(&ckpt.tensors))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let adam = ckpt
        .optimizer
        .as_ref()
        .map(|o| o.to_adam(model.params()))
        .transpose()?;
    Ok((model, adam))
}
