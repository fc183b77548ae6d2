//! Checkpoint files.
//!
//! Little-endian layout: magic `TDCK`, version u32, step u64, seed u64,
//! config snapshot (u64 length + UTF-8), tensor count u32, then per tensor
//! name (u32 length + UTF-8), ndim u32, dims u64 each, values f64, first
//! moment f64, second moment f64; finally the optimizer step u64.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::adam::OptimState;
use crate::error::{Result, TdenError};
use crate::model::TdenModel;

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Base seed; every per-step stream is derived from it and the step.
    pub seed: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn capture(model: &TdenModel, optim: &OptimState, step: u64, seed: u64, config: &str) -> Self {
        let p = &model.params;
        Checkpoint {
            step,
            seed,
            config: config.to_string(),
            tensors: (0..p.len())
                .map(|i| NamedTensor {
                    name: p.name(i).to_string(),
                    shape: p.tensors()[i].shape().to_vec(),
                    data: p.tensors()[i].data().to_vec(),
                })
                .collect(),
            optim: optim.clone(),
        }
    }

    /// Copies the stored tensors into `model`, checking names and shapes.
    pub fn restore_into(&self, model: &mut TdenModel) -> Result<OptimState> {
        let p = &mut model.params;
        if self.tensors.len() != p.len() {
            return Err(TdenError::Load {
                name: "<count>".into(),
                msg: format!("checkpoint has {} tensors, model has {}", self.tensors.len(), p.len()),
            });
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if t.name != p.name(i) || t.shape != p.tensors()[i].shape() {
                return Err(TdenError::Load {
                    name: t.name.clone(),
                    msg: format!(
                        "checkpoint tensor {:?} does not match model tensor `{}` {:?}",
                        t.shape,
                        p.name(i),
                        p.tensors()[i].shape()
                    ),
                });
            }
        }
        for (i, t) in self.tensors.iter().enumerate() {
            p.tensor_mut(i).data_mut().copy_from_slice(&t.data);
        }
        Ok(self.optim.clone())
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, VERSION);
    put_u64(&mut b, ck.step);
    put_u64(&mut b, ck.seed);
    put_u64(&mut b, ck.config.len() as u64);
    b.extend_from_slice(ck.config.as_bytes());
    put_u32(&mut b, ck.tensors.len() as u32);
    for (i, t) in ck.tensors.iter().enumerate() {
        put_u32(&mut b, t.name.len() as u32);
        b.extend_from_slice(t.name.as_bytes());
        put_u32(&mut b, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(&mut b, d as u64);
        }
        put_f64s(&mut b, &t.data);
        put_f64s(&mut b, &ck.optim.m[i]);
        put_f64s(&mut b, &ck.optim.v[i]);
    }
    put_u64(&mut b, ck.optim.step);
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TdenError::Format {
                offset: self.pos as u64,
                msg: format!("truncated checkpoint: need {n} bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TdenError::Format {
            offset: at as u64,
            msg: "invalid UTF-8".into(),
        })
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| TdenError::Format {
            offset: self.pos as u64,
            msg: "tensor size overflow".into(),
        })?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TdenError::Format {
            offset: 0,
            msg: "bad magic, expected TDCK".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TdenError::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let clen = r.u64()? as usize;
    let config = r.string(clen)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        tensors.push(NamedTensor {
            name,
            shape,
            data: r.f64s(numel)?,
        });
        m.push(r.f64s(numel)?);
        v.push(r.f64s(numel)?);
    }
    let ostep = r.u64()?;
    if r.pos != buf.len() {
        return Err(TdenError::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        step,
        seed,
        config,
        tensors,
        optim: OptimState { m, v, step: ostep },
    })
}

/// Writes to a sibling temporary file and renames it over `path`, so an
/// interrupted save never leaves a partial checkpoint behind.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&encode_checkpoint(ck))?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
