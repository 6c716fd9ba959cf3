//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "S3PCKPT\0"
//! version    u32      1
//! input      3 x u32  channels, height, width
//! arch_len   u32, then arch_len bytes of JSON
//! step       u64
//! rho eps lr 3 x f64
//! n_blobs    u32, then per blob:
//!   kind u8 (0 param, 1 buffer, 2 squared-gradient, 3 squared-delta)
//!   index u32, dims 4 x u32, len(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

use super::model::{LayerSpec, Model};
use super::optim::{Adadelta, AdadeltaConfig};

pub const MAGIC: &[u8; 8] = b"S3PCKPT\0";
pub const VERSION: u32 = 1;

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adadelta,
    pub step: u64,
}

const KINDS: usize = 4;

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in ck.model.input_shape() {
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    }
    let arch = serde_json::to_vec(ck.model.arch())?;
    out.extend_from_slice(&to_u32(arch.len())?.to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&ck.step.to_le_bytes());
    let c = ck.optimizer.config;
    for v in [c.rho, c.eps, c.lr] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let (sq_grad, sq_delta) = ck.optimizer.accumulators();
    let groups: [&[Tensor4]; KINDS] = [ck.model.params(), ck.model.buffers(), sq_grad, sq_delta];
    let total: usize = groups.iter().map(|g| g.len()).sum();
    out.extend_from_slice(&to_u32(total)?.to_le_bytes());
    for (kind, group) in groups.iter().enumerate() {
        for (index, t) in group.iter().enumerate() {
            out.push(kind as u8);
            out.extend_from_slice(&to_u32(index)?.to_le_bytes());
            for d in t.dims().as_array() {
                out.extend_from_slice(&to_u32(d)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit in u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let input = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let arch_len = cur.u32()? as usize;
    let arch: Vec<LayerSpec> = serde_json::from_slice(cur.take(arch_len)?)?;
    let step = cur.u64()?;
    let config = AdadeltaConfig {
        rho: cur.f64()?,
        eps: cur.f64()?,
        lr: cur.f64()?,
    };
    let mut model = Model::build(&arch, input, 0)?;
    let expected = [model.params().len(), model.buffers().len(), model.params().len(), model.params().len()];
    let mut groups: [Vec<Tensor4>; KINDS] = Default::default();
    let n_blobs = cur.u32()? as usize;
    if n_blobs != expected.iter().sum::<usize>() {
        return Err(Error::format(format!("{n_blobs} tensors stored, architecture needs {}", expected.iter().sum::<usize>())));
    }
    for _ in 0..n_blobs {
        let kind = cur.take(1)?[0] as usize;
        if kind >= KINDS {
            return Err(Error::format(format!("unknown tensor kind {kind}")));
        }
        let index = cur.u32()? as usize;
        if index != groups[kind].len() {
            return Err(Error::format(format!("tensor {index} of kind {kind} out of order")));
        }
        let d = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?].map(|v| v as usize);
        let dims = Dims::new(d[0], d[1], d[2], d[3])?;
        let bytes = cur.take(dims.len().checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        groups[kind].push(Tensor4::from_vec(dims, data)?);
    }
    if cur.at != buf.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    let [params, buffers, sq_grad, sq_delta] = groups;
    for acc in [&sq_grad, &sq_delta] {
        if acc.len() != params.len() || acc.iter().zip(&params).any(|(a, p)| a.dims() != p.dims()) {
            return Err(Error::format("optimizer state does not match parameters"));
        }
    }
    model.replace_state(params, buffers)?;
    Ok(Checkpoint {
        model,
        optimizer: Adadelta::from_accumulators(config, sq_grad, sq_delta),
        step,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
