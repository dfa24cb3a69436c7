//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic    16 bytes  "ARDSPARSIFY\0\0\0\0\0"
//! version  u8        1
//! layers   u32
//! per layer:
//!   kind   u8        0 = dense, 1 = conv2d
//!   conv only: stride u32, padding u32
//!   ndim   u8, dims ndim × u32           (weight shape)
//!   μ      len × f64
//!   log σ  len × f64
//!   bias   u8        0 = none, 1 = point, 2 = bayesian
//!   if bias: len u32, μ len × f64, log σ len × f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BayesLayer, BayesNet, BiasMode, GaussianPosterior, LayerKind, LayerSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 16] = *b"ARDSPARSIFY\0\0\0\0\0";
pub const VERSION: u8 = 1;

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a network to checkpoint bytes.
pub fn write_checkpoint(net: &BayesNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        match layer.spec.kind {
            LayerKind::Dense { .. } => out.push(0),
            LayerKind::Conv2d { stride, padding, .. } => {
                out.push(1);
                out.extend_from_slice(&(stride as u32).to_le_bytes());
                out.extend_from_slice(&(padding as u32).to_le_bytes());
            }
        }
        let shape = layer.weight.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, layer.weight.mu());
        put_f64s(&mut out, layer.weight.log_sigma());
        match (&layer.bias, layer.spec.bias) {
            (Some(b), mode) => {
                out.push(if mode == BiasMode::Bayesian { 2 } else { 1 });
                out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                put_f64s(&mut out, b.mu());
                put_f64s(&mut out, b.log_sigma());
            }
            (None, _) => out.push(0),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let at = self.pos;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Format {
            path: self.path.to_path_buf(),
            offset: at as u64,
            detail: e.to_string(),
        })
    }

    fn posterior(&mut self, shape: &[usize]) -> Result<GaussianPosterior> {
        let mu = self.tensor(shape)?;
        let ls = self.tensor(shape)?;
        GaussianPosterior::new(mu, ls)
    }
}

/// Parses checkpoint bytes. `path` is only used in error messages.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<BayesNet> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(16)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        r.pos -= 1;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let kind_at = r.pos;
        let kind = r.u8()?;
        let conv = match kind {
            0 => None,
            1 => Some((r.u32()?, r.u32()?)),
            k => {
                r.pos = kind_at;
                return Err(r.err(format!("unknown layer kind {k}")));
            }
        };
        let ndim = r.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_>>()?;
        let kind = match (conv, shape.as_slice()) {
            (None, &[fan_in, fan_out]) => LayerKind::Dense { fan_in, fan_out },
            (Some((stride, padding)), &[filters, in_channels, kernel_h, kernel_w]) => LayerKind::Conv2d {
                in_channels,
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
            },
            _ => return Err(r.err(format!("weight shape {shape:?} does not fit layer kind"))),
        };
        if shape.contains(&0) {
            return Err(r.err("zero-sized weight shape"));
        }
        let weight = r.posterior(&shape)?;
        let bias_at = r.pos;
        let (mode, bias) = match r.u8()? {
            0 => (BiasMode::None, None),
            flag @ (1 | 2) => {
                let n = r.u32()?;
                if n != kind.bias_len() {
                    return Err(r.err(format!("bias length {n}, expected {}", kind.bias_len())));
                }
                let mode = if flag == 2 { BiasMode::Bayesian } else { BiasMode::Point };
                (mode, Some(r.posterior(&[n])?))
            }
            f => {
                r.pos = bias_at;
                return Err(r.err(format!("unknown bias flag {f}")));
            }
        };
        let spec = LayerSpec { kind, bias: mode };
        layers.push(BayesLayer::new(spec, weight, bias)?);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last layer"));
    }
    BayesNet::new(layers).map_err(|e| r.err(e.to_string()))
}

pub fn save_checkpoint(path: &Path, net: &BayesNet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&write_checkpoint(net))?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BayesNet> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes, path)
}
