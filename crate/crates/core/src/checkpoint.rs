//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes        | content                                           |
//! |--------------|---------------------------------------------------|
//! | 8            | magic `ANDNCKPT`                                  |
//! | 4            | format version (`u32`, currently 1)               |
//! | 32           | SHA-256 of the canonical training configuration   |
//! | 1            | input filter enabled (`0` or `1`)                 |
//! | 8            | input filter center (`f64`)                       |
//! | 4            | number of layer sizes `L + 1` (`u32`)             |
//! | 4·(L+1)      | layer sizes (`u32` each)                          |
//! | per layer    | weights `fan_in × fan_out` row-major (`f64`), then `fan_out` biases (`f64`) |
//!
//! Nothing may follow the last bias.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{InputFilter, LayerParams, NetworkParams};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"ANDNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn new(params: NetworkParams, config_hash: [u8; 32]) -> Self {
        Checkpoint {
            params,
            config_hash,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let n_values: usize = p.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum();
        let mut out = Vec::with_capacity(64 + 4 * p.layer_sizes().len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.push(u8::from(p.filter.enabled));
        out.extend_from_slice(&p.filter.center.to_le_bytes());
        out.extend_from_slice(&(p.layer_sizes().len() as u32).to_le_bytes());
        for &s in p.layer_sizes() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for layer in &p.layers {
            for v in layer.weights.as_slice().iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let enabled = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad filter flag {other}"))),
        };
        let center = r.f64()?;
        let n_sizes = r.u32()? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n_sizes - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = (0..fan_in * fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Checkpoint("non-finite bias".into()));
            }
            let weights = Matrix::from_vec(fan_in, fan_out, weights)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            layers.push(LayerParams::new(weights, bias)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let params = NetworkParams::from_layers(layers, InputFilter { enabled, center })?;
        Ok(Checkpoint {
            params,
            config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
