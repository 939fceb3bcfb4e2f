//! Binary snapshot format.
//!
//! ```text
//! magic     8 bytes  "HFATCKPT"
//! version   u32 LE
//! epoch     u64 LE
//! seed      u64 LE
//! n_sizes   u32 LE
//! sizes     n_sizes × u64 LE      (input, hidden…, classes)
//! params    f64 LE, W0 then b0, W1, b1, … in row-major order
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{MlpSpec, ModelWeights};
use crate::autodiff::Tensor;
use crate::error::{HfatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HFATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Immutable weight snapshot at an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub epoch: u64,
    pub seed: u64,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn new(mut weights: ModelWeights, epoch: u64, seed: u64) -> Self {
        weights.epoch_tag = epoch;
        Checkpoint {
            weights,
            epoch,
            seed,
            format_version: CHECKPOINT_VERSION,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        self.weights.spec()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.weights.spec();
        let n_params: usize = self.weights.params().iter().map(Tensor::numel).sum();
        let mut buf = Vec::with_capacity(32 + 8 * spec.layer_sizes.len() + 8 * n_params);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.format_version.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(spec.layer_sizes.len() as u32).to_le_bytes());
        for &s in &spec.layer_sizes {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for p in self.weights.params() {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(HfatError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(HfatError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let epoch = r.u64("epoch")?;
        let seed = r.u64("seed")?;
        let n_sizes = u32::from_le_bytes(r.take(4, "layer count")?.try_into().unwrap()) as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(HfatError::Format(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = r.u64("layer size")?;
            if s == 0 || s > (1 << 24) {
                return Err(HfatError::Format(format!("implausible layer size {s}")));
            }
            sizes.push(s as usize);
        }
        let spec = MlpSpec::new(sizes).map_err(|e| HfatError::Format(e.to_string()))?;
        let mut params = Vec::new();
        for shape in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n, "parameter data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(HfatError::Format(format!(
                "{} trailing bytes after parameter block",
                bytes.len() - r.pos
            )));
        }
        let weights = ModelWeights::from_params(spec, params, epoch).map_err(|e| match e {
            HfatError::Numeric(m) => HfatError::Format(m),
            other => other,
        })?;
        Ok(Checkpoint {
            weights,
            epoch,
            seed,
            format_version: version,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HfatError::Format(format!(
                "truncated file while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| HfatError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| HfatError::io(&tmp, e))?;
        f.sync_all().map_err(|e| HfatError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| HfatError::io(path, e))
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &c.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HfatError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
