//! Model checkpoint serialization.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "CDSE" | version | echo_len | echo ("key=value\n" model config lines)
//! | param_count | repeated: name_len | name | rank (4) | 4 extents | f32 data
//! ```
//!
//! Every table entry is written in registration order, including the
//! non-trainable batch-norm running statistics, so a loaded model infers
//! bit-identically to the saved one. Values are stored as `f32`; loading
//! always yields an `f32` model.

use std::fs;
use std::path::Path;

use crate::model::{CdseUnet, ModelConfig};
use crate::tensor::{Dims, Scalar};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDSE";
pub const VERSION: u32 = 1;

/// Serialize a model to checkpoint bytes.
pub fn checkpoint_bytes<T: Scalar>(model: &CdseUnet<T>) -> Vec<u8> {
    let echo = config_echo(&model.config);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        let d = p.value.dims;
        for extent in [d.n, d.c, d.h, d.w] {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for v in &p.value.data {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(model: &CdseUnet<T>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<CdseUnet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint_bytes(&bytes)
}

/// Rebuild a model from checkpoint bytes: the config echo determines the
/// architecture, then every parameter is filled by name. Unknown or
/// missing parameters, dimension mismatches and truncation are load errors.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<CdseUnet<f32>> {
    let mut r = Reader { bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::load(format!("bad magic {magic:02x?}, expected \"CDSE\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::load(format!("unsupported checkpoint version {version}")));
    }

    let echo_len = r.u32("config length")? as usize;
    let echo = std::str::from_utf8(r.take(echo_len, "config echo")?)
        .map_err(|_| Error::load("config echo is not UTF-8"))?;
    let pairs: Vec<(&str, &str)> = echo
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| Error::load(format!("config echo line '{l}' has no '='")))
        })
        .collect::<Result<_>>()?;
    let config = ModelConfig::from_key_values(pairs)?;

    let mut model = CdseUnet::<f32>::build(config, 0)?;
    let count = r.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::load(format!(
            "checkpoint has {count} parameters but the config implies {}",
            model.params.len()
        )));
    }

    let mut filled = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::load("parameter name is not UTF-8"))?
            .to_owned();
        let rank = r.u32("rank")?;
        if rank != 4 {
            return Err(Error::load(format!("parameter {name}: rank {rank}, expected 4")));
        }
        let mut e = [0usize; 4];
        for x in &mut e {
            *x = r.u32("extent")? as usize;
        }
        let dims = Dims::new(e[0], e[1], e[2], e[3]);

        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::load(format!("unknown parameter '{name}'")))?;
        if std::mem::replace(&mut filled[id.0], true) {
            return Err(Error::load(format!("duplicate parameter '{name}'")));
        }
        let value = model.params.value_mut(id);
        if value.dims != dims {
            return Err(Error::load(format!(
                "parameter {name}: stored dims {dims} do not match model dims {}",
                value.dims
            )));
        }
        let raw = r.take(4 * dims.numel(), "parameter data")?;
        for (dst, chunk) in value.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if let Some(missing) = filled.iter().position(|f| !*f) {
        let name = model.params.iter().nth(missing).map(|p| p.name.clone()).unwrap_or_default();
        return Err(Error::load(format!("checkpoint missing parameter '{name}'")));
    }
    Ok(model)
}

fn config_echo(config: &ModelConfig) -> String {
    config
        .to_key_values()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::load(format!(
                "truncated at byte {}: reading {what} needs {n} more bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
