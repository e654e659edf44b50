//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `MIXRTS1`, length-prefixed config echo,
//! length-prefixed model spec, tensor count, then a manifest of
//! `(name, shape)` entries followed by every tensor's `f64` data in
//! manifest order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::params::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MIXRTS1";
const MAGIC_STEM: &[u8; 6] = b"MIXRTS";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration, as written to `config.echo`.
    pub config_echo: String,
    pub model: Model,
}

pub fn encode_checkpoint(config_echo: &str, model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_bytes(&mut out, config_echo.as_bytes());
    put_bytes(&mut out, model.spec.to_text().as_bytes());
    let tensors = model.tensors();
    put_u64(&mut out, tensors.len() as u64);
    for t in &tensors {
        put_bytes(&mut out, t.name.as_bytes());
        put_u64(&mut out, t.shape.len() as u64);
        for &d in &t.shape {
            put_u64(&mut out, d as u64);
        }
    }
    for t in &tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..MAGIC_STEM.len()] != MAGIC_STEM {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[MAGIC_STEM.len()..MAGIC_STEM.len() + 1]).into_owned();
        return Err(Error::VersionMismatch { found, expected: "1".into() });
    }
    let mut r = Reader { bytes, pos: CHECKPOINT_MAGIC.len() };
    let config_echo = r.string()?;
    let spec = ModelSpec::from_text(&r.string()?)?;
    let mut model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;

    let n = r.u64()? as usize;
    let expected: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if n != expected.len() {
        return Err(Error::Checkpoint(format!("manifest has {n} tensors, model spec implies {}", expected.len())));
    }
    for (name, shape) in &expected {
        let found_name = r.string()?;
        let ndim = r.u64()? as usize;
        let found_shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &found_name != name || &found_shape != shape {
            return Err(Error::Checkpoint(format!(
                "manifest entry {found_name} {found_shape:?} does not match expected {name} {shape:?}"
            )));
        }
    }
    let total = model.num_params();
    let mut flat = Vec::with_capacity(total);
    for _ in 0..total {
        flat.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.load_flat(&flat);
    model.validate()?;
    Ok(Checkpoint { config_echo, model })
}

pub fn save_checkpoint(path: &Path, config_echo: &str, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config_echo, model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 text block".into()))
    }
}
