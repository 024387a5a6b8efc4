//! Weight serialization.
//!
//! Container layout, all integers little-endian: magic `DLW1`, `u32`
//! version (1), `u32` array count, then per array `u16` name length, UTF-8
//! name, `u8` ndim, `ndim x u32` dims, raw f32 payload. A synthetic
//! `meta.config` array carries the six architecture scalars so a file alone
//! reconstructs the network shape. Parameters are kept f32-exact in memory,
//! so save followed by load is bitwise lossless.

use std::collections::HashMap;
use std::path::Path;

use super::{DenoiserConfig, DenoiserParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DLW1";
const VERSION: u32 = 1;
const META_NAME: &str = "meta.config";

fn config_scalars(cfg: &DenoiserConfig) -> Vec<f64> {
    vec![
        cfg.image_size as f64,
        cfg.base_channels as f64,
        cfg.attn_heads as f64,
        cfg.attn_resolution as f64,
        cfg.num_classes as f64,
        cfg.cond_drop_prob,
    ]
}

fn config_from_scalars(v: &[f64]) -> Result<DenoiserConfig> {
    if v.len() != 6 {
        return Err(Error::WeightsFormat(format!(
            "meta.config holds {} scalars, expected 6",
            v.len()
        )));
    }
    let as_usize = |x: f64, what: &str| -> Result<usize> {
        if x < 0.0 || x.fract() != 0.0 || x > u32::MAX as f64 {
            return Err(Error::WeightsFormat(format!(
                "meta.config field {what} is not a valid count: {x}"
            )));
        }
        Ok(x as usize)
    };
    let cfg = DenoiserConfig {
        image_size: as_usize(v[0], "image_size")?,
        base_channels: as_usize(v[1], "base_channels")?,
        attn_heads: as_usize(v[2], "attn_heads")?,
        attn_resolution: as_usize(v[3], "attn_resolution")?,
        num_classes: as_usize(v[4], "num_classes")?,
        cond_drop_prob: v[5],
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write params to `path` in the container format above.
pub fn save_params(params: &DenoiserParams, path: &Path) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, Vec<f64>)> = vec![(
        META_NAME.to_string(),
        vec![6],
        config_scalars(&params.cfg),
    )];
    for (name, t) in params.arrays() {
        named.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, shape, data) in &named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::WeightsFormat(format!(
                "file truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let s = self.take(2, what)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

/// Read params from `path`, validating magic, version, and every shape
/// against the architecture recorded in `meta.config`.
pub fn load_params(path: &Path) -> Result<DenoiserParams> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };

    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::WeightsFormat("bad magic, expected DLW1".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightsFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = cur.u32("array count")? as usize;

    let mut arrays: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "array name")?)
            .map_err(|_| Error::WeightsFormat("array name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.take(1, &format!("ndim of {name}"))?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32(&format!("dims of {name}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if arrays.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::WeightsFormat(format!("duplicate array {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::WeightsFormat(format!(
            "{} trailing bytes after the last array",
            bytes.len() - cur.pos
        )));
    }

    let (meta_shape, meta) = arrays
        .remove(META_NAME)
        .ok_or_else(|| Error::WeightsFormat("missing meta.config array".into()))?;
    if meta_shape != [6] {
        return Err(Error::WeightsFormat(format!(
            "meta.config shape {meta_shape:?}, expected [6]"
        )));
    }
    let cfg = config_from_scalars(&meta)?;

    // shape template from the recorded architecture
    let mut params = super::init_params(&cfg, 0)?;
    for (name, slot) in params.arrays_mut() {
        let (shape, data) = arrays.remove(name).ok_or_else(|| {
            Error::WeightsFormat(format!("missing array {name}"))
        })?;
        if shape != slot.shape() {
            return Err(Error::WeightsFormat(format!(
                "array {name} has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(&shape, data);
    }
    if let Some(name) = arrays.keys().next() {
        return Err(Error::WeightsFormat(format!("unknown array {name}")));
    }
    Ok(params)
}
