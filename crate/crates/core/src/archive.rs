//! `PFWA` v1 binary weight archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PFWA" | u32 version = 1 | u64 count
//! count × { u16 name_len | name (UTF-8) | u8 rank | rank × u64 dim | u64 offset }
//! payload: little-endian f32 values; `offset` is in bytes from the payload start
//! ```

use std::path::Path;

use indexmap::IndexMap;
use peft_forge_tensor::Tensor;

use crate::vit::{names, ViTConfig, ViTModel};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFWA";
pub const VERSION: u32 = 1;

/// Ordered name → tensor map in the `PFWA` format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    tensors: IndexMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Archive(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Archive(format!("tensor name too long ({} bytes)", name.len())));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Archive(format!("duplicate tensor `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic, expected PFWA".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut headers = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            headers.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut archive = WeightArchive::new();
        for (name, shape, offset) in headers {
            let numel: usize = shape.iter().product();
            let end = offset.checked_add(numel * 4).filter(|&e| e <= payload.len());
            let end = end.ok_or_else(|| Error::Archive(format!("payload of `{name}` out of bounds")))?;
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Archive(format!("`{name}`: {e}")))?;
            archive.insert(name, t)?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_model(model: &ViTModel<f32>) -> Self {
        WeightArchive { tensors: model.params().map(|(k, v)| (k.to_string(), (**v).clone())).collect() }
    }

    /// Validates names and shapes against `config`. A positional embedding
    /// trained on another square patch grid is resampled bicubically.
    pub fn into_model(mut self, config: &ViTConfig) -> Result<ViTModel<f32>> {
        let want = [config.tokens(), config.dim];
        if let Some(pos) = self.tensors.get_mut(names::POS) {
            if pos.shape() != want && pos.rank() == 2 && pos.shape()[1] == config.dim {
                if let Some(resized) = resize_pos_embed(pos, config.grid()) {
                    *pos = resized;
                }
            }
        }
        ViTModel::from_params(config.clone(), self.tensors)
    }
}

pub fn load_weights(archive: &WeightArchive, config: &ViTConfig) -> Result<ViTModel<f32>> {
    archive.clone().into_model(config)
}

/// Cubic convolution kernel with a = −0.75.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Half-pixel-centred bicubic taps (index, weight) for resampling `src` → `dst`.
fn taps(src: usize, dst: usize) -> Vec<[(usize, f64); 4]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = (o as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let frac = x - base;
            let mut t = [(0usize, 0.0); 4];
            for (k, slot) in t.iter_mut().enumerate() {
                let i = (base as i64 + k as i64 - 1).clamp(0, src as i64 - 1) as usize;
                *slot = (i, cubic(frac - (k as f64 - 1.0)));
            }
            t
        })
        .collect()
}

/// Resamples a `[1 + g², d]` positional embedding to grid `target`; the CLS
/// row is kept. `None` when the source is not a square grid.
pub fn resize_pos_embed(pos: &Tensor<f32>, target: usize) -> Option<Tensor<f32>> {
    let (n, d) = (pos.shape()[0], pos.shape()[1]);
    let g = ((n.checked_sub(1)?) as f64).sqrt().round() as usize;
    if g == 0 || g * g + 1 != n {
        return None;
    }
    let src = pos.data();
    let (ty, tx) = (taps(g, target), taps(g, target));
    let mut out = Vec::with_capacity((target * target + 1) * d);
    out.extend_from_slice(&src[..d]);
    for wy in &ty {
        for wx in &tx {
            for c in 0..d {
                let mut acc = 0.0f64;
                for &(iy, fy) in wy {
                    for &(ix, fx) in wx {
                        acc += fy * fx * src[(1 + iy * g + ix) * d + c] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::new([target * target + 1, d], out).ok()
}
