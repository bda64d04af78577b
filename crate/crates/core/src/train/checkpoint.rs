//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! `"TCC1"`, version, config length, config text (canonical `key = value`
//! lines), tensor count, then per tensor: name length, name, rank, dims,
//! and the values as little-endian `f32`. Tensors appear in the model's
//! visiting order and include running statistics.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TransCC;
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCC1";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &TransCC<f32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION as usize);
    let text = model.config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let mut tensors = Vec::new();
    model.visit("", &mut |name, _, t| tensors.push((name.to_string(), t.clone())));
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::BadCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::BadCheckpoint("invalid utf-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TransCC<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::BadCheckpoint("unknown magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_text(r.text()?).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let mut model = TransCC::<f32>::new(&config, 0)?;
    let mut expected = Vec::new();
    model.visit("", &mut |name, _, t| expected.push((name.to_string(), t.shape().to_vec())));
    let count = r.u32()?;
    if count != expected.len() {
        return Err(Error::BadCheckpoint(format!("{count} tensors, model has {}", expected.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let got = r.text()?;
        if got != name {
            return Err(Error::BadCheckpoint(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::BadCheckpoint(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::BadCheckpoint("size overflow".into()))?)?;
        values.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<_>>());
    }
    if r.pos != bytes.len() {
        return Err(Error::BadCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut i = 0;
    model.visit_mut("", &mut |_, _, t| {
        let shape = t.shape().to_vec();
        let tracked = t.is_tracked();
        let fresh = Tensor::from_vec(&shape, std::mem::take(&mut values[i])).expect("shape checked above");
        *t = if tracked { fresh.requires_grad() } else { fresh };
        i += 1;
    });
    Ok(model)
}

pub fn save(path: &Path, model: &TransCC<f32>) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Missing or unreadable files are reported as [`Error::BadCheckpoint`].
pub fn load(path: &Path) -> Result<TransCC<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::BadCheckpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            embed_dim: 8,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            fie_channels: vec![2, 2, 2, 2],
            decoder_channels: vec![4, 4, 2, 2],
            skip_channels: vec![2],
            taps: vec![1, 2],
            variant: Variant::MepOnly,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = TransCC::<f32>::new(&tiny(), 9).unwrap();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.config, m.config);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tcc");
        save(&p, &m).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert_eq!(encode(&load(&p).unwrap()), bytes);
    }

    #[test]
    fn header_layout() {
        let m = TransCC::<f32>::new(&tiny(), 0).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"TCC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(std::str::from_utf8(&bytes[12..12 + len]).unwrap(), m.config.to_text());
    }

    #[test]
    fn loaded_parameters_are_trainable() {
        let m = decode(&encode(&TransCC::<f32>::new(&tiny(), 1).unwrap())).unwrap();
        assert_eq!(crate::nn::parameters(&m).len(), crate::nn::parameters(&TransCC::<f32>::new(&tiny(), 1).unwrap()).len());
        assert!(crate::nn::parameters(&m).iter().all(|(_, t)| t.is_tracked()));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&TransCC::<f32>::new(&tiny(), 0).unwrap());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::BadCheckpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::BadCheckpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::BadCheckpoint(_))));
        assert!(matches!(load(Path::new("/nonexistent/x.tcc")), Err(Error::BadCheckpoint(_))));
    }
}
