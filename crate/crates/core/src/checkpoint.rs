//! Checkpoint files: model config, id remap tables, and named f32 arrays
//! (parameters, optimizer moments, counters) in a fixed order.
//!
//! Little-endian layout: magic "STDPCKPT", version u32, config
//! (d/layers/heads/max_len u32, dropout f32), item and attribute counts,
//! raw-id tables (u64 each), then a u32 array count followed by
//! length-prefixed named f32 arrays. load(save(x)) is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::corpus::IdMaps;
use crate::model::{ModelConfig, Parameters};
use crate::trainer::OptimizerState;

const MAGIC: &[u8; 8] = b"STDPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),
    #[error("checkpoint: truncated or malformed ({0})")]
    Malformed(String),
    #[error("checkpoint: expected array '{expected}', found '{got}'")]
    NameMismatch { expected: String, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub ids: IdMaps,
    pub params: Parameters,
    pub opt: Option<OptimizerState>,
    pub epochs_done: u32,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_array(w: &mut impl Write, name: &str, data: &[f32]) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    write_f32s(w, data)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, ckpt.config.d as u32)?;
    write_u32(&mut w, ckpt.config.layers as u32)?;
    write_u32(&mut w, ckpt.config.heads as u32)?;
    write_u32(&mut w, ckpt.config.max_len as u32)?;
    w.write_all(&ckpt.config.dropout.to_le_bytes())?;
    write_u32(&mut w, ckpt.ids.n_items())?;
    write_u32(&mut w, ckpt.ids.n_attrs())?;
    for &raw in &ckpt.ids.items {
        w.write_all(&raw.to_le_bytes())?;
    }
    for &raw in &ckpt.ids.attrs {
        w.write_all(&raw.to_le_bytes())?;
    }

    let named = ckpt.params.named();
    let mut count = named.len() as u32 + 1; // + meta.epochs_done
    if ckpt.opt.is_some() {
        count += 2 * named.len() as u32 + 1; // moments + opt.step
    }
    write_u32(&mut w, count)?;
    for (name, tensor) in &named {
        write_array(&mut w, name, tensor.data())?;
    }
    if let Some(opt) = &ckpt.opt {
        debug_assert!(opt.step < (1 << 24), "step counter exceeds exact f32 range");
        write_array(&mut w, "opt.step", &[opt.step as f32])?;
        for ((name, _), m) in named.iter().zip(&opt.m) {
            write_array(&mut w, &format!("opt.m.{name}"), m)?;
        }
        for ((name, _), v) in named.iter().zip(&opt.v) {
            write_array(&mut w, &format!("opt.v.{name}"), v)?;
        }
    }
    write_array(&mut w, "meta.epochs_done", &[ckpt.epochs_done as f32])?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.inner
            .read_exact(buf)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let mut out = vec![0.0f32; n];
        let mut bytes = vec![0u8; n * 4];
        self.exact(&mut bytes)?;
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            out[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(out)
    }

    fn array(&mut self) -> Result<(String, Vec<f32>), CheckpointError> {
        let name_len = self.u16()? as usize;
        let mut name = vec![0u8; name_len];
        self.exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("array name not utf-8".into()))?;
        let count = self.u64()? as usize;
        let data = self.f32s(count)?;
        Ok((name, data))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 8];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config = ModelConfig {
        d: r.u32()? as usize,
        layers: r.u32()? as usize,
        heads: r.u32()? as usize,
        max_len: r.u32()? as usize,
        dropout: r.f32()?,
    };
    let n_items = r.u32()?;
    let n_attrs = r.u32()?;
    let mut ids = IdMaps::default();
    for _ in 0..n_items {
        ids.items.push(r.u64()?);
    }
    for _ in 0..n_attrs {
        ids.attrs.push(r.u64()?);
    }

    let array_count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(array_count);
    for _ in 0..array_count {
        arrays.push(r.array()?);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(CheckpointError::Io)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }

    // rebuild parameters in canonical order, verifying names and shapes
    let mut params = {
        // shape donor with zeroed arrays
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Parameters::init(&config, n_items, n_attrs, &mut rng)
    };
    fn next(
        it: &mut impl Iterator<Item = (String, Vec<f32>)>,
        expected: &str,
    ) -> Result<Vec<f32>, CheckpointError> {
        let (name, data) = it
            .next()
            .ok_or_else(|| CheckpointError::Malformed("missing arrays".into()))?;
        if name != expected {
            return Err(CheckpointError::NameMismatch {
                expected: expected.to_string(),
                got: name,
            });
        }
        Ok(data)
    }
    let mut it = arrays.into_iter();
    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    for (name, tensor) in params.named_mut() {
        let data = next(&mut it, &name)?;
        if data.len() != tensor.numel() {
            return Err(CheckpointError::Malformed(format!(
                "array '{name}' has {} values, expected {}",
                data.len(),
                tensor.numel()
            )));
        }
        *tensor = Tensor::new(tensor.shape().to_vec(), data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }

    // remaining arrays: either [opt.step, opt.m.*, opt.v.*,] meta.epochs_done
    let (first_name, first_data) = it
        .next()
        .ok_or_else(|| CheckpointError::Malformed("missing meta array".into()))?;
    let (opt, epochs_done) = if first_name == "opt.step" {
        let step = first_data
            .first()
            .copied()
            .ok_or_else(|| CheckpointError::Malformed("empty opt.step".into()))? as u64;
        let mut m = Vec::with_capacity(names.len());
        for name in &names {
            m.push(next(&mut it, &format!("opt.m.{name}"))?);
        }
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            v.push(next(&mut it, &format!("opt.v.{name}"))?);
        }
        let meta = next(&mut it, "meta.epochs_done")?;
        (
            Some(OptimizerState { m, v, step }),
            meta.first().copied().unwrap_or(0.0) as u32,
        )
    } else if first_name == "meta.epochs_done" {
        (None, first_data.first().copied().unwrap_or(0.0) as u32)
    } else {
        return Err(CheckpointError::NameMismatch {
            expected: "opt.step or meta.epochs_done".into(),
            got: first_name,
        });
    };
    if it.next().is_some() {
        return Err(CheckpointError::Malformed("unexpected extra arrays".into()));
    }

    Ok(Checkpoint {
        config,
        ids,
        params,
        opt,
        epochs_done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            max_len: 5,
            dropout: 0.2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = Parameters::init(&config, 7, 3, &mut rng);
        let mut opt = OptimizerState::new(&params);
        opt.step = 17;
        opt.m[0][3] = 0.25;
        opt.v[2][1] = 1.5;
        Checkpoint {
            config,
            ids: IdMaps {
                items: vec![900, 14, 7, 21, 5, 6, 1],
                attrs: vec![44, 2, 3],
            },
            params,
            opt: Some(opt),
            epochs_done: 9,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.ids, ckpt.ids);
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.opt.as_ref().unwrap(), ckpt.opt.as_ref().unwrap());
        assert_eq!(loaded.epochs_done, 9);

        // save(load(x)) produces identical bytes
        let path2 = dir.path().join("ckpt2.bin");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn round_trip_without_optimizer() {
        let mut ckpt = sample();
        ckpt.opt = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.opt.is_none());
        assert_eq!(loaded.params, ckpt.params);
    }

    #[test]
    fn rejects_corruption() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &ckpt).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
