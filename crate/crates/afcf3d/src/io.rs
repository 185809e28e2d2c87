//! On-disk formats: the debug tensor dump and model checkpoints.
//!
//! Tensor dump (`.t5d`): magic `T5DF`, format version `u16`, five `u32`
//! extents `(n, c, t, h, w)`, then the row-major `f32` payload. All integers
//! and floats little-endian; the header is 26 bytes.
//!
//! Checkpoint (`.ckpt`): magic `CKPT`, `u32` JSON manifest length, the
//! manifest (model configuration and one entry per array with name, shape,
//! trainable flag and element offset), then all arrays concatenated as `f32`.

use crate::encoder::Mode;
use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::optim::ParamStore;
use crate::tensor::{Shape5, Tensor5};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"T5DF";
const TENSOR_VERSION: u16 = 1;
const CKPT_MAGIC: &[u8; 4] = b"CKPT";

pub fn write_tensor(path: &Path, t: &Tensor5<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    w.write_all(TENSOR_MAGIC).at(path)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes()).at(path)?;
    for d in [t.shape.n, t.shape.c, t.shape.t, t.shape.h, t.shape.w] {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::config(format!("tensor extent {d} exceeds the format limit")))?;
        w.write_all(&d32.to_le_bytes()).at(path)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).at(path)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor5<f32>> {
    let mut r = BufReader::new(File::open(path).at(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).at(path)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::ingestion(format!(
            "{} is not a tensor dump (bad magic)",
            path.display()
        )));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).at(path)?;
    if u16::from_le_bytes(ver) != TENSOR_VERSION {
        return Err(Error::ingestion(format!(
            "{}: unsupported tensor format version",
            path.display()
        )));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).at(path)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
    shape.validate()?;
    let mut data = vec![0f32; shape.numel()];
    let mut b = [0u8; 4];
    for v in &mut data {
        r.read_exact(&mut b).at(path)?;
        *v = f32::from_le_bytes(b);
    }
    Ok(Tensor5::new(shape, data))
}

/// Serializable mirror of [`ModelConfig`] stored in the checkpoint manifest.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct StoredConfig {
    pub mode: String,
    pub image_channels: usize,
    pub widths: [usize; 5],
    pub reduce: usize,
    pub se_ratio: usize,
}

impl From<&ModelConfig> for StoredConfig {
    fn from(c: &ModelConfig) -> Self {
        StoredConfig {
            mode: c.mode.as_str().to_string(),
            image_channels: c.image_channels,
            widths: c.widths,
            reduce: c.reduce,
            se_ratio: c.se_ratio,
        }
    }
}

impl StoredConfig {
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            mode: Mode::parse(&self.mode)?,
            image_channels: self.image_channels,
            widths: self.widths,
            reduce: self.reduce,
            se_ratio: self.se_ratio,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 5],
    trainable: bool,
    /// Element (not byte) offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: StoredConfig,
    entries: Vec<ManifestEntry>,
}

/// Write every parameter and buffer (normalization running statistics
/// included; optimizer state excluded) with the model configuration.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, cfg: &ModelConfig) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, e) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: [e.shape.n, e.shape.c, e.shape.t, e.shape.h, e.shape.w],
            trainable: e.trainable,
            offset,
            len: e.value.len(),
        });
        offset += e.value.len();
    }
    let manifest = Manifest {
        config: cfg.into(),
        entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialization");
    let mut w = BufWriter::new(File::create(path).at(path)?);
    w.write_all(CKPT_MAGIC).at(path)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).at(path)?;
    w.write_all(&json).at(path)?;
    for (_, e) in store.iter() {
        for &v in &e.value {
            w.write_all(&v.to_le_bytes()).at(path)?;
        }
    }
    w.flush().at(path)?;
    Ok(())
}

/// Rebuild the parameter store and model configuration from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut r = BufReader::new(File::open(path).at(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).at(path)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::ingestion(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut lenb = [0u8; 4];
    r.read_exact(&mut lenb).at(path)?;
    let json_len = u32::from_le_bytes(lenb) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).at(path)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::ingestion(format!("{}: malformed manifest: {e}", path.display())))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).at(path)?;
    let total: usize = manifest.entries.iter().map(|e| e.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::ingestion(format!(
            "{}: payload holds {} bytes, manifest expects {}",
            path.display(),
            payload.len(),
            total * 4
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let shape = Shape5::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3], e.shape[4]);
        if shape.numel() != e.len {
            return Err(Error::ingestion(format!(
                "{}: entry {} shape/length mismatch",
                path.display(),
                e.name
            )));
        }
        let bytes = &payload[e.offset * 4..(e.offset + e.len) * 4];
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&e.name, shape, values, e.trainable);
    }
    let cfg = manifest.config.to_model_config()?;
    Ok((store, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use tempfile::tempdir;

    #[test]
    fn tensor_dump_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.t5d");
        let t = Tensor5::new(
            Shape5::new(2, 3, 1, 4, 5),
            (0..120).map(|i| i as f32 * 0.25 - 7.0).collect(),
        );
        write_tensor(&p, &t).unwrap();
        // 26-byte header plus 4 bytes per element.
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 26 + 120 * 4);
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape, t.shape);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn tensor_dump_rejects_foreign_file() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.t5d");
        std::fs::write(&p, b"PNG\x0d\x0a\x1a\x0aandmore").unwrap();
        assert!(read_tensor(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let cfg = model::ModelConfig::micro(crate::encoder::Mode::ThreeD);
        let store = model::init_params::<f32>(&cfg, 9).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &store, &cfg).unwrap();
        let (back, cfg2) = load_checkpoint(&p).unwrap();
        assert_eq!(cfg2.widths, cfg.widths);
        assert_eq!(cfg2.mode, cfg.mode);
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            store.names().collect::<Vec<_>>(),
            "insertion order preserved"
        );
        for (name, e) in store.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.shape, e.shape);
            assert_eq!(b.trainable, e.trainable);
            assert_eq!(b.value, e.value);
        }
    }

    #[test]
    fn checkpoint_saves_are_bytewise_deterministic() {
        let cfg = model::ModelConfig::micro(crate::encoder::Mode::TwoD);
        let store = model::init_params::<f32>(&cfg, 4).unwrap();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &store, &cfg).unwrap();
        save_checkpoint(&p2, &store, &cfg).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
