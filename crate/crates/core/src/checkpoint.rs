//! Checkpoint archives: a TOML manifest plus one little-endian `f64` blob per array.
//!
//! Blob layout: `rows: u64`, `cols: u64`, then `rows·cols` row-major `f64`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LeftError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

pub fn encode_blob(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Array2<f64>> {
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|s| s.try_into().expect("slice of eight"))
            .ok_or_else(|| LeftError::Checkpoint("truncated blob".into()))
    };
    let rows = u64::from_le_bytes(word(0)?) as usize;
    let cols = u64::from_le_bytes(word(1)?) as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| bytes.len() == 16 + 8 * n)
        .ok_or_else(|| LeftError::Checkpoint(format!("blob of {} bytes for a {rows}×{cols} array", bytes.len())))?;
    let data = (0..n).map(|i| word(2 + i).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| LeftError::Checkpoint(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    epoch: usize,
    best_validation: f64,
    stale_epochs: usize,
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    model: ModelConfig,
    train: TrainConfig,
}

/// Parameters, Adam moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_validation: f64,
    pub stale_epochs: usize,
    pub names: Vec<String>,
    pub params: Vec<Array2<f64>>,
    pub adam_m: Vec<Array2<f64>>,
    pub adam_v: Vec<Array2<f64>>,
}

fn append(builder: &mut tar::Builder<impl Write>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, path, data)?;
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            epoch: self.epoch,
            best_validation: self.best_validation,
            stale_epochs: self.stale_epochs,
            names: self.names.clone(),
            shapes: self.params.iter().map(|p| [p.nrows(), p.ncols()]).collect(),
            model: self.model.clone(),
            train: self.train.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| LeftError::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("partial");
        {
            let mut builder = tar::Builder::new(BufWriter::new(File::create(&tmp)?));
            append(&mut builder, MANIFEST, text.as_bytes())?;
            for (i, name) in self.names.iter().enumerate() {
                append(&mut builder, &format!("params/{name}.bin"), &encode_blob(&self.params[i]))?;
                append(&mut builder, &format!("adam_m/{name}.bin"), &encode_blob(&self.adam_m[i]))?;
                append(&mut builder, &format!("adam_v/{name}.bin"), &encode_blob(&self.adam_v[i]))?;
            }
            builder.into_inner()?.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| LeftError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut archive = tar::Archive::new(BufReader::new(file));
        let mut manifest: Option<Manifest> = None;
        let mut blobs = std::collections::HashMap::new();
        for entry in archive.entries()? {
            let mut entry = entry?;
            let name = entry.path()?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data)?;
            if name == MANIFEST {
                let text = String::from_utf8(data).map_err(|e| LeftError::Checkpoint(e.to_string()))?;
                manifest = Some(toml::from_str(&text).map_err(|e| LeftError::Checkpoint(e.to_string()))?);
            } else {
                blobs.insert(name, data);
            }
        }
        let m = manifest.ok_or_else(|| LeftError::Checkpoint(format!("{} has no manifest", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(LeftError::Checkpoint(format!("format version {} (expected {FORMAT_VERSION})", m.format_version)));
        }
        let mut take = |dir: &str, name: &str, shape: [usize; 2]| -> Result<Array2<f64>> {
            let key = format!("{dir}/{name}.bin");
            let bytes = blobs.remove(&key).ok_or_else(|| LeftError::Checkpoint(format!("missing {key}")))?;
            let a = decode_blob(&bytes)?;
            if a.dim() != (shape[0], shape[1]) {
                return Err(LeftError::Checkpoint(format!("{key} has shape {:?}, manifest says {shape:?}", a.dim())));
            }
            Ok(a)
        };
        let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
        for (name, &shape) in m.names.iter().zip(&m.shapes) {
            params.push(take("params", name, shape)?);
            adam_m.push(take("adam_m", name, shape)?);
            adam_v.push(take("adam_v", name, shape)?);
        }
        Ok(Self {
            model: m.model,
            train: m.train,
            step: m.step,
            epoch: m.epoch,
            best_validation: m.best_validation,
            stale_epochs: m.stale_epochs,
            names: m.names,
            params,
            adam_m,
            adam_v,
        })
    }
}
