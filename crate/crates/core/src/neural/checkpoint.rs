//! Binary checkpoint: `b"DGF1"`, a little-endian `u32` byte length followed by
//! the UTF-8 JSON architecture descriptor, then every parameter as a
//! little-endian `f32` in layout order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Architecture, Denoiser};
use super::params::{ParamVector, TensorSpec};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DGF1";

#[derive(Serialize, Deserialize)]
struct Descriptor {
    architecture: Architecture,
    layout: Vec<TensorSpec>,
}

pub fn write_checkpoint<W: Write>(model: &Denoiser, mut w: W) -> Result<()> {
    let desc = Descriptor {
        architecture: model.arch().clone(),
        layout: model.params().layout().to_vec(),
    };
    let json = serde_json::to_vec(&desc)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in model.params().values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Denoiser> {
    let bad = |reason: &str| Error::Checkpoint {
        path: Default::default(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let desc: Descriptor = serde_json::from_slice(&json)?;
    if desc.layout != desc.architecture.layout() {
        return Err(bad("layout does not match architecture"));
    }
    let n: usize = desc.layout.iter().map(TensorSpec::numel).sum();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = ParamVector::from_values(desc.layout, values)?;
    Denoiser::from_params(desc.architecture, params)
}

pub fn save_checkpoint(model: &Denoiser, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
    read_checkpoint(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}
