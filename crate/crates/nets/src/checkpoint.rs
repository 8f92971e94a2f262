//! Self-describing checkpoint files.
//!
//! Layout: the magic line `DCR-CKPT-1\n`, a little-endian `u32` header
//! length, a JSON header, then every tensor as raw little-endian floats of
//! the recorded scalar width, at the byte offsets listed in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use dcr_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8] = b"DCR-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: String,
    pub num_classes: usize,
    pub config: ModelConfig,
    pub seed: u64,
    pub scalar: String,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn width(scalar: &str) -> Result<usize> {
    match scalar {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(NetError::Checkpoint(format!("unsupported scalar '{other}'"))),
    }
}

fn encode<T: Scalar>(values: &[T], out: &mut Vec<u8>) {
    for &v in values {
        match T::NAME {
            "f32" => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
}

fn decode<T: Scalar>(bytes: &[u8], scalar: &str) -> Vec<T> {
    match scalar {
        "f32" => bytes.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        _ => bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
    }
}

/// Writes `model` atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, seed: u64, meta: serde_json::Value) -> Result<()> {
    let w = width(T::NAME)?;
    let mut data = Vec::with_capacity((model.num_params() + 1024) * w);
    let mut tensors = Vec::new();
    for e in model.layout() {
        tensors.push(TensorRecord { name: e.name.clone(), shape: e.shape.clone(), offset: data.len() });
        encode(&model.params()[e.offset..e.offset + e.len], &mut data);
    }
    for (j, (m, v)) in model.running_stats().iter().enumerate() {
        let name = model.unit_name(j + 1);
        tensors.push(TensorRecord {
            name: format!("{name}.bn.running_mean"),
            shape: vec![m.len()],
            offset: data.len(),
        });
        encode(m, &mut data);
        tensors.push(TensorRecord { name: format!("{name}.bn.running_var"), shape: vec![v.len()], offset: data.len() });
        encode(v, &mut data);
    }
    let header = CheckpointHeader {
        format: "DCR-CKPT-1".into(),
        architecture: model.config().architecture.name(),
        num_classes: model.config().num_classes,
        config: model.config().clone(),
        seed,
        scalar: T::NAME.into(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(json.len() as u32).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let rest =
        bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| NetError::Checkpoint("missing DCR-CKPT-1 magic".into()))?;
    if rest.len() < 4 {
        return Err(NetError::Checkpoint("truncated header length".into()));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let json = rest.get(4..4 + len).ok_or_else(|| NetError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    if header.format != "DCR-CKPT-1" {
        return Err(NetError::Checkpoint(format!("unsupported format '{}'", header.format)));
    }
    Ok((header, &rest[4 + len..]))
}

/// Loads a checkpoint into a model of scalar type `T`, converting widths if needed.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let (header, data) = read_header(&bytes)?;
    let w = width(&header.scalar)?;
    let mut model = Model::<T>::new(header.config.clone(), header.seed)?;
    let fetch = |name: &str, len: usize| -> Result<Vec<T>> {
        let rec = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NetError::Checkpoint(format!("tensor '{name}' missing")))?;
        if rec.shape.iter().product::<usize>() != len {
            return Err(NetError::Checkpoint(format!("tensor '{name}' has shape {:?}", rec.shape)));
        }
        let raw = data
            .get(rec.offset..rec.offset + len * w)
            .ok_or_else(|| NetError::Checkpoint(format!("tensor '{name}' runs past the end of the file")))?;
        Ok(decode(raw, &header.scalar))
    };
    let mut params = vec![T::zero(); model.num_params()];
    for e in model.layout().to_vec() {
        params[e.offset..e.offset + e.len].copy_from_slice(&fetch(&e.name, e.len)?);
    }
    model.set_params(params)?;
    let mut running = Vec::new();
    for j in 1..=model.num_units() {
        let c = model.unit_shape(j)[0];
        let name = model.unit_name(j).to_string();
        running.push((fetch(&format!("{name}.bn.running_mean"), c)?, fetch(&format!("{name}.bn.running_var"), c)?));
    }
    model.set_running_stats(running)?;
    Ok((model, header))
}
