//! Layout: magic, u32 config length, config JSON, u32 manifest length,
//! manifest JSON (`[{name, shape, offset}]`, offsets in floats), then all
//! parameter values as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRSTCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_blob(w, &serde_json::to_vec(&model.config)?)?;
    let mut offset = 0;
    let manifest: Vec<Entry> = model
        .params
        .iter()
        .map(|(_, p)| {
            let e = Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    write_blob(w, &serde_json::to_vec(&manifest)?)?;
    let mut data = Vec::with_capacity(offset * 4);
    for (_, p) in model.params.iter() {
        for &v in p.value.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&data)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&read_blob(r)?)?;
    let manifest: Vec<Entry> = serde_json::from_slice(&read_blob(r)?)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::Format("checkpoint data is not a whole number of floats".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut model = Model::new(config, 0)?;
    if manifest.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, config implies {}",
            manifest.len(),
            model.params.len()
        )));
    }
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let Some(slice) = values.get(e.offset..e.offset + n) else {
            return Err(Error::Format(format!("{}: data out of range", e.name)));
        };
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter {}", e.name)))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("{}: shape mismatch", e.name)));
        }
        p.value = Tensor::new(e.shape, slice.to_vec())?;
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
