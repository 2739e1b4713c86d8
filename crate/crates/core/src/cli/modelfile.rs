//! Versioned binary model file.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then one
//! section per parameter tensor in header order. Each section is a u64 LE
//! byte length followed by little-endian f64 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationVariant, Model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"MMREC\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub d: usize,
    pub variant: AblationVariant,
    pub seeds: Seeds,
    pub config: ModelConfig,
    pub sections: Vec<SectionEntry>,
}

pub fn encode(model: &Model, seeds: Seeds) -> Result<Vec<u8>> {
    let tensors = model.params().tensors();
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        d: model.config().d,
        variant: model.variant(),
        seeds,
        config: model.config().clone(),
        sections: tensors
            .iter()
            .map(|(name, t)| SectionEntry {
                name: (*name).to_string(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::ModelFile(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (model.params().len() + tensors.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        out.extend_from_slice(&((t.len() * 8) as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u64(r: &mut &[u8], what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::ModelFile(format!("truncated {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn decode(bytes: &[u8]) -> Result<(Model, ModelHeader)> {
    let mut r = bytes;
    if r.len() < 8 || &r[..8] != MAGIC {
        return Err(Error::ModelFile("not a model file (bad magic)".into()));
    }
    r = &r[8..];
    let header_len = read_u64(&mut r, "header length")? as usize;
    if r.len() < header_len {
        return Err(Error::ModelFile("truncated header".into()));
    }
    let header: ModelHeader = serde_json::from_slice(&r[..header_len])
        .map_err(|e| Error::ModelFile(format!("bad header: {e}")))?;
    r = &r[header_len..];
    if header.format_version != FORMAT_VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    let mut params = ModelParams::zeros(&header.config);
    {
        let mut tensors = params.tensors_mut();
        if tensors.len() != header.sections.len() {
            return Err(Error::ModelFile(format!(
                "{} sections in header, model needs {}",
                header.sections.len(),
                tensors.len()
            )));
        }
        for ((name, t), entry) in tensors.iter_mut().zip(&header.sections) {
            if *name != entry.name || t.len() != entry.len {
                return Err(Error::ModelFile(format!(
                    "section {} ({} values) does not match {name} ({} values)",
                    entry.name,
                    entry.len,
                    t.len()
                )));
            }
            let bytes = read_u64(&mut r, "section length")? as usize;
            if bytes != entry.len * 8 || r.len() < bytes {
                return Err(Error::ModelFile(format!("section {name} has a bad length")));
            }
            for (v, chunk) in t.iter_mut().zip(r[..bytes].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            r = &r[bytes..];
        }
    }
    if !r.is_empty() {
        return Err(Error::ModelFile(format!("{} trailing bytes", r.len())));
    }
    let model = Model::from_parts(header.config.clone(), params)?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, seeds: Seeds) -> Result<()> {
    let bytes = encode(model, seeds)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, ModelHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
