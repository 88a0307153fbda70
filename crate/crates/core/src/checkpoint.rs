//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` metadata length, JSON
//! metadata, then each parameter's values as little-endian `f32` or `f64`
//! in metadata order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::model::{StageRecord, Tagger, Vocabularies};
use crate::numerics::{Precision, TrainingConfig};

pub const MAGIC: &[u8; 8] = b"DEIDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub config: TrainingConfig,
    pub head: HeadConfig,
    pub labels: Vec<String>,
    pub vocab: Vocabularies,
    pub domains: Vec<String>,
    pub history: Vec<StageRecord>,
    params: Vec<ParamEntry>,
}

pub fn to_bytes(tagger: &Tagger) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: tagger.config.clone(),
        head: tagger.head,
        labels: tagger.labels.phi_types().to_vec(),
        vocab: tagger.vocab.clone(),
        domains: tagger.domains.clone(),
        history: tagger.history.clone(),
        params: tagger.store.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * tagger.store.num_scalars() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in tagger.store.iter() {
        for &v in &p.values {
            match tagger.config.precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tagger> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(Error::Checkpoint("truncated metadata".into()));
    }
    let meta: Metadata = serde_json::from_slice(&r[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    r = &r[len..];

    let mut tagger = Tagger::new(
        meta.config.clone(),
        meta.head,
        LabelSet::new(meta.labels.iter().cloned()),
        meta.vocab,
        meta.domains,
    )?;
    tagger.history = meta.history;
    if meta.params.len() != tagger.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            meta.params.len(),
            tagger.store.len()
        )));
    }
    let width = match meta.config.precision {
        Precision::F64 => 8,
        Precision::F32 => 4,
    };
    for (entry, p) in meta.params.iter().zip(tagger.store.iter_mut()) {
        if entry.name != p.name || entry.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: stored {:?}, expected {} {:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
        }
        let need = p.values.len() * width;
        if r.len() < need {
            return Err(Error::Checkpoint(format!("truncated values for {}", p.name)));
        }
        for (v, chunk) in p.values.iter_mut().zip(r[..need].chunks_exact(width)) {
            *v = match width {
                8 => f64::from_le_bytes(chunk.try_into().unwrap()),
                _ => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            };
        }
        r = &r[need..];
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(tagger)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated header".into()))
}

pub fn save(tagger: &Tagger, path: &Path) -> Result<()> {
    let bytes = to_bytes(tagger)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tagger> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the metadata block.
pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
    serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn tagger(precision: Precision) -> Tagger {
        let mut d = Document {
            id: "a".into(),
            note_type: "n".into(),
            domain: "x".into(),
            domain_id: 0,
            text: "Jane Doe called".into(),
            annotations: vec![],
        };
        d.validate().unwrap();
        let config = TrainingConfig { word_emb_dim: 4, char_emb_dim: 3, char_hidden: 2, token_hidden: 3, precision, ..Default::default() };
        Tagger::new(config, HeadConfig::jdl(), LabelSet::harmonized(), Vocabularies::build([&d]), vec!["x".into(), "y".into()]).unwrap()
    }

    #[test]
    fn round_trip_f64_is_exact() {
        let t = tagger(Precision::F64);
        let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
        assert_eq!(back.store, t.store);
        assert_eq!(back.vocab, t.vocab);
        assert_eq!(back.domains, t.domains);
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&t).unwrap());
    }

    #[test]
    fn f32_storage_rounds() {
        let t = tagger(Precision::F32);
        let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
        for (a, b) in back.store.iter().zip(t.store.iter()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn version_and_shape_mismatch_rejected() {
        let t = tagger(Precision::F64);
        let mut bytes = to_bytes(&t).unwrap();
        bytes[8] = 9;
        assert!(from_bytes(&bytes).unwrap_err().to_string().contains("version"));

        let bytes = to_bytes(&t).unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
        let tampered = json.replacen("\"shape\":[17,6]", "\"shape\":[6,17]", 1);
        assert_ne!(tampered, json);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[20 + len..]);
        assert!(from_bytes(&out).unwrap_err().to_string().contains("shape mismatch"));
    }
}
