//! Binary checkpoint: `"TPDE"`, `u32` version, `u64` header length, a JSON
//! header, then little-endian `f32` tensor data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::netmodels::{LatentEntry, LatentTable, Model, ModelConfig, Provenance};
use crate::renderer::RenderSettings;
use crate::scenes::ClassTable;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"TPDE";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

/// Everything needed to render and edit: networks, latents and the
/// configuration they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub latents: LatentTable,
    pub train: Option<TrainConfig>,
    pub classes: ClassTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LatentInfo {
    id: String,
    provenance: Provenance,
    tensor: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    classes: ClassTable,
    latents: Vec<LatentInfo>,
    tensors: BTreeMap<String, TensorInfo>,
}

/// Header of a latents-only sidecar file.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct LatentFileHeader {
    latents: Vec<LatentInfo>,
    tensors: BTreeMap<String, TensorInfo>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Default)]
struct Payload {
    tensors: BTreeMap<String, TensorInfo>,
    bytes: Vec<u8>,
}

impl Payload {
    fn put(&mut self, name: String, t: &Tensor) {
        self.tensors.insert(
            name,
            TensorInfo {
                shape: t.shape().to_vec(),
                byte_offset: self.bytes.len() as u64,
            },
        );
        self.bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }

    fn put_latents(&mut self, table: &LatentTable) -> Vec<LatentInfo> {
        table
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let name = format!("latents.{i}");
                self.put(name.clone(), &e.w);
                LatentInfo {
                    id: e.id.clone(),
                    provenance: e.provenance,
                    tensor: name,
                }
            })
            .collect()
    }
}

fn assemble(json: Vec<u8>, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(payload);
    out
}

/// Validates the prefix and splits a container into header JSON and payload.
fn split(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < PREFIX {
        return Err(fmt_err(format!("checkpoint truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt_err("not a TPDE checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rest = (bytes.len() - PREFIX) as u64;
    if hlen > rest {
        return Err(fmt_err(format!(
            "header length {hlen} exceeds the {rest} bytes after the prefix"
        )));
    }
    let hend = PREFIX + hlen as usize;
    Ok((&bytes[PREFIX..hend], &bytes[hend..]))
}

fn read_tensor(tensors: &BTreeMap<String, TensorInfo>, payload: &[u8], name: &str) -> Result<Tensor> {
    let info = tensors
        .get(name)
        .ok_or_else(|| fmt_err(format!("checkpoint is missing tensor {name}")))?;
    let n: usize = info.shape.iter().product();
    let start = usize::try_from(info.byte_offset).map_err(|_| fmt_err("tensor offset overflow"))?;
    let end = n
        .checked_mul(4)
        .and_then(|b| start.checked_add(b))
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| fmt_err(format!("tensor {name} runs past the end of the payload")))?;
    let data = payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(info.shape.clone(), data)
}

fn read_latents(infos: &[LatentInfo], tensors: &BTreeMap<String, TensorInfo>, payload: &[u8]) -> Result<LatentTable> {
    let mut latents = LatentTable::new();
    for l in infos {
        latents.insert(LatentEntry {
            id: l.id.clone(),
            w: read_tensor(tensors, payload, &l.tensor)?,
            provenance: l.provenance,
        })?;
    }
    Ok(latents)
}

/// Writes a latents-only file in the checkpoint container format.
pub fn latents_to_bytes(table: &LatentTable) -> Result<Vec<u8>> {
    let mut p = Payload::default();
    let latents = p.put_latents(table);
    let json = serde_json::to_vec(&LatentFileHeader {
        latents,
        tensors: p.tensors,
    })?;
    Ok(assemble(json, p.bytes))
}

pub fn latents_from_bytes(bytes: &[u8]) -> Result<LatentTable> {
    let (json, payload) = split(bytes)?;
    let header: LatentFileHeader =
        serde_json::from_slice(json).map_err(|e| fmt_err(format!("latent file header: {e}")))?;
    read_latents(&header.latents, &header.tensors, payload)
}

pub fn save_latents(path: &Path, table: &LatentTable) -> Result<()> {
    std::fs::write(path, latents_to_bytes(table)?)?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<LatentTable> {
    latents_from_bytes(&std::fs::read(path)?)
}

impl Checkpoint {
    pub fn new(model: Model, latents: LatentTable) -> Self {
        Self {
            model,
            latents,
            train: None,
            classes: ClassTable::default(),
        }
    }

    /// Deterministic settings matching the training renders: same sample
    /// count and background, no jitter.
    pub fn render_settings(&self) -> RenderSettings {
        let mut s = RenderSettings::default();
        if let Some(t) = &self.train {
            s.samples_per_ray = t.samples_per_ray;
            s.background = t.background;
        }
        s.stratified = false;
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut p = Payload::default();
        for (name, t) in self.model.named_tensors() {
            p.put(name, t);
        }
        let latents = p.put_latents(&self.latents);
        let header = Header {
            model_config: self.model.config.clone(),
            train_config: self.train.clone(),
            classes: self.classes.clone(),
            latents,
            tensors: p.tensors,
        };
        Ok(assemble(serde_json::to_vec(&header)?, p.bytes))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (json, payload) = split(bytes)?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| fmt_err(format!("checkpoint header: {e}")))?;
        header.model_config.validate()?;
        let model = Model::from_named(header.model_config.clone(), |n| read_tensor(&header.tensors, payload, n))?;
        let latents = read_latents(&header.latents, &header.tensors, payload)?;
        header.classes.validate()?;
        if header.classes.len() != model.config.classes {
            return Err(fmt_err("class table size differs from the model's class count"));
        }
        Ok(Self {
            model,
            latents,
            train: header.train_config,
            classes: header.classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            latent_dim: 4,
            generator_hidden: 5,
            channels: 2,
            resolution: 3,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut latents = LatentTable::new();
        latents
            .insert(LatentEntry {
                id: "a".into(),
                w: Tensor::from_f64([4], &[0.1, -0.2, 0.3, 1e-7]).unwrap(),
                provenance: Provenance::Fitted,
            })
            .unwrap();
        Checkpoint::new(model, latents)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = small();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn bad_header_length_is_an_error() {
        let mut b = small().to_bytes().unwrap();
        b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        let e = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(e.to_string().contains("header length"), "{e}");
        let b = small().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn version_bump_names_both_versions() {
        let mut b = small().to_bytes().unwrap();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        let msg = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn latent_sidecar_roundtrip() {
        let c = small();
        let b = latents_to_bytes(&c.latents).unwrap();
        assert_eq!(latents_from_bytes(&b).unwrap(), c.latents);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn bad_magic() {
        let mut b = small().to_bytes().unwrap();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("magic"));
    }
}
