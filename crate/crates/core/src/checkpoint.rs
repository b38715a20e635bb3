//! `TSSL1` tensor container used for checkpoints and optimizer state.
//!
//! Layout: the 5-byte magic `TSSL1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f32` in name
//! order. The header lists each tensor's name, shape and element offset.
//! Encoding is canonical, so save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{write_atomic, NormStats};
use crate::error::{Error, Result};
use crate::geometry::SetName;
use crate::models::{
    attach_pretext_head, attach_probe_head, build_backbone, Backbone, BackboneSpec, HeadKind, Model,
};
use crate::nn::{NamedSlots, Tensor};

pub const MAGIC: &[u8; 5] = b"TSSL1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A decoded container: a kind tag, free-form metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: &impl Serialize, tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let meta = serde_json::to_value(meta).map_err(|e| Error::invalid(format!("unserializable metadata: {e}")))?;
        Ok(Self {
            kind: kind.into(),
            meta,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header is plain JSON");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes `bytes`; `path` only labels errors.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing TSSL1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body = 13usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[13..body]).map_err(|e| bad(format!("bad header: {e}")))?;
        let data = &bytes[body..];
        if data.len() % 4 != 0 {
            return Err(bad("tensor payload is not a whole number of f32 values".into()));
        }
        let total = data.len() / 4;
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n > total {
                return Err(bad(format!("tensor '{}' has an inconsistent offset", e.name)));
            }
            let values = data[e.offset * 4..(e.offset + n) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset += n;
            if tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, values)).is_some() {
                return Err(bad(format!("duplicate tensor '{}'", e.name)));
            }
        }
        if expected_offset != total {
            return Err(bad("trailing bytes after the last tensor".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn meta_as<M: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("unexpected {} metadata: {e}", self.kind),
        })
    }
}

/// Copies every slot value into a tensor map.
pub fn collect_tensors(slots: &NamedSlots<'_, f32>) -> BTreeMap<String, Tensor<f32>> {
    slots.iter().map(|(n, s)| (n.clone(), s.value().clone())).collect()
}

/// Overwrites slot values from `tensors`. Every slot must be present with
/// a matching shape.
pub fn assign_tensors(
    slots: &mut NamedSlots<'_, f32>,
    tensors: &BTreeMap<String, Tensor<f32>>,
    path: &Path,
) -> Result<()> {
    for (name, slot) in slots.iter_mut() {
        let src = tensors.get(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing tensor '{name}'"),
        })?;
        if src.shape() != slot.value().shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "tensor '{name}' has shape {:?}, the architecture expects {:?}",
                    src.shape(),
                    slot.value().shape()
                ),
            });
        }
        slot.value_mut().data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub transform_set: SetName,
    pub epochs_completed: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub config_hash: String,
    pub producer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: BackboneSpec,
    pub head: Option<HeadKind>,
    pub norm: NormStats,
    pub provenance: Provenance,
}

/// Model weights, batch-norm statistics and the metadata needed to rebuild
/// the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn from_model(model: &mut Model<f32>, norm: NormStats, provenance: Provenance) -> Self {
        let meta = CheckpointMeta {
            spec: *model.spec(),
            head: Some(model.head_kind()),
            norm,
            provenance,
        };
        Self {
            meta,
            tensors: collect_tensors(&model.slots()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Container::new(CHECKPOINT_KIND, &self.meta, self.tensors.clone())
            .expect("checkpoint metadata serializes")
            .to_bytes()
    }

    pub fn from_container(path: &Path, c: Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected a checkpoint, found '{}'", c.kind),
            });
        }
        let meta: CheckpointMeta = c.meta_as(path)?;
        meta.spec.validate()?;
        Ok(Self {
            meta,
            tensors: c.tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_container(path, Container::load(path)?)
    }

    /// The same checkpoint with every head tensor dropped.
    pub fn backbone_only(&self) -> Self {
        let mut meta = self.meta.clone();
        meta.head = None;
        Self {
            meta,
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with("backbone."))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Replaces the backbone tensors with those of `backbone`.
    pub fn with_backbone(&self, backbone: &mut Backbone<f32>) -> Self {
        let mut slots = Vec::new();
        backbone.visit(&mut slots);
        let mut out = self.clone();
        out.tensors.extend(collect_tensors(&slots));
        out
    }

    /// Rebuilds the backbone and loads its weights. Names and shapes must
    /// match the architecture exactly.
    pub fn restore_backbone(&self, path: &Path) -> Result<Backbone<f32>> {
        let mut backbone = build_backbone::<f32>(self.meta.spec, 0)?;
        let mut slots = Vec::new();
        backbone.visit(&mut slots);
        let expected = slots.len();
        assign_tensors(&mut slots, &self.tensors, path)?;
        let stored = self.tensors.keys().filter(|n| n.starts_with("backbone.")).count();
        if stored != expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "checkpoint holds {stored} backbone tensors, {} expects {expected}",
                    self.meta.spec
                ),
            });
        }
        Ok(backbone)
    }

    /// Rebuilds the full model including its head.
    pub fn restore_model(&self, path: &Path) -> Result<Model<f32>> {
        let backbone = self.restore_backbone(path)?;
        let mut model = match self.meta.head {
            Some(HeadKind::Pretext { k }) => attach_pretext_head(backbone, k, 0)?,
            Some(HeadKind::Probe { classes }) => attach_probe_head(backbone, classes, 0)?,
            None => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: "checkpoint has no head".into(),
                })
            }
        };
        let mut slots = model.slots();
        if slots.len() != self.tensors.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("checkpoint holds {} tensors, model expects {}", self.tensors.len(), slots.len()),
            });
        }
        assign_tensors(&mut slots, &self.tensors, path)?;
        drop(slots);
        Ok(model)
    }
}
