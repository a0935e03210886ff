//! Checkpoint container: a JSON manifest followed by a little-endian `f32`
//! blob.
//!
//! ```text
//! b"FGCKPT01" | manifest length (u64 LE) | manifest JSON | blob
//! ```
//!
//! The manifest lists every tensor with its shape, dtype, role and byte
//! offset into the blob. Roles are written out so that checkpoint surgery
//! can run on files without constructing a backend.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParameterRole, ParameterSnapshot, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FGCKPT01";
const FORMAT: &str = "forgedit-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: ParameterRole,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl ParameterSnapshot {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.len());
        let mut offset = 0;
        for (name, tensor, role) in self.iter() {
            tensors.push(TensorEntry {
                name: name.to_owned(),
                shape: tensor.shape.clone(),
                dtype: "f32".into(),
                role,
                offset,
            });
            offset += tensor.len() * 4;
        }
        let manifest = serde_json::to_vec(&Manifest {
            format: FORMAT.into(),
            version: 1,
            tensors,
        })
        .expect("manifest serializes");

        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, tensor, _) in self.iter() {
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::contract("not a checkpoint"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::contract("truncated checkpoint manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
        if manifest.format != FORMAT || manifest.version != 1 {
            return Err(Error::contract(format!(
                "unsupported checkpoint format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let blob = &bytes[manifest_end..];

        let mut entries = BTreeMap::new();
        let mut roles = BTreeMap::new();
        let mut expected_offset = 0;
        for entry in manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::contract(format!("unsupported dtype {}", entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            if entry.offset != expected_offset || entry.offset + count * 4 > blob.len() {
                return Err(Error::contract(format!("bad blob range for {}", entry.name)));
            }
            let data = blob[entry.offset..entry.offset + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset += count * 4;
            roles.insert(entry.name.clone(), entry.role);
            if entries.insert(entry.name.clone(), Tensor::new(entry.shape, data)?).is_some() {
                return Err(Error::contract(format!("duplicate tensor {}", entry.name)));
            }
        }
        if expected_offset != blob.len() {
            return Err(Error::contract("checkpoint blob has trailing bytes"));
        }
        ParameterSnapshot::new(entries, roles)
    }
}

pub fn save_checkpoint_file(snapshot: &ParameterSnapshot, path: &Path) -> Result<()> {
    crate::store::write_atomic(path, &snapshot.to_checkpoint_bytes())
}

pub fn load_checkpoint_file(path: &Path) -> Result<ParameterSnapshot> {
    ParameterSnapshot::from_checkpoint_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LayerKind, Region};
    use proptest::prelude::*;

    fn snapshot_from(values: Vec<Vec<f32>>) -> ParameterSnapshot {
        let mut entries = BTreeMap::new();
        for (i, v) in values.into_iter().enumerate() {
            let name = match i % 3 {
                0 => format!("encoder.{i}.conv.weight"),
                1 => format!("decoder.{i}.selfattn.q"),
                _ => format!("middle.crossattn.k{i}"),
            };
            let n = v.len();
            entries.insert(name, Tensor::new(vec![n], v).unwrap());
        }
        ParameterSnapshot::from_named(entries).unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), 0..20), 1..6)
        ) {
            let snap = snapshot_from(values);
            let bytes = snap.to_checkpoint_bytes();
            let back = ParameterSnapshot::from_checkpoint_bytes(&bytes).unwrap();
            prop_assert!(back.bits_eq(&snap));
            prop_assert_eq!(back.to_checkpoint_bytes(), bytes);
        }
    }

    #[test]
    fn manifest_records_roles_and_offsets() {
        let snap = snapshot_from(vec![vec![1.0; 3], vec![2.0; 2]]);
        let bytes = snap.to_checkpoint_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let tensors = manifest["tensors"].as_array().unwrap();
        assert_eq!(tensors[0]["name"], "decoder.1.selfattn.q");
        assert_eq!(tensors[0]["offset"], 0);
        assert_eq!(tensors[1]["offset"], 8);
        assert_eq!(tensors[1]["dtype"], "f32");
        let role: ParameterRole = serde_json::from_value(tensors[1]["role"].clone()).unwrap();
        assert_eq!(role, ParameterRole::new(Region::Encoder, LayerKind::Other));
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let snap = snapshot_from(vec![vec![1.0; 3]]);
        let bytes = snap.to_checkpoint_bytes();
        assert!(ParameterSnapshot::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParameterSnapshot::from_checkpoint_bytes(b"FGCKPT01").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParameterSnapshot::from_checkpoint_bytes(&extra).is_err());
    }
}
