//! Binary checkpoint format.
//!
//! Layout: magic `TWN2`, format version `u32`, tensor count `u32`; per
//! tensor: name length `u16` + UTF-8 name, dtype code `u8` (0 = f32), rank
//! `u8`, extents as `u32` each, raw little-endian values; then a
//! length-prefixed (`u32`) JSON metadata block. Save/load round-trips are
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{Network, NetworkSpec};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::tensor::rng::Rng;

pub const MAGIC: &[u8; 4] = b"TWN2";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Per-channel input normalization computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// JSON metadata stored after the tensor table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkSpec,
    pub data: Option<DatasetSpec>,
    pub normalization: Normalization,
    /// Training-stream PRNG state as four hex words.
    pub rng_state: [String; 4],
    pub seed: u64,
    pub epoch: usize,
    pub test_accuracy: f64,
}

impl CheckpointMeta {
    pub fn rng(&self) -> Result<Rng> {
        let mut state = [0u64; 4];
        for (slot, hex) in state.iter_mut().zip(&self.rng_state) {
            *slot = u64::from_str_radix(hex, 16)
                .map_err(|_| Error::Format(format!("bad rng state word '{hex}'")))?;
        }
        Ok(Rng::from_state(state))
    }

    pub fn encode_rng(rng: &Rng) -> [String; 4] {
        let s = rng.state();
        [
            format!("{:016x}", s[0]),
            format!("{:016x}", s[1]),
            format!("{:016x}", s[2]),
            format!("{:016x}", s[3]),
        ]
    }
}

/// A named-tensor bundle plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// `(name, shape, values)` in a fixed serialization order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Snapshots a network's parameters and buffers (deep copies), plus any
    /// extra named tensors such as optimizer state.
    pub fn from_network(
        net: &Network<f32>,
        extra: Vec<(String, Vec<usize>, Vec<f32>)>,
        meta: CheckpointMeta,
    ) -> Self {
        let mut tensors = Vec::new();
        net.visit_params(&mut |name, tensor, _| {
            tensors.push((name.to_string(), tensor.shape().to_vec(), tensor.data().clone()));
        });
        for (name, tensor) in net.buffers() {
            tensors.push((name, tensor.shape().to_vec(), tensor.data().clone()));
        }
        tensors.extend(extra);
        Checkpoint { tensors, meta }
    }

    /// Writes parameters and buffers back into a built network. Optimizer
    /// tensors (`optim.` prefix) are ignored here; missing or misshaped
    /// model tensors are errors.
    pub fn apply_to_network(&self, net: &Network<f32>) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, (&Vec<usize>, &Vec<f32>)> = self
            .tensors
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s, v)))
            .collect();
        let mut missing = Vec::new();
        let mut assign = |name: &str, tensor: &crate::tensor::Tensor<f32>| {
            match by_name.get(name) {
                Some((shape, values)) if shape.as_slice() == tensor.shape() => {
                    tensor.data_mut().copy_from_slice(values);
                }
                Some((shape, _)) => missing.push(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    shape,
                    tensor.shape()
                )),
                None => missing.push(format!("{name}: absent")),
            }
        };
        net.visit_params(&mut |name, tensor, _| assign(name, tensor));
        for (name, tensor) in net.buffers() {
            assign(&name, &tensor);
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "checkpoint does not match network: {}",
                missing.join("; ")
            )))
        }
    }

    /// Extra tensors under a prefix, e.g. optimizer velocities.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().filter(|(n, _, _)| n.starts_with(prefix)).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, shape, values) in &self.tensors {
            let name_bytes = name.as_bytes();
            let name_len = u16::try_from(name_bytes.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(DTYPE_F32);
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::Format("rank too large".into()))?;
            out.push(rank);
            let numel: usize = shape.iter().product();
            if numel != values.len() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} vs {} values",
                    shape,
                    values.len()
                )));
            }
            for &extent in shape {
                let e = u32::try_from(extent)
                    .map_err(|_| Error::Format("extent too large".into()))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
        let meta_len =
            u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("unsupported dtype code {dtype}")));
            }
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, values));
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)
            .map_err(|e| Error::Format(format!("metadata decode: {e}")))?;
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path)?)
    }

    /// Rebuilds the stored network and loads its weights.
    pub fn build_network(&self) -> Result<Network<f32>> {
        let net = crate::arch::build_network::<f32>(&self.meta.network, self.meta.seed)?;
        self.apply_to_network(&net)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, preset};

    fn meta_for(spec: &NetworkSpec) -> CheckpointMeta {
        CheckpointMeta {
            network: spec.clone(),
            data: None,
            normalization: Normalization::default(),
            rng_state: CheckpointMeta::encode_rng(&Rng::new(1)),
            seed: 1,
            epoch: 0,
            test_accuracy: 0.0,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let spec = preset("twistnet-micro", 8).unwrap();
        let net = build_network::<f32>(&spec, 11).unwrap();
        let ckpt = Checkpoint::from_network(&net, Vec::new(), meta_for(&spec));
        let bytes = ckpt.encode().unwrap();
        let reloaded = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(bytes, reloaded.encode().unwrap());
    }

    #[test]
    fn roundtrip_restores_all_values() {
        let spec = preset("twistnet-micro", 8).unwrap();
        let net = build_network::<f32>(&spec, 11).unwrap();
        let ckpt = Checkpoint::from_network(&net, Vec::new(), meta_for(&spec));
        let restored = Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
        let net2 = restored.build_network().unwrap();
        let p1 = net.parameters();
        let p2 = net2.parameters();
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(*a.tensor.data(), *b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn unknown_version_is_refused() {
        let spec = preset("resnet-micro", 8).unwrap();
        let net = build_network::<f32>(&spec, 2).unwrap();
        let ckpt = Checkpoint::from_network(&net, Vec::new(), meta_for(&spec));
        let mut bytes = ckpt.encode().unwrap();
        bytes[4] = 99; // version word
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let micro = preset("twistnet-micro", 8).unwrap();
        let net = build_network::<f32>(&micro, 3).unwrap();
        let ckpt = Checkpoint::from_network(&net, Vec::new(), meta_for(&micro));
        // Same layer names, different widths: every assignment must be
        // reported as a shape mismatch.
        let wide = preset("twistnet18", 8).unwrap();
        let target = build_network::<f32>(&wide, 3).unwrap();
        let err = ckpt.apply_to_network(&target).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let micro = preset("resnet-micro", 8).unwrap();
        let net = build_network::<f32>(&micro, 3).unwrap();
        let mut ckpt = Checkpoint::from_network(&net, Vec::new(), meta_for(&micro));
        ckpt.tensors.retain(|(n, _, _)| n != "fc.weight");
        let err = ckpt.apply_to_network(&net).unwrap_err();
        assert!(err.to_string().contains("fc.weight"), "{err}");
    }

    #[test]
    fn rng_state_roundtrips_through_hex() {
        let mut rng = Rng::new(77);
        rng.next_u64();
        let words = CheckpointMeta::encode_rng(&rng);
        let spec = preset("resnet-micro", 8).unwrap();
        let mut meta = meta_for(&spec);
        meta.rng_state = words;
        let mut restored = meta.rng().unwrap();
        let mut original = rng.clone();
        assert_eq!(original.next_u64(), restored.next_u64());
    }
}
