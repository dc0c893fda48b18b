//! Binary checkpoint container.
//!
//! Layout: `TAONET` magic, `u32` LE format version, `u8` component tag,
//! `u32` LE manifest length, JSON manifest (tensor names and shapes plus free
//! metadata), `u64` LE value count, then every tensor as `f32` LE in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

const MAGIC: &[u8; 6] = b"TAONET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Detector,
    Classifier,
}

impl Component {
    fn tag(self) -> u8 {
        match self {
            Component::Detector => 1,
            Component::Classifier => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, NnError> {
        match tag {
            1 => Ok(Component::Detector),
            2 => Ok(Component::Classifier),
            other => Err(NnError::CorruptPayload(format!("unknown component tag {other}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    pub tensors: Vec<Tensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(component: Component, tensors: Vec<Tensor>, metadata: serde_json::Value) -> Self {
        Self { component, tensors, metadata }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            tensors: self.tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let count: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 17 + json.len() + 4 * count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.component.tag());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for t in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(NnError::CorruptPayload("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(NnError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let component = Component::from_tag(r.take(1)?[0])?;
        let manifest_len = u32::from_le_bytes(r.array()?) as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(manifest_len)?)
            .map_err(|e| NnError::CorruptPayload(format!("manifest: {e}")))?;
        let count = u64::from_le_bytes(r.array()?) as usize;
        let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if count != expected {
            return Err(NnError::CorruptPayload(format!("payload holds {count} values, manifest needs {expected}")));
        }
        if r.remaining() != 4 * count {
            return Err(NnError::CorruptPayload(format!(
                "payload is {} bytes, expected {}",
                r.remaining(),
                4 * count
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from(f32::from_le_bytes(r.array()?)));
            }
            tensors.push(Tensor { name: entry.name, shape: entry.shape, data });
        }
        Ok(Self { component, tensors, metadata: manifest.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::CorruptPayload("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], NnError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LstmParams, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lstm = LstmParams::init(3, 2, &mut rng);
        Checkpoint::new(
            Component::Detector,
            lstm.tensors().into_iter().cloned().collect(),
            json!({"mu": [0.1, -2.5e-7], "k": 3}),
        )
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[6..10].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(NnError::VersionMismatch { found: 7, expected: FORMAT_VERSION })
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample().to_bytes();
        for cut in [3, 12, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(NnError::CorruptPayload(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(NnError::CorruptPayload(_))));
    }

    #[test]
    fn bad_magic_and_tag() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(NnError::CorruptPayload(_))));
        let mut bytes = sample().to_bytes();
        bytes[10] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(NnError::CorruptPayload(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/detector.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
