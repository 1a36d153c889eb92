//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version and `u64` header length (both
//! little-endian), a JSON header, then every tensor as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLAMPCK\0";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<f32>>,
    pub second: BTreeMap<String, Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub optimizer: Option<OptimizerState>,
    pub global_step: u64,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    global_step: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<Entry>,
    metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        model: &Model<T>,
        optimizer: Option<OptimizerState>,
        global_step: u64,
        metadata: serde_json::Value,
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.cast()))
            .collect();
        Self {
            config: model.config.clone(),
            params,
            optimizer,
            global_step,
            metadata,
        }
    }

    /// Rebuilds the model, rejecting missing or mis-shaped parameters.
    pub fn build_model<T: Real>(&self) -> Result<Model<T>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(self.config.clone(), &mut rng)?;
        let cast = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect();
        model.params.load_named(&cast)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, group: Group, t: &Tensor<f32>| {
            tensors.push(Entry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.params {
            push(name, Group::Param, t);
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in &opt.first {
                push(name, Group::AdamFirst, t);
            }
            for (name, t) in &opt.second {
                push(name, Group::AdamSecond, t);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            global_step: self.global_step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Length {
                expected: 20 + hlen,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "header declares format version {}",
                header.format_version
            )));
        }
        let mut blob = &body[hlen..];
        let mut params = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(Error::Length {
                    expected: 4 * n,
                    found: blob.len(),
                });
            }
            let data = blob[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blob = &blob[4 * n..];
            let t = Tensor::new(&e.shape, data)?;
            match e.group {
                Group::Param => params.insert(e.name, t),
                Group::AdamFirst => first.insert(e.name, t),
                Group::AdamSecond => second.insert(e.name, t),
            };
        }
        if !blob.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", blob.len())));
        }
        let optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            first,
            second,
        });
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            global_step: header.global_step,
            metadata: header.metadata,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized parameters and configuration.
    pub fn content_hash(&self) -> Result<String> {
        let stripped = Self {
            optimizer: None,
            metadata: serde_json::Value::Null,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(stripped.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Model<f32>, Checkpoint) {
        let m = Model::<f32>::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let opt = crate::rollout::Adam::new(Default::default(), &m.params).export(&m.params);
        let ck = Checkpoint::from_model(&m, Some(opt), 17, serde_json::json!({"seed": 3}));
        (m, ck)
    }

    #[test]
    fn bytes_round_trip() {
        let (m, ck) = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt: Model<f32> = back.build_model().unwrap();
        for (id, _, t) in m.params.iter() {
            assert_eq!(rebuilt.params.get(id), t);
        }
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let (_, ck) = sample();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Format(_))));
        let good = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
    }

    #[test]
    fn mismatched_config_fails_to_build() {
        let (_, mut ck) = sample();
        ck.config.rnn_width += 1;
        assert!(matches!(ck.build_model::<f32>(), Err(Error::Checkpoint(_))));
    }
}
