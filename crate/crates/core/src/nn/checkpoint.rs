//! Text checkpoint: one JSON document of named tensors with base64 payloads.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::params::{ParameterSet, Role};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "masd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorDoc>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::MissingTensors(format!("checkpoint metadata `{key}`")))
    }

    pub fn add_set(&mut self, set: &ParameterSet) {
        for (name, t) in set.iter() {
            self.tensors.insert(name.clone(), t.clone());
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    /// Every tensor whose name starts with `prefix`, as a parameter set.
    pub fn extract(&self, prefix: &str, role: Role) -> Result<ParameterSet> {
        let mut set = ParameterSet::new(role);
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            set.insert(name, t.clone());
        }
        if set.is_empty() {
            return Err(Error::MissingTensors(format!("{prefix}*")));
        }
        Ok(set)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensors(name.to_string()))
    }

    pub fn to_text(&self) -> String {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (
                    k.clone(),
                    TensorDoc {
                        shape: t.shape().to_vec(),
                        data: B64.encode(bytes),
                    },
                )
            })
            .collect();
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Structure(format!("not a checkpoint: format `{}`", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: doc.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut tensors = BTreeMap::new();
        for (name, t) in doc.tensors {
            let bytes = B64
                .decode(t.data.as_bytes())
                .map_err(|e| Error::Structure(format!("tensor `{name}`: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Structure(format!("tensor `{name}`: truncated payload")));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::new(t.shape, data)?);
        }
        Ok(Self { meta: doc.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut ck = Checkpoint::new();
            ck.set_meta("kind", "test");
            ck.tensors.insert("a/b".into(), Tensor::vector(vals.clone()));
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            let got: Vec<u64> = back.tensors["a/b"].data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn extract_by_prefix() {
        let mut ck = Checkpoint::new();
        ck.tensors.insert("enc/l0.w".into(), Tensor::zeros(&[2, 2]));
        ck.tensors.insert("encx".into(), Tensor::zeros(&[1]));
        ck.tensors.insert("dec/l0.w".into(), Tensor::zeros(&[2, 2]));
        let enc = ck.extract("enc/", Role::Encoder).unwrap();
        assert_eq!(enc.len(), 1);
        assert!(ck.extract("agg/", Role::Aggregator).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = Checkpoint::new().to_text().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(Checkpoint::from_text(&text), Err(Error::Version { found: 9, .. })));
    }
}
