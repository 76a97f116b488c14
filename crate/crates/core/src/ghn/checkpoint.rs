use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GhnConfig, GhnModel};
use crate::error::{GhnError, Result};
use crate::tensor::params::EncodedTensor;
use crate::tensor::{AdamState, ParamStore};

pub const CKPT_SCHEMA: &str = "ghn-ckpt/1";

/// Model parameters plus optional optimizer state, enough to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: GhnModel,
    pub adam: Option<AdamState>,
    /// Training steps completed.
    pub step: u64,
    /// Free-form run description echoed into the file.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamDoc {
    step: u64,
    m: BTreeMap<String, EncodedTensor>,
    v: BTreeMap<String, EncodedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    schema: String,
    config: GhnConfig,
    tensors: BTreeMap<String, EncodedTensor>,
    #[serde(default)]
    optimizer: Option<AdamDoc>,
    #[serde(default)]
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: GhnModel) -> Self {
        Checkpoint {
            model,
            adam: None,
            step: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = Doc {
            schema: CKPT_SCHEMA.into(),
            config: self.model.config.clone(),
            tensors: self.model.params.encode(),
            optimizer: self.adam.as_ref().map(|a| AdamDoc {
                step: a.step,
                m: a.m.encode(),
                v: a.v.encode(),
            }),
            step: self.step,
            meta: self.meta.clone(),
        };
        let value = serde_json::to_value(&doc).expect("checkpoint serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // the schema is checked first so that a newer layout reports its
        // version instead of an unknown field
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| GhnError::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        match raw.get("schema").and_then(|s| s.as_str()) {
            Some(CKPT_SCHEMA) => {}
            other => {
                return Err(GhnError::Parse {
                    location: "field `schema`".into(),
                    message: format!(
                        "unsupported checkpoint schema {other:?}, expected `{CKPT_SCHEMA}`"
                    ),
                })
            }
        }
        let doc: Doc = serde_json::from_value(raw).map_err(|e| GhnError::Parse {
            location: "checkpoint body".into(),
            message: e.to_string(),
        })?;
        let params = ParamStore::decode(&doc.tensors)?;
        let reference = GhnModel::new(doc.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(GhnError::Parse {
                        location: format!("tensor `{name}`"),
                        message: "missing or mis-shaped for the stored config".into(),
                    })
                }
            }
        }
        if params.len() != reference.params.len() {
            return Err(GhnError::Parse {
                location: "field `tensors`".into(),
                message: "unexpected extra tensors".into(),
            });
        }
        let adam = doc
            .optimizer
            .map(|a| -> Result<AdamState> {
                Ok(AdamState {
                    step: a.step,
                    m: ParamStore::decode(&a.m)?,
                    v: ParamStore::decode(&a.v)?,
                })
            })
            .transpose()?;
        Ok(Checkpoint {
            model: GhnModel {
                config: doc.config,
                params,
            },
            adam,
            step: doc.step,
            meta: doc.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| GhnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GhnError::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Space;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = GhnModel::new(GhnConfig::new(Space::Anytime), 7).unwrap();
        let mut ck = Checkpoint::new(model);
        ck.step = 12;
        ck.adam = Some(AdamState {
            step: 12,
            m: ck.model.params.clone(),
            v: ck.model.params.clone(),
        });
        ck.meta = serde_json::json!({"note": "x"});
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), ck.to_json());
    }

    #[test]
    fn wrong_schema() {
        let ck = Checkpoint::new(GhnModel::new(GhnConfig::new(Space::Standard), 0).unwrap());
        let text = ck.to_json().replace(CKPT_SCHEMA, "ghn-ckpt/0");
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("ghn-ckpt/0"));
    }

    #[test]
    fn corrupt_payload() {
        let ck = Checkpoint::new(GhnModel::new(GhnConfig::new(Space::Standard), 0).unwrap());
        let text = ck.to_json();
        let i = text.find("\"data\": \"").unwrap() + 9;
        let mut bad = text.clone();
        bad.replace_range(i..i + 4, "!!!!");
        assert!(matches!(
            Checkpoint::from_json(&bad),
            Err(GhnError::Parse { .. })
        ));
    }
}
