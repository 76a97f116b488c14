use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{GhnError, Result};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every tensor of a [`ParamStore`] bound to one tape.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant (evaluation only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Gradients read back from `tape`; unreached parameters get zeros.
    pub fn grads(&self, tape: &Tape, vars: &ParamVars) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let g = vars
                    .try_get(k)
                    .and_then(|v| tape.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                (k.clone(), g)
            })
            .collect()
    }

    pub(crate) fn encode(&self) -> BTreeMap<String, EncodedTensor> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), encode_tensor(t)))
            .collect()
    }

    pub(crate) fn decode(map: &BTreeMap<String, EncodedTensor>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (k, e) in map {
            store.insert(k.clone(), decode_tensor(k, e)?);
        }
        Ok(store)
    }
}

pub(crate) fn encode_tensor(t: &Tensor) -> EncodedTensor {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    EncodedTensor {
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

pub(crate) fn decode_tensor(name: &str, e: &EncodedTensor) -> Result<Tensor> {
    let parse_err = |message: String| GhnError::Parse {
        location: format!("tensor `{name}`"),
        message,
    };
    let bytes = STANDARD
        .decode(&e.data)
        .map_err(|err| parse_err(format!("bad base64 payload: {err}")))?;
    if bytes.len() % 8 != 0 {
        return Err(parse_err(format!(
            "payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| parse_err(err.to_string()))
}
