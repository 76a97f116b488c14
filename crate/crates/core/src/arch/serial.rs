use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnytimeAttrs, ArchGraph, ArchNode, Join, OpKind, Space};
use crate::error::{GhnError, Result};

pub const SCHEMA: &str = "ghn-arch/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: usize,
    op: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anytime: Option<AnytimeAttrs>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    schema: String,
    mode: Space,
    join: Join,
    inputs: Vec<usize>,
    nodes: Vec<NodeDoc>,
    edges: Vec<(usize, usize)>,
}

/// Compact JSON with object keys in sorted order.
pub fn serialize(g: &ArchGraph) -> String {
    let doc = GraphDoc {
        schema: SCHEMA.to_string(),
        mode: g.mode,
        join: g.join,
        inputs: g.inputs.clone(),
        nodes: g
            .nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                op: n.op,
                anytime: n.anytime,
            })
            .collect(),
        edges: g.edges.clone(),
    };
    // Value's map is ordered, so this pass sorts keys at every depth.
    let value = serde_json::to_value(&doc).expect("graph documents always serialize");
    value.to_string()
}

pub fn deserialize(text: &str) -> Result<ArchGraph> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GhnError::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if doc.schema != SCHEMA {
        return Err(GhnError::Parse {
            location: "field `schema`".into(),
            message: format!("unsupported schema `{}`, expected `{SCHEMA}`", doc.schema),
        });
    }
    Ok(ArchGraph {
        nodes: doc
            .nodes
            .into_iter()
            .map(|n| ArchNode {
                id: n.id,
                op: n.op,
                anytime: n.anytime,
            })
            .collect(),
        edges: doc.edges,
        inputs: doc.inputs,
        mode: doc.mode,
        join: doc.join,
    })
}

/// Hex SHA-256 of the canonical serialization.
pub fn graph_hash(g: &ArchGraph) -> String {
    hex::encode(Sha256::digest(serialize(g).as_bytes()))
}
