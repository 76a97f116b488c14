//! Candidate architectures as directed acyclic graphs.

mod network;
mod plan;
mod sample;
mod serial;
mod topo;
mod validate;

pub use network::{
    count_flops, stack_blocks, ExitFlops, FlopReport, NetworkSpec, DEFAULT_CLASSES,
    DEFAULT_STEM_STRIDE,
};
pub use plan::{BlockPlan, NetworkPlan, NodePlan, Owner, ParamSlot, Role, SlotKey, Source};
pub use sample::{anytime_block_sizes, sample_anytime, sample_block, AnytimeSampling};
pub use serial::{deserialize, graph_hash, serialize, SCHEMA};
pub use topo::topological_sort;
pub use validate::{validate, Violation};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Which operator family a graph is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Standard,
    Anytime,
}

impl Space {
    pub fn ops(self) -> &'static [OpKind] {
        use OpKind::*;
        match self {
            Space::Standard => &[
                Identity,
                Conv1x1,
                SepConv3x3,
                SepConv5x5,
                DilSepConv3x3,
                DilSepConv5x5,
                Conv1x7_7x1,
                MaxPool3x3,
                AvgPool3x3,
            ],
            Space::Anytime => &[Conv1x1, Conv3x3, Conv5x5, MaxPool3x3, AvgPool3x3],
        }
    }

    /// Position of `op` within this space's operator list.
    pub fn op_index(self, op: OpKind) -> Option<usize> {
        self.ops().iter().position(|&o| o == op)
    }

    pub fn join(self) -> Join {
        match self {
            Space::Standard => Join::Sum,
            Space::Anytime => Join::Concat,
        }
    }

    pub fn num_inputs(self) -> usize {
        match self {
            Space::Standard => 2,
            Space::Anytime => 1,
        }
    }

    /// Operator carried by input nodes: the 1×1 bottleneck in standard
    /// blocks, the 3×3 stem in anytime networks.
    pub fn input_op(self) -> OpKind {
        match self {
            Space::Standard => OpKind::Conv1x1,
            Space::Anytime => OpKind::Conv3x3,
        }
    }

    /// Largest spatial kernel extent any operator of the space needs.
    pub fn max_kernel(self) -> usize {
        match self {
            Space::Standard => 7,
            Space::Anytime => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Space::Standard => "standard",
            Space::Anytime => "anytime",
        }
    }
}

impl std::str::FromStr for Space {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Space::Standard),
            "anytime" => Ok(Space::Anytime),
            other => Err(format!(
                "unknown space `{other}` (expected standard|anytime)"
            )),
        }
    }
}

/// How a node combines its incoming activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Join {
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "conv_1x1")]
    Conv1x1,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_sep_conv_3x3")]
    DilSepConv3x3,
    #[serde(rename = "dil_sep_conv_5x5")]
    DilSepConv5x5,
    #[serde(rename = "conv_1x7_7x1")]
    Conv1x7_7x1,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "conv_3x3")]
    Conv3x3,
    #[serde(rename = "conv_5x5")]
    Conv5x5,
}

impl OpKind {
    pub fn is_parameterized(self) -> bool {
        !matches!(
            self,
            OpKind::Identity | OpKind::MaxPool3x3 | OpKind::AvgPool3x3
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilSepConv3x3 => "dil_sep_conv_3x3",
            OpKind::DilSepConv5x5 => "dil_sep_conv_5x5",
            OpKind::Conv1x7_7x1 => "conv_1x7_7x1",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::Conv5x5 => "conv_5x5",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial resolution of an anytime node relative to the stem output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Half,
    Quarter,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Full, Scale::Half, Scale::Quarter];

    pub fn divisor(self) -> usize {
        match self {
            Scale::Full => 1,
            Scale::Half => 2,
            Scale::Quarter => 4,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Scale::Full => 0,
            Scale::Half => 1,
            Scale::Quarter => 2,
        }
    }

    /// Scales a node of anytime block `block` (1-based) may operate at.
    pub fn allowed_in_block(block: u8) -> &'static [Scale] {
        match block {
            1 => &[Scale::Full, Scale::Half, Scale::Quarter],
            2 => &[Scale::Half, Scale::Quarter],
            3 => &[Scale::Quarter],
            _ => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnytimeAttrs {
    pub block: u8,
    pub scale: Scale,
    pub early_exit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchNode {
    pub id: usize,
    pub op: OpKind,
    pub anytime: Option<AnytimeAttrs>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchGraph {
    pub nodes: Vec<ArchNode>,
    pub edges: Vec<(usize, usize)>,
    pub inputs: Vec<usize>,
    pub mode: Space,
    pub join: Join,
}

impl ArchGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> Option<&ArchNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Map from node id to its position in `nodes`.
    pub fn positions(&self) -> BTreeMap<usize, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect()
    }

    pub fn is_input(&self, id: usize) -> bool {
        self.inputs.contains(&id)
    }

    /// Sources of edges into `id`, in stored edge order.
    pub fn in_neighbors(&self, id: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, d)| d == id)
            .map(|&(s, _)| s)
            .collect()
    }

    /// Edges into `id`, in stored edge order.
    pub fn in_edges(&self, id: usize) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .copied()
            .filter(|&(_, d)| d == id)
            .collect()
    }

    pub fn out_degree(&self, id: usize) -> usize {
        self.edges.iter().filter(|&&(s, _)| s == id).count()
    }

    /// Non-input nodes without outgoing edges, by ascending id.
    pub fn leaves(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .nodes
            .iter()
            .map(|n| n.id)
            .filter(|&id| !self.is_input(id) && self.out_degree(id) == 0)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Nodes flagged with an early-exit classifier, by ascending id.
    pub fn exit_nodes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.anytime.is_some_and(|a| a.early_exit))
            .map(|n| n.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Relabels node ids through `perm` (old id → new id), keeping node and
    /// edge storage order.
    pub fn relabel(&self, perm: &BTreeMap<usize, usize>) -> ArchGraph {
        let map = |id: usize| perm.get(&id).copied().unwrap_or(id);
        ArchGraph {
            nodes: self
                .nodes
                .iter()
                .map(|n| ArchNode {
                    id: map(n.id),
                    ..*n
                })
                .collect(),
            edges: self.edges.iter().map(|&(s, d)| (map(s), map(d))).collect(),
            inputs: self.inputs.iter().map(|&i| map(i)).collect(),
            mode: self.mode,
            join: self.join,
        }
    }
}
