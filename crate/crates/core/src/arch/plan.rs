//! Resolved execution plan of a network: per-node shapes, parameter slots
//! and FLOP costs. Weight generation fills the slots, assembly consumes them.

use std::fmt;

use super::{OpKind, Scale, Space};

/// What a generated parameter tensor is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Stem,
    Conv,
    Depthwise,
    Pointwise,
    ConvRow,
    ConvCol,
    Affine,
    Classifier,
    ClassifierBias,
    ExitClassifier,
    ExitBias,
    EdgeBottleneck,
}

impl Role {
    pub const ALL: [Role; 12] = [
        Role::Stem,
        Role::Conv,
        Role::Depthwise,
        Role::Pointwise,
        Role::ConvRow,
        Role::ConvCol,
        Role::Affine,
        Role::Classifier,
        Role::ClassifierBias,
        Role::ExitClassifier,
        Role::ExitBias,
        Role::EdgeBottleneck,
    ];

    pub fn index(self) -> usize {
        Role::ALL.iter().position(|&r| r == self).unwrap()
    }

    /// Flat parameter vectors, as opposed to `[out, in, kh, kw]` kernels or
    /// `[out, in]` matrices.
    pub fn is_vector(self) -> bool {
        matches!(self, Role::Affine | Role::ClassifierBias | Role::ExitBias)
    }
}

/// Whose embedding a slot is generated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    /// Network-level embedding (mean over blocks).
    Network,
    Node {
        block: usize,
        node: usize,
    },
    Edge {
        block: usize,
        src: usize,
        dst: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotKey {
    pub owner: Owner,
    pub role: Role,
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.owner {
            Owner::Network => write!(f, "network/{:?}", self.role),
            Owner::Node { block, node } => write!(f, "block{block}/node{node}/{:?}", self.role),
            Owner::Edge { block, src, dst } => {
                write!(f, "block{block}/edge{src}-{dst}/{:?}", self.role)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub key: SlotKey,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature map an input node of a standard block reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Stem,
    Block(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodePlan {
    pub id: usize,
    pub op: OpKind,
    pub in_degree: usize,
    pub channels: usize,
    /// Output spatial extent.
    pub spatial: (usize, usize),
    /// Stride of a standard input-node bottleneck or the anytime stem.
    pub stride: usize,
    /// Average-pool factor applied before a standard input-node bottleneck.
    pub adapter: usize,
    pub scale: Option<Scale>,
    pub exit: bool,
    pub slots: Vec<ParamSlot>,
    pub flops: u64,
    pub exit_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub index: usize,
    pub reduction: bool,
    pub channels: usize,
    pub spatial: (usize, usize),
    /// One entry per graph input, in `inputs` order (standard only).
    pub sources: Vec<Source>,
    /// Nodes in topological order.
    pub nodes: Vec<NodePlan>,
    pub leaves: Vec<usize>,
    pub out_channels: usize,
}

impl BlockPlan {
    pub fn node(&self, id: usize) -> Option<&NodePlan> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops + n.exit_flops).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub space: Space,
    pub input: [usize; 3],
    pub classes: usize,
    /// Empty in anytime mode, where node 0 is the stem.
    pub stem_slots: Vec<ParamSlot>,
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub stem_spatial: (usize, usize),
    pub stem_flops: u64,
    pub blocks: Vec<BlockPlan>,
    pub head_in: usize,
    pub head_slots: Vec<ParamSlot>,
    pub head_flops: u64,
}

impl NetworkPlan {
    /// Every slot, in generation order: stem, blocks, head.
    pub fn slots(&self) -> impl Iterator<Item = &ParamSlot> {
        self.stem_slots
            .iter()
            .chain(
                self.blocks
                    .iter()
                    .flat_map(|b| b.nodes.iter().flat_map(|n| &n.slots)),
            )
            .chain(&self.head_slots)
    }

    pub fn num_weights(&self) -> usize {
        self.slots().map(ParamSlot::len).sum()
    }
}
