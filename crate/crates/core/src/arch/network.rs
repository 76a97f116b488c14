use std::collections::BTreeSet;

use super::plan::Source;
use super::{
    topological_sort, validate, ArchGraph, BlockPlan, NetworkPlan, NodePlan, OpKind, Owner,
    ParamSlot, Role, SlotKey, Space,
};
use crate::error::{GhnError, Result};
use crate::tensor::out_extent;

/// A block graph repeated `repeat` times behind a stem, followed by a
/// pooled linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub block: ArchGraph,
    pub repeat: usize,
    /// 1-based block positions that halve resolution and double width.
    pub reductions: BTreeSet<usize>,
    pub channels: usize,
    pub classes: usize,
    pub stem_stride: usize,
}

pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_STEM_STRIDE: usize = 2;

/// Stack `block` into a network. Anytime graphs are whole networks already
/// and only accept `repeat == 1` without reductions.
pub fn stack_blocks(
    block: ArchGraph,
    repeat: usize,
    reductions: &[usize],
    channels: usize,
) -> Result<NetworkSpec> {
    if repeat == 0 {
        return Err(GhnError::input("repeat count must be positive"));
    }
    if channels == 0 {
        return Err(GhnError::input("initial channel count must be positive"));
    }
    if let Some(&r) = reductions.iter().find(|&&r| r == 0 || r > repeat) {
        return Err(GhnError::input(format!(
            "reduction position {r} outside 1..={repeat}"
        )));
    }
    if block.mode == Space::Anytime && (repeat != 1 || !reductions.is_empty()) {
        return Err(GhnError::input(
            "anytime networks are a single graph without reductions",
        ));
    }
    if let Err(v) = validate(&block) {
        let cycle = v
            .iter()
            .find_map(|x| match x {
                super::Violation::Cycle(c) => Some(c.clone()),
                _ => None,
            })
            .unwrap_or_default();
        let message = v
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(GhnError::Graph { message, cycle });
    }
    Ok(NetworkSpec {
        block,
        repeat,
        reductions: reductions.iter().copied().collect(),
        channels,
        classes: DEFAULT_CLASSES,
        stem_stride: DEFAULT_STEM_STRIDE,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExitFlops {
    pub node: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub stem: u64,
    pub blocks: Vec<u64>,
    pub head: u64,
    pub total: u64,
    /// Early exits in execution order; cost includes everything executed
    /// before them, earlier exit classifiers included.
    pub exits: Vec<ExitFlops>,
}

impl FlopReport {
    /// Cost at every exit followed by the final classifier; strictly increasing.
    pub fn curve(&self) -> Vec<u64> {
        self.exits
            .iter()
            .map(|e| e.flops)
            .chain(std::iter::once(self.total))
            .collect()
    }
}

pub fn count_flops(spec: &NetworkSpec, input: [usize; 3]) -> Result<FlopReport> {
    Ok(spec.plan(input)?.flop_report())
}

fn slot(owner: Owner, role: Role, shape: Vec<usize>) -> ParamSlot {
    ParamSlot {
        key: SlotKey { owner, role },
        shape,
    }
}

fn conv_flops(shape: &[usize], out: (usize, usize)) -> u64 {
    2 * shape.iter().product::<usize>() as u64 * (out.0 * out.1) as u64
}

fn halve(s: (usize, usize), what: &str) -> Result<(usize, usize)> {
    if s.0 < 2 || s.1 < 2 || !s.0.is_multiple_of(2) || !s.1.is_multiple_of(2) {
        return Err(GhnError::dim(format!(
            "{what}: cannot halve spatial extent {}x{}",
            s.0, s.1
        )));
    }
    Ok((s.0 / 2, s.1 / 2))
}

/// Slots of the operator itself at width `c`.
fn op_slots(op: OpKind, c: usize, owner: Owner) -> Vec<ParamSlot> {
    let affine = slot(owner, Role::Affine, vec![2, c]);
    let sep = |k: usize| {
        vec![
            slot(owner, Role::Depthwise, vec![c, 1, k, k]),
            slot(owner, Role::Pointwise, vec![c, c, 1, 1]),
            affine.clone(),
        ]
    };
    match op {
        OpKind::Identity | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => vec![],
        OpKind::Conv1x1 => vec![slot(owner, Role::Conv, vec![c, c, 1, 1]), affine.clone()],
        OpKind::Conv3x3 => vec![slot(owner, Role::Conv, vec![c, c, 3, 3]), affine.clone()],
        OpKind::Conv5x5 => vec![slot(owner, Role::Conv, vec![c, c, 5, 5]), affine.clone()],
        OpKind::SepConv3x3 | OpKind::DilSepConv3x3 => sep(3),
        OpKind::SepConv5x5 | OpKind::DilSepConv5x5 => sep(5),
        OpKind::Conv1x7_7x1 => vec![
            slot(owner, Role::ConvRow, vec![c, c, 1, 7]),
            slot(owner, Role::ConvCol, vec![c, c, 7, 1]),
            affine.clone(),
        ],
    }
}

fn slots_flops(slots: &[ParamSlot], out: (usize, usize)) -> u64 {
    slots
        .iter()
        .filter(|s| !s.key.role.is_vector())
        .map(|s| conv_flops(&s.shape, out))
        .sum()
}

impl NetworkSpec {
    /// Block of one graph, no reductions.
    pub fn single(block: ArchGraph, channels: usize) -> Result<NetworkSpec> {
        stack_blocks(block, 1, &[], channels)
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_stem_stride(mut self, stride: usize) -> Self {
        self.stem_stride = stride;
        self
    }

    pub fn exit_nodes(&self) -> Vec<usize> {
        self.block.exit_nodes()
    }

    /// Stem width followed by the width of every block.
    pub fn channel_progression(&self) -> Vec<usize> {
        let mut out = vec![self.channels];
        let mut c = self.channels;
        for b in 1..=self.repeat {
            if self.reductions.contains(&b) {
                c *= 2;
            }
            out.push(c);
        }
        out
    }

    /// Resolve shapes, parameter slots and costs for an input of shape
    /// `[channels, height, width]`.
    pub fn plan(&self, input: [usize; 3]) -> Result<NetworkPlan> {
        if self.classes == 0 || self.stem_stride == 0 {
            return Err(GhnError::input("classes and stem stride must be positive"));
        }
        if input.contains(&0) {
            return Err(GhnError::dim(format!("empty input shape {input:?}")));
        }
        let extent = |d: usize| {
            out_extent(d, 3, self.stem_stride, 1, 1)
                .ok_or_else(|| GhnError::dim(format!("stem output underflows for extent {d}")))
        };
        let stem_spatial = (extent(input[1])?, extent(input[2])?);
        match self.block.mode {
            Space::Standard => self.plan_standard(input, stem_spatial),
            Space::Anytime => self.plan_anytime(input, stem_spatial),
        }
    }

    fn plan_standard(
        &self,
        input: [usize; 3],
        stem_spatial: (usize, usize),
    ) -> Result<NetworkPlan> {
        let g = &self.block;
        let order = topological_sort(g)?;
        let leaves = g.leaves();
        let widths = self.channel_progression();
        let c0 = widths[0];
        let stem_slots = vec![
            slot(Owner::Network, Role::Stem, vec![c0, input[0], 3, 3]),
            slot(Owner::Network, Role::Affine, vec![2, c0]),
        ];
        let stem_flops = conv_flops(&stem_slots[0].shape, stem_spatial);

        // (channels, spatial) of the stem and of each finished block
        let mut outputs: Vec<(usize, (usize, usize))> = vec![(c0, stem_spatial)];
        let mut blocks = Vec::with_capacity(self.repeat);
        for b in 0..self.repeat {
            let reduction = self.reductions.contains(&(b + 1));
            let c = widths[b + 1];
            let prev = outputs.last().unwrap().1;
            let spatial = if reduction {
                halve(prev, &format!("reduction block {}", b + 1))?
            } else {
                prev
            };
            let sources: Vec<Source> = (0..g.inputs.len())
                .map(|k| {
                    if b > k {
                        Source::Block(b - 1 - k)
                    } else {
                        Source::Stem
                    }
                })
                .collect();

            let mut nodes = Vec::with_capacity(order.len());
            for &id in &order {
                let op = g.node(id).unwrap().op;
                let owner = Owner::Node { block: b, node: id };
                let node = if let Some(k) = g.inputs.iter().position(|&i| i == id) {
                    let (src_c, src_s) = match sources[k] {
                        Source::Stem => outputs[0],
                        Source::Block(j) => outputs[j + 1],
                    };
                    let (stride, adapter) = resample_plan(src_s, spatial)?;
                    let slots = vec![
                        slot(owner, Role::Conv, vec![c, src_c, 1, 1]),
                        slot(owner, Role::Affine, vec![2, c]),
                    ];
                    let flops = slots_flops(&slots, spatial);
                    NodePlan {
                        id,
                        op,
                        in_degree: 1,
                        channels: c,
                        spatial,
                        stride,
                        adapter,
                        scale: None,
                        exit: false,
                        slots,
                        flops,
                        exit_flops: 0,
                    }
                } else {
                    let in_degree = g.in_neighbors(id).len();
                    let slots = op_slots(op, c, owner);
                    let flops = slots_flops(&slots, spatial) * in_degree as u64;
                    NodePlan {
                        id,
                        op,
                        in_degree,
                        channels: c,
                        spatial,
                        stride: 1,
                        adapter: 1,
                        scale: None,
                        exit: false,
                        slots,
                        flops,
                        exit_flops: 0,
                    }
                };
                nodes.push(node);
            }
            let out_channels = c * leaves.len();
            outputs.push((out_channels, spatial));
            blocks.push(BlockPlan {
                index: b,
                reduction,
                channels: c,
                spatial,
                sources,
                nodes,
                leaves: leaves.clone(),
                out_channels,
            });
        }

        let head_in = outputs.last().unwrap().0;
        Ok(self.finish(input, stem_slots, stem_spatial, stem_flops, blocks, head_in))
    }

    fn plan_anytime(&self, input: [usize; 3], stem_spatial: (usize, usize)) -> Result<NetworkPlan> {
        let g = &self.block;
        if !stem_spatial.0.is_multiple_of(4) || !stem_spatial.1.is_multiple_of(4) {
            return Err(GhnError::dim(format!(
                "anytime stem output {}x{} is not divisible by 4",
                stem_spatial.0, stem_spatial.1
            )));
        }
        let order = topological_sort(g)?;
        let c = self.channels;
        let mut nodes = Vec::with_capacity(order.len());
        for &id in &order {
            let n = g.node(id).unwrap();
            let attrs = n
                .anytime
                .ok_or_else(|| GhnError::input(format!("node {id} lacks anytime attributes")))?;
            let d = attrs.scale.divisor();
            let spatial = (stem_spatial.0 / d, stem_spatial.1 / d);
            let owner = Owner::Node { block: 0, node: id };
            let (slots, in_degree, stride) = if g.is_input(id) {
                let slots = vec![
                    slot(owner, Role::Stem, vec![c, input[0], 3, 3]),
                    slot(owner, Role::Affine, vec![2, c]),
                ];
                (slots, 0, self.stem_stride)
            } else {
                let mut slots: Vec<ParamSlot> = g
                    .in_edges(id)
                    .into_iter()
                    .map(|(src, dst)| {
                        slot(
                            Owner::Edge { block: 0, src, dst },
                            Role::EdgeBottleneck,
                            vec![c, c, 1, 1],
                        )
                    })
                    .collect();
                let k = slots.len();
                slots.extend(op_slots(n.op, c, owner));
                (slots, k, 1)
            };
            let flops = slots_flops(&slots, spatial);
            let (exit_slots, exit_flops) = if attrs.early_exit {
                let s = vec![
                    slot(owner, Role::ExitClassifier, vec![self.classes, c]),
                    slot(owner, Role::ExitBias, vec![self.classes]),
                ];
                (s, 2 * (self.classes * c) as u64)
            } else {
                (vec![], 0)
            };
            let mut slots = slots;
            slots.extend(exit_slots);
            nodes.push(NodePlan {
                id,
                op: n.op,
                in_degree,
                channels: c,
                spatial,
                stride,
                adapter: 1,
                scale: Some(attrs.scale),
                exit: attrs.early_exit,
                slots,
                flops,
                exit_flops,
            });
        }
        let leaves = g.leaves();
        let out_channels = c * leaves.len();
        let block = BlockPlan {
            index: 0,
            reduction: false,
            channels: c,
            spatial: stem_spatial,
            sources: vec![],
            nodes,
            leaves,
            out_channels,
        };
        Ok(self.finish(input, vec![], stem_spatial, 0, vec![block], out_channels))
    }

    fn finish(
        &self,
        input: [usize; 3],
        stem_slots: Vec<ParamSlot>,
        stem_spatial: (usize, usize),
        stem_flops: u64,
        blocks: Vec<BlockPlan>,
        head_in: usize,
    ) -> NetworkPlan {
        let head_slots = vec![
            slot(
                Owner::Network,
                Role::Classifier,
                vec![self.classes, head_in],
            ),
            slot(Owner::Network, Role::ClassifierBias, vec![self.classes]),
        ];
        NetworkPlan {
            space: self.block.mode,
            input,
            classes: self.classes,
            stem_slots,
            stem_stride: self.stem_stride,
            stem_channels: self.channels,
            stem_spatial,
            stem_flops,
            blocks,
            head_in,
            head_slots,
            head_flops: 2 * (self.classes * head_in) as u64,
        }
    }
}

/// Stride and pre-pooling factor that bring a source map to `target`.
fn resample_plan(src: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    let bad = || {
        GhnError::dim(format!(
            "cannot bring {}x{} down to {}x{}",
            src.0, src.1, target.0, target.1
        ))
    };
    if !src.0.is_multiple_of(target.0) || !src.1.is_multiple_of(target.1) {
        return Err(bad());
    }
    let r = src.0 / target.0;
    if r != src.1 / target.1 || !r.is_power_of_two() {
        return Err(bad());
    }
    Ok(if r == 1 { (1, 1) } else { (2, r / 2) })
}

impl NetworkPlan {
    pub fn flop_report(&self) -> FlopReport {
        let mut acc = self.stem_flops;
        let mut exits = Vec::new();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            for n in &b.nodes {
                acc += n.flops + n.exit_flops;
                if n.exit {
                    exits.push(ExitFlops {
                        node: n.id,
                        flops: acc,
                    });
                }
            }
            blocks.push(b.flops());
        }
        FlopReport {
            stem: self.stem_flops,
            blocks,
            head: self.head_flops,
            total: acc + self.head_flops,
            exits,
        }
    }
}
