use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{
    NetworkPlan, NetworkSpec, NodePlan, OpKind, Owner, Role, SlotKey, Source, Space,
};
use crate::error::{GhnError, Result};
use crate::ghn::GeneratedWeights;
use crate::tensor::{Conv2dCfg, PoolCfg, PoolKind, Tape, Tensor, Var};

use super::data::Batch;

/// Independently initialized weights for every slot of a plan, trained
/// directly instead of generated.
#[derive(Clone, Debug, PartialEq)]
pub struct OwnedWeights {
    pub tensors: BTreeMap<SlotKey, Tensor>,
}

impl OwnedWeights {
    /// Fan-in uniform kernels, zero affine offsets and zero biases.
    pub fn init(plan: &NetworkPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = plan
            .slots()
            .map(|s| {
                let t = if s.key.role.is_vector() {
                    Tensor::zeros(&s.shape)
                } else {
                    let fan_in: usize = s.shape[1..].iter().product();
                    let bound = (3.0 / fan_in as f64).sqrt();
                    let data = (0..s.len()).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(s.shape.clone(), data).expect("slot shapes are positive")
                };
                (s.key, t)
            })
            .collect();
        OwnedWeights { tensors }
    }

    /// Keys in a stable order, for pairing with optimizer state.
    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().map(ToString::to_string).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> GeneratedWeights {
        GeneratedWeights {
            slots: self
                .tensors
                .iter()
                .map(|(k, t)| (*k, tape.param(t.clone())))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// An executable candidate: a resolved plan whose every slot is bound to a
/// tensor on one tape.
#[derive(Clone, Debug)]
pub struct CandidateNet {
    pub spec: NetworkSpec,
    pub plan: NetworkPlan,
    pub weights: GeneratedWeights,
    /// Exit node ids in evaluation order (anytime only).
    pub exits: Vec<usize>,
}

/// Logits at the final head and at every early exit.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub exits: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Training objective: the head loss, or the mean over exits and head.
    pub total: Var,
    pub head: Var,
    pub exits: Vec<Var>,
}

/// Check that `weights` covers `plan` exactly (shape for shape) and wrap
/// the pair into a runnable network.
pub fn assemble(
    tape: &Tape,
    spec: &NetworkSpec,
    plan: NetworkPlan,
    weights: GeneratedWeights,
) -> Result<CandidateNet> {
    for slot in plan.slots() {
        let v = weights.get(&slot.key).ok_or_else(|| {
            GhnError::Assembly(format!(
                "{}: missing {:?} weights",
                who(&slot.key),
                slot.key.role
            ))
        })?;
        if tape.shape(v) != slot.shape.as_slice() {
            return Err(GhnError::Assembly(format!(
                "{}: {:?} weights have shape {:?}, expected {:?}",
                who(&slot.key),
                slot.key.role,
                tape.shape(v),
                slot.shape
            )));
        }
    }
    let exits = plan
        .blocks
        .iter()
        .flat_map(|b| b.nodes.iter().filter(|n| n.exit).map(|n| n.id))
        .collect();
    Ok(CandidateNet {
        spec: spec.clone(),
        plan,
        weights,
        exits,
    })
}

fn who(key: &SlotKey) -> String {
    match key.owner {
        Owner::Network => "network".into(),
        Owner::Node { block, node } => format!("node {node} of block {block}"),
        Owner::Edge { block, src, dst } => format!("edge {src}->{dst} of block {block}"),
    }
}

impl CandidateNet {
    fn slot(&self, owner: Owner, role: Role) -> Var {
        // presence is checked by `assemble`
        self.weights.slots[&SlotKey { owner, role }]
    }

    fn node_w(&self, block: usize, node: usize, role: Role) -> Var {
        self.slot(Owner::Node { block, node }, role)
    }

    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Forward> {
        let s = tape.shape(images).to_vec();
        let want = self.plan.input;
        if s.len() != 4 || s[1..] != want {
            return Err(GhnError::dim(format!(
                "network expects [B, {}, {}, {}] input, got {s:?}",
                want[0], want[1], want[2]
            )));
        }
        match self.plan.space {
            Space::Standard => self.forward_standard(tape, images),
            Space::Anytime => self.forward_anytime(tape, images),
        }
    }

    fn affine(&self, tape: &mut Tape, x: Var, raw: Var) -> Result<Var> {
        let c = tape.shape(raw)[1];
        let r0 = tape.row(raw, 0)?;
        let bias = tape.row(raw, 1)?;
        let ones = tape.constant(Tensor::full(&[1, c], 1.0));
        let scale = tape.add(r0, ones)?;
        let x = tape.sample_norm(x)?;
        tape.channel_affine(x, scale, bias)
    }

    /// `x · Wᵀ + b` for a `[classes, in]` matrix.
    fn classify(&self, tape: &mut Tape, feat: Var, w: Var, b: Var) -> Result<Var> {
        let wt = tape.transpose(w)?;
        tape.linear(feat, wt, b)
    }

    /// One operator applied to one incoming activation.
    fn apply_op(&self, tape: &mut Tape, block: usize, node: &NodePlan, x: Var) -> Result<Var> {
        let w = |role| self.node_w(block, node.id, role);
        let pool = |tape: &mut Tape, kind| tape.pool2d(x, kind, PoolCfg::new(3, 1, 1));
        match node.op {
            OpKind::Identity => Ok(x),
            OpKind::MaxPool3x3 => pool(tape, PoolKind::Max),
            OpKind::AvgPool3x3 => pool(tape, PoolKind::Avg),
            OpKind::Conv1x1 | OpKind::Conv3x3 | OpKind::Conv5x5 => {
                let k = tape.shape(w(Role::Conv))[2];
                let h = tape.relu(x);
                let h = tape.conv2d(h, w(Role::Conv), Conv2dCfg::same(k, k, 1))?;
                self.affine(tape, h, w(Role::Affine))
            }
            OpKind::SepConv3x3
            | OpKind::SepConv5x5
            | OpKind::DilSepConv3x3
            | OpKind::DilSepConv5x5 => {
                let dil = if matches!(node.op, OpKind::DilSepConv3x3 | OpKind::DilSepConv5x5) {
                    2
                } else {
                    1
                };
                let h = tape.relu(x);
                let h = tape.separable_conv2d(h, w(Role::Depthwise), w(Role::Pointwise), 1, dil)?;
                self.affine(tape, h, w(Role::Affine))
            }
            OpKind::Conv1x7_7x1 => {
                let h = tape.relu(x);
                let h = tape.conv2d(h, w(Role::ConvRow), Conv2dCfg::same(1, 7, 1))?;
                let h = tape.conv2d(h, w(Role::ConvCol), Conv2dCfg::same(7, 1, 1))?;
                self.affine(tape, h, w(Role::Affine))
            }
        }
    }

    fn forward_standard(&self, tape: &mut Tape, images: Var) -> Result<Forward> {
        let g = &self.spec.block;
        let stem = tape.conv2d(
            images,
            self.slot(Owner::Network, Role::Stem),
            Conv2dCfg::new(self.plan.stem_stride, 1, 1),
        )?;
        let stem = self.affine(tape, stem, self.slot(Owner::Network, Role::Affine))?;
        let mut outputs: Vec<Var> = Vec::with_capacity(self.plan.blocks.len());
        for bp in &self.plan.blocks {
            let b = bp.index;
            let mut feats: BTreeMap<usize, Var> = BTreeMap::new();
            for node in &bp.nodes {
                let y = if let Some(k) = g.inputs.iter().position(|&i| i == node.id) {
                    let src = match bp.sources[k] {
                        Source::Stem => stem,
                        Source::Block(j) => outputs[j],
                    };
                    let h = tape.relu(src);
                    let h = tape.downsample(h, node.adapter)?;
                    let h = tape.conv2d(
                        h,
                        self.node_w(b, node.id, Role::Conv),
                        Conv2dCfg::new(node.stride, 0, 1),
                    )?;
                    self.affine(tape, h, self.node_w(b, node.id, Role::Affine))?
                } else {
                    let parts = g
                        .in_neighbors(node.id)
                        .into_iter()
                        .map(|u| self.apply_op(tape, b, node, feats[&u]))
                        .collect::<Result<Vec<_>>>()?;
                    tape.add_all(&parts)?
                };
                feats.insert(node.id, y);
            }
            let leaves: Vec<Var> = bp.leaves.iter().map(|l| feats[l]).collect();
            outputs.push(concat(tape, &leaves)?);
        }
        let last = *outputs.last().expect("at least one block");
        let pooled = tape.global_avg_pool(last)?;
        let logits = self.classify(
            tape,
            pooled,
            self.slot(Owner::Network, Role::Classifier),
            self.slot(Owner::Network, Role::ClassifierBias),
        )?;
        Ok(Forward {
            logits,
            exits: vec![],
        })
    }

    fn forward_anytime(&self, tape: &mut Tape, images: Var) -> Result<Forward> {
        let g = &self.spec.block;
        let bp = &self.plan.blocks[0];
        let mut feats: BTreeMap<usize, (Var, usize)> = BTreeMap::new();
        let mut exits = Vec::new();
        for node in &bp.nodes {
            let div = node.scale.expect("anytime nodes carry a scale").divisor();
            let y = if g.is_input(node.id) {
                let h = tape.conv2d(
                    images,
                    self.node_w(0, node.id, Role::Stem),
                    Conv2dCfg::new(node.stride, 1, 1),
                )?;
                let h = self.affine(tape, h, self.node_w(0, node.id, Role::Affine))?;
                // an input node below full scale starts from a pooled stem
                tape.downsample(h, div)?
            } else {
                let edges = g.in_edges(node.id);
                let mut parts = Vec::with_capacity(edges.len());
                for &(u, _) in &edges {
                    let (x, du) = feats[&u];
                    parts.push(resample(tape, x, du, div)?);
                }
                let x = concat(tape, &parts)?;
                let w = self.weights.bottleneck(tape, 0, &edges)?;
                let x = tape.conv2d(x, w, Conv2dCfg::default())?;
                self.apply_op(tape, 0, node, x)?
            };
            if node.exit {
                let pooled = tape.global_avg_pool(y)?;
                let logits = self.classify(
                    tape,
                    pooled,
                    self.node_w(0, node.id, Role::ExitClassifier),
                    self.node_w(0, node.id, Role::ExitBias),
                )?;
                exits.push((node.id, logits));
            }
            feats.insert(node.id, (y, div));
        }
        let pooled = bp
            .leaves
            .iter()
            .map(|l| tape.global_avg_pool(feats[l].0))
            .collect::<Result<Vec<_>>>()?;
        let pooled = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat(&pooled, 1)?
        };
        let logits = self.classify(
            tape,
            pooled,
            self.slot(Owner::Network, Role::Classifier),
            self.slot(Owner::Network, Role::ClassifierBias),
        )?;
        Ok(Forward { logits, exits })
    }
}

fn concat(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(parts, 1)
    }
}

/// Average-pool or upsample from scale divisor `from` to `to`.
fn resample(tape: &mut Tape, x: Var, from: usize, to: usize) -> Result<Var> {
    if to >= from {
        tape.downsample(x, to / from)
    } else {
        tape.upsample(x, from / to)
    }
}

/// Cross-entropy at the head; anytime networks average it with every exit's
/// cross-entropy, all weighted equally.
pub fn forward_loss(
    tape: &mut Tape,
    net: &CandidateNet,
    batch: &Batch,
) -> Result<(Forward, LossOutput)> {
    let x = tape.constant(batch.images.clone());
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= net.plan.classes) {
        return Err(GhnError::input(format!(
            "label {bad} outside {} classes",
            net.plan.classes
        )));
    }
    let out = net.forward(tape, x)?;
    let head = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
    let exits = out
        .exits
        .iter()
        .map(|&(_, l)| tape.softmax_cross_entropy(l, &batch.labels))
        .collect::<Result<Vec<_>>>()?;
    let total = if exits.is_empty() {
        head
    } else {
        let mut all = exits.clone();
        all.push(head);
        let s = tape.add_all(&all)?;
        tape.scale(s, 1.0 / all.len() as f64)
    };
    Ok((out, LossOutput { total, head, exits }))
}

/// Predicted class per row of a `[B, classes]` logit matrix (first maximum).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
