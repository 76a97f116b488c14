use std::collections::BTreeMap;

use super::propagate::mean_rows;
use super::{EmbeddingState, Ghn, GhnConfig};
use crate::arch::{ArchGraph, NetworkPlan, Owner, ParamSlot, Role, SlotKey, Space};
use crate::error::{GhnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Generated parameter tensors keyed by slot, living on the tape that
/// produced them.
#[derive(Clone, Debug, Default)]
pub struct GeneratedWeights {
    pub slots: BTreeMap<SlotKey, Var>,
}

impl GeneratedWeights {
    pub fn get(&self, key: &SlotKey) -> Option<Var> {
        self.slots.get(key).copied()
    }

    pub fn node(&self, block: usize, node: usize, role: Role) -> Option<Var> {
        self.get(&SlotKey {
            owner: Owner::Node { block, node },
            role,
        })
    }

    pub fn network(&self, role: Role) -> Option<Var> {
        self.get(&SlotKey {
            owner: Owner::Network,
            role,
        })
    }

    /// Roles generated for one node, in role order.
    pub fn for_node(&self, block: usize, node: usize) -> Vec<(Role, Var)> {
        self.slots
            .iter()
            .filter(|(k, _)| k.owner == Owner::Node { block, node })
            .map(|(k, &v)| (k.role, v))
            .collect()
    }

    /// Edge slabs of `edges`, concatenated along input channels.
    pub fn bottleneck(
        &self,
        tape: &mut Tape,
        block: usize,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let parts = edges
            .iter()
            .map(|&(src, dst)| {
                let key = SlotKey {
                    owner: Owner::Edge { block, src, dst },
                    role: Role::EdgeBottleneck,
                };
                self.get(&key)
                    .ok_or_else(|| GhnError::Assembly(format!("no weights for {key}")))
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts, 1)
    }

    pub fn to_tensors(&self, tape: &Tape) -> BTreeMap<SlotKey, Tensor> {
        self.slots
            .iter()
            .map(|(k, &v)| (*k, tape.value(v).clone()))
            .collect()
    }
}

fn kernel_dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    match shape {
        [o, i, kh, kw] => (*o, *i, *kh, *kw),
        [o, i] => (*o, *i, 1, 1),
        _ => unreachable!("kernel slots are 2-d or 4-d"),
    }
}

/// Geometry of one head: slab channel width, spatial extent, row length.
#[derive(Clone, Copy)]
struct HeadGeom {
    bw: usize,
    k: usize,
    row: usize,
    max_tiles: usize,
}

impl HeadGeom {
    fn node(c: &GhnConfig) -> Self {
        HeadGeom {
            bw: c.block_width,
            k: c.kernel(),
            row: c.slab_len(),
            max_tiles: c.max_tiles,
        }
    }

    fn edge(c: &GhnConfig) -> Self {
        HeadGeom {
            bw: c.block_width,
            k: 1,
            row: c.block_width * c.block_width,
            max_tiles: c.max_tiles,
        }
    }

    /// `(out, in)` tile pairs needed for `slot`, row-major.
    fn tiles(&self, slot: &ParamSlot) -> Result<Vec<(usize, usize)>> {
        let too_big = |what: String| {
            GhnError::config(format!(
                "{}: {what} exceeds {} slabs of width {}",
                slot.key, self.max_tiles, self.bw
            ))
        };
        if slot.key.role.is_vector() {
            let n = slot.len().div_ceil(self.row);
            if n > self.max_tiles {
                return Err(too_big(format!("{} values", slot.len())));
            }
            return Ok((0..n).map(|t| (t, 0)).collect());
        }
        let (o, i, kh, kw) = kernel_dims(&slot.shape);
        if kh > self.k || kw > self.k {
            return Err(GhnError::config(format!(
                "{}: kernel {kh}x{kw} larger than generated {k}x{k}",
                slot.key,
                k = self.k
            )));
        }
        let (to, ti) = (o.div_ceil(self.bw), i.div_ceil(self.bw));
        if to > self.max_tiles || ti > self.max_tiles {
            return Err(too_big(format!("{o}x{i} channels")));
        }
        Ok((0..to).flat_map(|a| (0..ti).map(move |b| (a, b))).collect())
    }

    /// Flat indices into the `[rows, row]` head output that assemble `slot`
    /// from its tiles starting at row `base`.
    fn index(&self, slot: &ParamSlot, base: usize) -> Vec<usize> {
        if slot.key.role.is_vector() {
            return (base * self.row..base * self.row + slot.len()).collect();
        }
        let (o, i, kh, kw) = kernel_dims(&slot.shape);
        let (bw, k) = (self.bw, self.k);
        let ti = i.div_ceil(bw);
        let (oy, ox) = ((k - kh) / 2, (k - kw) / 2);
        let mut out = Vec::with_capacity(slot.len());
        for oc in 0..o {
            for ic in 0..i {
                let r = base + (oc / bw) * ti + ic / bw;
                let cell = ((oc % bw) * bw + ic % bw) * k * k;
                for y in 0..kh {
                    for x in 0..kw {
                        out.push(r * self.row + cell + (y + oy) * k + x + ox);
                    }
                }
            }
        }
        out
    }
}

/// Rows queued for one head plus the slots they serve.
#[derive(Default)]
struct Batch {
    embeddings: Vec<Var>,
    suffixes: Vec<f64>,
    slots: Vec<(ParamSlot, usize)>,
}

impl Batch {
    fn push(
        &mut self,
        geom: &HeadGeom,
        slot: &ParamSlot,
        emb: Var,
        role: Option<Role>,
    ) -> Result<()> {
        let base = self.embeddings.len();
        for (to, ti) in geom.tiles(slot)? {
            self.embeddings.push(emb);
            if let Some(r) = role {
                let mut onehot = vec![0.0; Role::ALL.len()];
                onehot[r.index()] = 1.0;
                self.suffixes.extend(onehot);
            }
            let mut tiles = vec![0.0; 2 * geom.max_tiles];
            tiles[to] = 1.0;
            tiles[geom.max_tiles + ti] = 1.0;
            self.suffixes.extend(tiles);
        }
        self.slots.push((slot.clone(), base));
        Ok(())
    }

    fn run(
        self,
        tape: &mut Tape,
        geom: &HeadGeom,
        head: crate::tensor::nn::Mlp2,
        out: &mut BTreeMap<SlotKey, Var>,
    ) -> Result<()> {
        if self.embeddings.is_empty() {
            return Ok(());
        }
        let n = self.embeddings.len();
        let width = self.suffixes.len() / n;
        let emb = tape.concat(&self.embeddings, 0)?;
        let suffix = tape.constant(Tensor::new(vec![n, width], self.suffixes)?);
        let x = tape.concat(&[emb, suffix], 1)?;
        let y = head.forward(tape, x)?;
        for (slot, base) in self.slots {
            let v = tape.gather(y, geom.index(&slot, base), slot.shape.clone())?;
            out.insert(slot.key, v);
        }
        Ok(())
    }
}

impl Ghn<'_> {
    /// Weights for every slot of `plan`. `states` holds one embedding state
    /// per block, or a single state shared by all blocks.
    pub fn generate_weights(
        &self,
        tape: &mut Tape,
        plan: &NetworkPlan,
        states: &[EmbeddingState],
    ) -> Result<GeneratedWeights> {
        if plan.space != self.config().space {
            return Err(GhnError::config(
                "plan and model belong to different spaces",
            ));
        }
        if states.is_empty() || (states.len() != 1 && states.len() != plan.blocks.len()) {
            return Err(GhnError::input(format!(
                "{} embedding states for {} blocks",
                states.len(),
                plan.blocks.len()
            )));
        }
        let state_of = |block: usize| &states[block.min(states.len() - 1)];
        let graph_embs = states
            .iter()
            .map(|s| mean_rows(tape, &s.rows))
            .collect::<Result<Vec<_>>>()?;
        let network = mean_rows(tape, &graph_embs)?;

        let node_geom = HeadGeom::node(self.config());
        let edge_geom = HeadGeom::edge(self.config());
        let mut nodes = Batch::default();
        let mut edges = Batch::default();
        let lookup = |block: usize, id: usize| {
            state_of(block)
                .get(id)
                .ok_or_else(|| GhnError::Assembly(format!("no embedding for node {id}")))
        };
        for slot in plan.slots() {
            match slot.key.owner {
                Owner::Network => nodes.push(&node_geom, slot, network, Some(slot.key.role))?,
                Owner::Node { block, node } => {
                    nodes.push(&node_geom, slot, lookup(block, node)?, Some(slot.key.role))?
                }
                Owner::Edge { block, src, dst } => {
                    let pair = [lookup(block, src)?, lookup(block, dst)?];
                    let emb = tape.concat(&pair, 1)?;
                    edges.push(&edge_geom, slot, emb, None)?
                }
            }
        }

        let mut out = BTreeMap::new();
        let hyper = self.head("hyper").expect("hyper head is always present");
        nodes.run(tape, &node_geom, hyper, &mut out)?;
        if !edges.slots.is_empty() {
            let head = self
                .head("edge")
                .ok_or_else(|| GhnError::config("model has no edge head"))?;
            edges.run(tape, &edge_geom, head, &mut out)?;
        }
        Ok(GeneratedWeights { slots: out })
    }

    /// Concat-input bottleneck `[c, k·c, 1, 1]` for `edges`, one generated
    /// slab per edge from its endpoint embeddings.
    pub fn generate_bottleneck_from_edges(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        state: &EmbeddingState,
        edges: &[(usize, usize)],
        channels: usize,
    ) -> Result<Var> {
        if g.mode != Space::Anytime || self.config().space != Space::Anytime {
            return Err(GhnError::config(
                "edge-generated bottlenecks exist only in anytime mode",
            ));
        }
        let head = self
            .head("edge")
            .ok_or_else(|| GhnError::config("model has no edge head"))?;
        let geom = HeadGeom::edge(self.config());
        let mut batch = Batch::default();
        for &(src, dst) in edges {
            let (a, b) = match (state.get(src), state.get(dst)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(GhnError::input(format!("edge ({src}, {dst}) not in graph"))),
            };
            let emb = tape.concat(&[a, b], 1)?;
            let slot = ParamSlot {
                key: SlotKey {
                    owner: Owner::Edge { block: 0, src, dst },
                    role: Role::EdgeBottleneck,
                },
                shape: vec![channels, channels, 1, 1],
            };
            batch.push(&geom, &slot, emb, None)?;
        }
        let mut out = BTreeMap::new();
        batch.run(tape, &geom, head, &mut out)?;
        let w = GeneratedWeights { slots: out };
        w.bottleneck(tape, 0, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(role: Role, shape: Vec<usize>) -> ParamSlot {
        ParamSlot {
            key: SlotKey {
                owner: Owner::Network,
                role,
            },
            shape,
        }
    }

    #[test]
    fn center_slice_of_seven() {
        let g = HeadGeom {
            bw: 1,
            k: 7,
            row: 49,
            max_tiles: 4,
        };
        let idx = g.index(&slot(Role::Conv, vec![1, 1, 3, 3]), 0);
        let expected: Vec<usize> = (2..5)
            .flat_map(|y| (2..5).map(move |x| y * 7 + x))
            .collect();
        assert_eq!(idx, expected);
    }

    #[test]
    fn tiles_cover_channels() {
        let g = HeadGeom {
            bw: 8,
            k: 7,
            row: 8 * 8 * 49,
            max_tiles: 16,
        };
        let s = slot(Role::Conv, vec![20, 9, 1, 1]);
        assert_eq!(g.tiles(&s).unwrap().len(), 3 * 2);
        let idx = g.index(&s, 0);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len());
        assert!(g.tiles(&slot(Role::Conv, vec![129, 8, 1, 1])).is_err());
    }

    #[test]
    fn vectors_take_leading_entries() {
        let g = HeadGeom {
            bw: 2,
            k: 1,
            row: 4,
            max_tiles: 4,
        };
        let s = slot(Role::Affine, vec![2, 3]);
        assert_eq!(g.tiles(&s).unwrap(), vec![(0, 0), (1, 0)]);
        assert_eq!(g.index(&s, 1), vec![4, 5, 6, 7, 8, 9]);
    }
}
