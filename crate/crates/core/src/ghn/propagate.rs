use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Ghn, GnnVars};
use crate::arch::{topological_sort, ArchGraph, Space};
use crate::error::{GhnError, Result};
use crate::tensor::nn::gru_cell;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PropagationScheme {
    Synchronous { steps: usize },
    ForwardBackward { passes: usize },
}

impl Default for PropagationScheme {
    fn default() -> Self {
        PropagationScheme::ForwardBackward { passes: 5 }
    }
}

impl PropagationScheme {
    /// Builds a scheme from its name and step/pass count.
    pub fn from_name(name: &str, steps: usize) -> Result<Self> {
        match name {
            "synchronous" | "sync" => Ok(PropagationScheme::Synchronous { steps }),
            "forward-backward" | "fb" => Ok(PropagationScheme::ForwardBackward { passes: steps }),
            other => Err(GhnError::config(format!(
                "unknown propagation scheme `{other}` (expected synchronous|forward-backward)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PropagationScheme::Synchronous { .. } => "synchronous",
            PropagationScheme::ForwardBackward { .. } => "forward-backward",
        }
    }

    pub fn steps(self) -> usize {
        match self {
            PropagationScheme::Synchronous { steps } => steps,
            PropagationScheme::ForwardBackward { passes } => passes,
        }
    }
}

/// Parameter sharing and embedding hand-off between stacked blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackMode {
    /// Separate GNN per block, no hand-off.
    Independent,
    /// Separate GNN per block, graph embedding handed to the next block.
    PeOnly,
    /// One shared GNN with hand-off.
    SpPe,
}

impl StackMode {
    pub const ALL: [StackMode; 3] = [StackMode::Independent, StackMode::PeOnly, StackMode::SpPe];

    pub fn handoff(self) -> bool {
        !matches!(self, StackMode::Independent)
    }

    pub fn shared(self) -> bool {
        matches!(self, StackMode::SpPe)
    }

    pub fn name(self) -> &'static str {
        match self {
            StackMode::Independent => "independent",
            StackMode::PeOnly => "pe-only",
            StackMode::SpPe => "sp-pe",
        }
    }
}

impl fmt::Display for StackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StackMode {
    type Err = GhnError;

    fn from_str(s: &str) -> Result<Self> {
        StackMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GhnError::config(format!("unknown stack mode `{s}`")))
    }
}

/// Per-node embeddings, aligned with the graph's node storage order.
#[derive(Clone, Debug)]
pub struct EmbeddingState {
    pub ids: Vec<usize>,
    /// One `[1, D]` row per node.
    pub rows: Vec<Var>,
    /// Node updates performed so far.
    pub updates: usize,
}

impl EmbeddingState {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<Var> {
        self.ids.iter().position(|&i| i == id).map(|p| self.rows[p])
    }

    pub fn values(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|&r| tape.value(r).data().to_vec())
            .collect()
    }

    pub fn value_of(&self, tape: &Tape, id: usize) -> Option<Vec<f64>> {
        self.get(id).map(|r| tape.value(r).data().to_vec())
    }
}

fn cmp_values(tape: &Tape, a: Var, b: Var) -> Ordering {
    let (x, y) = (tape.value(a).data(), tape.value(b).data());
    x.iter()
        .zip(y)
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Node updated only once per sweep. Any sink can close a topological
/// order; choosing the largest sink whose embedding no other sink shares
/// keeps the sweep independent of node numbering. Interchangeable sinks
/// must be treated alike, so when every sink is tied the pivot is the
/// largest uniquely valued node, and only failing that the last in order.
fn pivot(tape: &Tape, g: &ArchGraph, order: &[usize], rows: &[Var]) -> usize {
    let unique_max = |cands: &[usize]| {
        cands
            .iter()
            .copied()
            .filter(|&p| {
                cands
                    .iter()
                    .filter(|&&q| cmp_values(tape, rows[p], rows[q]).is_eq())
                    .count()
                    == 1
            })
            .max_by(|&a, &b| cmp_values(tape, rows[a], rows[b]))
    };
    let sinks: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&p| g.out_degree(g.nodes[p].id) == 0)
        .collect();
    unique_max(&sinks)
        .or_else(|| unique_max(order))
        .unwrap_or(order[order.len() - 1])
}

/// Sum whose floating-point result does not depend on the order of `vars`.
fn canonical_sum(tape: &mut Tape, mut vars: Vec<Var>) -> Result<Var> {
    vars.sort_by(|&a, &b| cmp_values(tape, a, b));
    tape.add_all(&vars)
}

fn check_finite(tape: &Tape, rows: &[Var]) -> Result<()> {
    if rows.iter().all(|&r| tape.value(r).is_finite()) {
        Ok(())
    } else {
        Err(GhnError::Numeric("non-finite node embedding".into()))
    }
}

impl Ghn<'_> {
    fn check_mode(&self, g: &ArchGraph) -> Result<()> {
        if g.mode != self.config().space {
            return Err(GhnError::config(format!(
                "graph is {} but the model was built for {}",
                g.mode.name(),
                self.config().space.name()
            )));
        }
        Ok(())
    }

    fn onehots(&self, g: &ArchGraph) -> Result<Tensor> {
        let dim = self.config().onehot_dim();
        let mut data = vec![0.0; g.len() * dim];
        for (i, n) in g.nodes.iter().enumerate() {
            let row = &mut data[i * dim..(i + 1) * dim];
            let op = g.mode.op_index(n.op).ok_or_else(|| {
                GhnError::input(format!("node {} uses {} outside its space", n.id, n.op))
            })?;
            row[op] = 1.0;
            if g.mode == Space::Anytime {
                let a = n.anytime.ok_or_else(|| {
                    GhnError::input(format!("node {} lacks anytime attributes", n.id))
                })?;
                let k = g.mode.ops().len();
                row[k + a.scale.index()] = 1.0;
                row[k + 3 + usize::from(a.early_exit)] = 1.0;
            }
        }
        Tensor::new(vec![g.len(), dim], data)
    }

    /// `h⁰ = onehot · E` for every node, using the GNN of block 0.
    pub fn init_embeddings(&self, tape: &mut Tape, g: &ArchGraph) -> Result<EmbeddingState> {
        self.init_embeddings_for(tape, g, 0)
    }

    pub(crate) fn init_embeddings_for(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        block: usize,
    ) -> Result<EmbeddingState> {
        self.check_mode(g)?;
        if g.is_empty() {
            return Err(GhnError::input("graph has no nodes"));
        }
        let onehot = tape.constant(self.onehots(g)?);
        let h = tape.matmul(onehot, self.gnn(block).embed)?;
        let rows = (0..g.len())
            .map(|i| tape.row(h, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingState {
            ids: g.nodes.iter().map(|n| n.id).collect(),
            rows,
            updates: 0,
        })
    }

    fn zero_row(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[1, self.config().hidden]))
    }

    /// Message into node at position `p`: sum of `msgs` over in-neighbours,
    /// plus `extra` for input nodes.
    fn gather_message(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        pos: &std::collections::BTreeMap<usize, usize>,
        p: usize,
        msgs: &mut dyn FnMut(&mut Tape, usize) -> Result<Var>,
        extra: Option<Var>,
    ) -> Result<Var> {
        let id = g.nodes[p].id;
        let incoming = g
            .in_neighbors(id)
            .into_iter()
            .map(|u| msgs(tape, pos[&u]))
            .collect::<Result<Vec<_>>>()?;
        let mut m = if incoming.is_empty() {
            self.zero_row(tape)
        } else {
            canonical_sum(tape, incoming)?
        };
        if let (Some(e), true) = (extra, g.is_input(id)) {
            m = tape.add(m, e)?;
        }
        Ok(m)
    }

    fn check_state(&self, g: &ArchGraph, state: &EmbeddingState) -> Result<()> {
        self.check_mode(g)?;
        if state.ids.len() != g.len() || state.ids.iter().zip(&g.nodes).any(|(&i, n)| i != n.id) {
            return Err(GhnError::input(
                "embedding state is not aligned with the graph",
            ));
        }
        Ok(())
    }

    /// Every node updated at once from the previous embeddings.
    pub fn step_synchronous(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        state: &EmbeddingState,
    ) -> Result<EmbeddingState> {
        self.step_synchronous_for(tape, g, state, 0, None)
    }

    pub(crate) fn step_synchronous_for(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        state: &EmbeddingState,
        block: usize,
        extra: Option<Var>,
    ) -> Result<EmbeddingState> {
        self.check_state(g, state)?;
        let gnn = self.gnn(block);
        let pos = g.positions();
        let h = tape.concat(&state.rows, 0)?;
        let all = gnn.msg.forward(tape, h)?;
        let mut rows_of = |tape: &mut Tape, p: usize| tape.row(all, p);
        let msgs = (0..g.len())
            .map(|p| self.gather_message(tape, g, &pos, p, &mut rows_of, extra))
            .collect::<Result<Vec<_>>>()?;
        let m = tape.concat(&msgs, 0)?;
        let next = gru_cell(tape, h, m, &gnn.gru)?;
        let rows = (0..g.len())
            .map(|i| tape.row(next, i))
            .collect::<Result<Vec<_>>>()?;
        check_finite(tape, &rows)?;
        Ok(EmbeddingState {
            ids: state.ids.clone(),
            rows,
            updates: state.updates + g.len(),
        })
    }

    /// One sweep: topological order, then reverse order without the last
    /// node, 2|V| − 1 single-node updates reading current embeddings.
    pub fn step_forward_backward(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        state: &EmbeddingState,
    ) -> Result<EmbeddingState> {
        self.step_forward_backward_for(tape, g, state, 0, None)
    }

    pub(crate) fn step_forward_backward_for(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        state: &EmbeddingState,
        block: usize,
        extra: Option<Var>,
    ) -> Result<EmbeddingState> {
        self.check_state(g, state)?;
        let gnn = self.gnn(block);
        let pos = g.positions();
        let order: Vec<usize> = topological_sort(g)?
            .into_iter()
            .map(|id| pos[&id])
            .collect();
        let mut rows = state.rows.clone();
        let mut cache: Vec<Option<Var>> = vec![None; rows.len()];
        let mut updates = state.updates;

        let update = |tape: &mut Tape,
                      rows: &mut Vec<Var>,
                      cache: &mut Vec<Option<Var>>,
                      p: usize|
         -> Result<()> {
            let m = {
                let mut msg = |tape: &mut Tape, q: usize| -> Result<Var> {
                    if let Some(v) = cache[q] {
                        return Ok(v);
                    }
                    let v = message(tape, &gnn, rows[q])?;
                    cache[q] = Some(v);
                    Ok(v)
                };
                self.gather_message(tape, g, &pos, p, &mut msg, extra)?
            };
            rows[p] = gru_cell(tape, rows[p], m, &gnn.gru)?;
            cache[p] = None;
            Ok(())
        };

        for &p in &order {
            update(tape, &mut rows, &mut cache, p)?;
            updates += 1;
        }
        let last = pivot(tape, g, &order, &rows);
        for &p in order.iter().rev().filter(|&&p| p != last) {
            update(tape, &mut rows, &mut cache, p)?;
            updates += 1;
        }
        check_finite(tape, &rows)?;
        Ok(EmbeddingState {
            ids: state.ids.clone(),
            rows,
            updates,
        })
    }

    pub fn propagate(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        scheme: PropagationScheme,
    ) -> Result<EmbeddingState> {
        self.propagate_block(tape, g, scheme, 0, None)
    }

    fn propagate_block(
        &self,
        tape: &mut Tape,
        g: &ArchGraph,
        scheme: PropagationScheme,
        block: usize,
        extra: Option<Var>,
    ) -> Result<EmbeddingState> {
        let mut state = self.init_embeddings_for(tape, g, block)?;
        match scheme {
            PropagationScheme::Synchronous { steps } => {
                for _ in 0..steps {
                    state = self.step_synchronous_for(tape, g, &state, block, extra)?;
                }
            }
            PropagationScheme::ForwardBackward { passes } => {
                for _ in 0..passes {
                    state = self.step_forward_backward_for(tape, g, &state, block, extra)?;
                }
            }
        }
        Ok(state)
    }

    /// Blocks propagated in sequence; with `handoff`, block `i` adds
    /// `M(h_{A_{i−1}})` to its input nodes' messages at every update, with
    /// `h_{A_0} = 0`.
    pub fn propagate_stacked(
        &self,
        tape: &mut Tape,
        blocks: &[&ArchGraph],
        scheme: PropagationScheme,
        handoff: bool,
    ) -> Result<Vec<EmbeddingState>> {
        if blocks.is_empty() {
            return Err(GhnError::input("no blocks to propagate"));
        }
        let mut prev = self.zero_row(tape);
        let mut states = Vec::with_capacity(blocks.len());
        for (i, g) in blocks.iter().enumerate() {
            let extra = if handoff {
                Some(message(tape, &self.gnn(i), prev)?)
            } else {
                None
            };
            let state = self.propagate_block(tape, g, scheme, i, extra)?;
            prev = graph_embedding(tape, &state)?;
            states.push(state);
        }
        Ok(states)
    }
}

fn message(tape: &mut Tape, gnn: &GnnVars, h: Var) -> Result<Var> {
    gnn.msg.forward(tape, h)
}

/// Mean of all node embeddings, as `[1, D]`.
pub fn graph_embedding(tape: &mut Tape, state: &EmbeddingState) -> Result<Var> {
    mean_rows(tape, &state.rows)
}

pub(crate) fn mean_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(GhnError::input("mean of an empty set of embeddings"));
    }
    let s = canonical_sum(tape, rows.to_vec())?;
    Ok(tape.scale(s, 1.0 / rows.len() as f64))
}
