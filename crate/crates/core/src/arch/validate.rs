use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{topological_sort, ArchGraph, Scale, Space};
use crate::error::GhnError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(usize),
    UnknownEndpoint {
        src: usize,
        dst: usize,
    },
    DuplicateEdge {
        src: usize,
        dst: usize,
    },
    SelfLoop(usize),
    Cycle(Vec<usize>),
    InputArity {
        expected: usize,
        found: usize,
    },
    UnknownInput(usize),
    InputHasIncoming(usize),
    InputOp(usize),
    OrphanNode(usize),
    Unreachable(usize),
    OpNotInSpace(usize),
    JoinMismatch,
    MissingAnytimeAttrs(usize),
    UnexpectedAnytimeAttrs(usize),
    BadBlock {
        node: usize,
        block: u8,
    },
    ScaleNotAllowed {
        node: usize,
        block: u8,
        scale: Scale,
    },
    ExitOnInput(usize),
    NoLeaves,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateId(id) => write!(f, "duplicate node id {id}"),
            UnknownEndpoint { src, dst } => {
                write!(f, "edge ({src}, {dst}) has an unknown endpoint")
            }
            DuplicateEdge { src, dst } => write!(f, "duplicate edge ({src}, {dst})"),
            SelfLoop(id) => write!(f, "self loop on node {id}"),
            Cycle(c) => write!(f, "cycle through {c:?}"),
            InputArity { expected, found } => {
                write!(f, "expected {expected} input nodes, found {found}")
            }
            UnknownInput(id) => write!(f, "input id {id} is not a node"),
            InputHasIncoming(id) => write!(f, "input node {id} has incoming edges"),
            InputOp(id) => write!(f, "input node {id} carries the wrong operator"),
            OrphanNode(id) => write!(f, "orphan node {id}: no incoming edge"),
            Unreachable(id) => write!(f, "node {id} is unreachable from the inputs"),
            OpNotInSpace(id) => write!(f, "node {id} uses an operator outside the search space"),
            JoinMismatch => write!(f, "join rule does not match the graph mode"),
            MissingAnytimeAttrs(id) => write!(f, "node {id} lacks anytime attributes"),
            UnexpectedAnytimeAttrs(id) => {
                write!(f, "node {id} has anytime attributes in a standard graph")
            }
            BadBlock { node, block } => write!(f, "node {node} is in nonexistent block {block}"),
            ScaleNotAllowed { node, block, scale } => {
                write!(
                    f,
                    "node {node}: scale not allowed in block {block} ({scale:?})"
                )
            }
            ExitOnInput(id) => write!(f, "input node {id} cannot carry an early exit"),
            NoLeaves => write!(f, "graph has no output (leaf) nodes"),
        }
    }
}

/// Structural and search-space checks. Returns every violation found.
pub fn validate(g: &ArchGraph) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for n in &g.nodes {
        if !ids.insert(n.id) {
            out.push(Violation::DuplicateId(n.id));
        }
    }

    let mut seen_edges = BTreeSet::new();
    let mut edges_ok = true;
    for &(s, d) in &g.edges {
        if !ids.contains(&s) || !ids.contains(&d) {
            out.push(Violation::UnknownEndpoint { src: s, dst: d });
            edges_ok = false;
        } else if s == d {
            out.push(Violation::SelfLoop(s));
        }
        if !seen_edges.insert((s, d)) {
            out.push(Violation::DuplicateEdge { src: s, dst: d });
        }
    }
    if edges_ok && out.iter().all(|v| !matches!(v, Violation::DuplicateId(_))) {
        if let Err(GhnError::Graph { cycle, .. }) = topological_sort(g) {
            out.push(Violation::Cycle(cycle));
        }
    }

    if g.join != g.mode.join() {
        out.push(Violation::JoinMismatch);
    }
    let expected = g.mode.num_inputs();
    if g.inputs.len() != expected {
        out.push(Violation::InputArity {
            expected,
            found: g.inputs.len(),
        });
    }
    for &i in &g.inputs {
        match g.node(i) {
            None => out.push(Violation::UnknownInput(i)),
            Some(n) => {
                if n.op != g.mode.input_op() {
                    out.push(Violation::InputOp(i));
                }
                if n.anytime.is_some_and(|a| a.early_exit) {
                    out.push(Violation::ExitOnInput(i));
                }
            }
        }
        if g.edges.iter().any(|&(_, d)| d == i) {
            out.push(Violation::InputHasIncoming(i));
        }
    }

    let mut orphans = BTreeSet::new();
    for n in &g.nodes {
        if !g.is_input(n.id) && !g.edges.iter().any(|&(_, d)| d == n.id) {
            orphans.insert(n.id);
            out.push(Violation::OrphanNode(n.id));
        }
        if g.mode.op_index(n.op).is_none() {
            out.push(Violation::OpNotInSpace(n.id));
        }
        match (g.mode, n.anytime) {
            (Space::Standard, Some(_)) => out.push(Violation::UnexpectedAnytimeAttrs(n.id)),
            (Space::Anytime, None) => out.push(Violation::MissingAnytimeAttrs(n.id)),
            (Space::Anytime, Some(a)) => {
                if !(1..=3).contains(&a.block) {
                    out.push(Violation::BadBlock {
                        node: n.id,
                        block: a.block,
                    });
                } else if !Scale::allowed_in_block(a.block).contains(&a.scale) {
                    out.push(Violation::ScaleNotAllowed {
                        node: n.id,
                        block: a.block,
                        scale: a.scale,
                    });
                }
            }
            (Space::Standard, None) => {}
        }
    }

    // reachability from the inputs, reported only for nodes that are not
    // already flagged as orphans
    let mut succ: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, d) in &g.edges {
        succ.entry(s).or_default().push(d);
    }
    let mut reached: BTreeSet<usize> = g.inputs.iter().copied().collect();
    let mut stack: Vec<usize> = g.inputs.clone();
    while let Some(u) = stack.pop() {
        for &v in succ.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
            if reached.insert(v) {
                stack.push(v);
            }
        }
    }
    for &id in &ids {
        if !reached.contains(&id) && !orphans.contains(&id) {
            out.push(Violation::Unreachable(id));
        }
    }
    if g.leaves().is_empty() {
        out.push(Violation::NoLeaves);
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{sample_block, AnytimeAttrs, ArchNode, OpKind};

    #[test]
    fn sampled_blocks_are_valid() {
        for seed in 0..50 {
            assert_eq!(
                validate(&sample_block(Space::Standard, 7, seed).unwrap()),
                Ok(())
            );
            assert_eq!(
                validate(&sample_block(Space::Anytime, 9, seed).unwrap()),
                Ok(())
            );
        }
    }

    #[test]
    fn orphan_node_is_reported() {
        let mut g = sample_block(Space::Standard, 3, 1).unwrap();
        g.nodes.push(ArchNode {
            id: 99,
            op: OpKind::Conv1x1,
            anytime: None,
        });
        let v = validate(&g).unwrap_err();
        assert!(v.contains(&Violation::OrphanNode(99)));
        assert!(v.iter().any(|x| x.to_string().contains("orphan node")));
    }

    #[test]
    fn full_scale_in_block_three_is_rejected() {
        let mut g = sample_block(Space::Anytime, 6, 3).unwrap();
        let last = g.nodes.last_mut().unwrap();
        last.anytime = Some(AnytimeAttrs {
            block: 3,
            scale: Scale::Full,
            early_exit: false,
        });
        let v = validate(&g).unwrap_err();
        assert!(v
            .iter()
            .any(|x| x.to_string().contains("scale not allowed in block")));
    }

    #[test]
    fn reports_all_violations() {
        let mut g = sample_block(Space::Standard, 2, 5).unwrap();
        g.join = crate::arch::Join::Concat;
        g.inputs.pop();
        g.edges.push((g.edges[0].1, g.edges[0].1));
        let v = validate(&g).unwrap_err();
        assert!(v.len() >= 3, "{v:?}");
        assert!(v.contains(&Violation::JoinMismatch));
        assert!(v.iter().any(|x| matches!(x, Violation::InputArity { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::SelfLoop(_))));
    }
}
