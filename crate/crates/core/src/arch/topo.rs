use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use super::ArchGraph;
use crate::error::{GhnError, Result};

/// Kahn's algorithm with ties broken by ascending node id.
pub fn topological_sort(g: &ArchGraph) -> Result<Vec<usize>> {
    let ids: BTreeSet<usize> = g.nodes.iter().map(|n| n.id).collect();
    let mut indeg: BTreeMap<usize, usize> = ids.iter().map(|&id| (id, 0)).collect();
    let mut succ: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, d) in &g.edges {
        if !ids.contains(&s) || !ids.contains(&d) {
            return Err(GhnError::Graph {
                message: format!("edge ({s}, {d}) references an unknown node"),
                cycle: vec![],
            });
        }
        *indeg.get_mut(&d).unwrap() += 1;
        succ.entry(s).or_default().push(d);
    }

    let mut ready: BinaryHeap<Reverse<usize>> = indeg
        .iter()
        .filter(|&(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &d in succ.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
            let e = indeg.get_mut(&d).unwrap();
            *e -= 1;
            if *e == 0 {
                ready.push(Reverse(d));
            }
        }
    }

    if order.len() == ids.len() {
        return Ok(order);
    }
    let remaining: BTreeSet<usize> = indeg
        .iter()
        .filter(|&(_, &d)| d > 0)
        .map(|(&id, _)| id)
        .collect();
    let cycle = find_cycle(&remaining, &succ);
    Err(GhnError::Graph {
        message: format!("cycle through nodes {cycle:?}"),
        cycle,
    })
}

/// Every node left after Kahn's algorithm has a predecessor that is also
/// left, so walking predecessors must revisit a node.
fn find_cycle(remaining: &BTreeSet<usize>, succ: &BTreeMap<usize, Vec<usize>>) -> Vec<usize> {
    let mut pred: BTreeMap<usize, usize> = BTreeMap::new();
    for (&s, ds) in succ {
        if !remaining.contains(&s) {
            continue;
        }
        for &d in ds {
            if remaining.contains(&d) {
                pred.entry(d).or_insert(s);
            }
        }
    }
    let Some(&start) = remaining.iter().next() else {
        return vec![];
    };
    let mut seen = BTreeMap::new();
    let mut path = Vec::new();
    let mut cur = start;
    while !seen.contains_key(&cur) {
        seen.insert(cur, path.len());
        path.push(cur);
        cur = pred[&cur];
    }
    let mut cycle = path[seen[&cur]..].to_vec();
    cycle.reverse();
    cycle
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchNode, Join, OpKind, Space};

    fn graph(ids: &[usize], edges: &[(usize, usize)]) -> ArchGraph {
        ArchGraph {
            nodes: ids
                .iter()
                .map(|&id| ArchNode {
                    id,
                    op: OpKind::Conv1x1,
                    anytime: None,
                })
                .collect(),
            edges: edges.to_vec(),
            inputs: vec![],
            mode: Space::Standard,
            join: Join::Sum,
        }
    }

    #[test]
    fn chain() {
        let g = graph(&[2, 0, 1], &[(0, 1), (1, 2)]);
        assert_eq!(topological_sort(&g).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn diamond_breaks_ties_by_id() {
        let g = graph(&[0, 1, 2, 3], &[(0, 2), (0, 1), (2, 3), (1, 3)]);
        assert_eq!(topological_sort(&g).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_cycle_is_reported() {
        let g = graph(&[0, 1, 2], &[(0, 1), (1, 2), (2, 1)]);
        match topological_sort(&g) {
            Err(GhnError::Graph { cycle, .. }) => {
                let mut c = cycle.clone();
                c.sort_unstable();
                assert_eq!(c, vec![1, 2]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn longer_cycle_witness_is_a_cycle() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 1), (3, 4)];
        let g = graph(&[0, 1, 2, 3, 4], &edges);
        let Err(GhnError::Graph { cycle, .. }) = topological_sort(&g) else {
            panic!("expected cycle");
        };
        assert!(!cycle.is_empty());
        for i in 0..cycle.len() {
            let e = (cycle[i], cycle[(i + 1) % cycle.len()]);
            assert!(edges.contains(&e), "{cycle:?}");
        }
    }
}
