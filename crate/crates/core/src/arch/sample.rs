use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnytimeAttrs, ArchGraph, ArchNode, Scale, Space};
use crate::error::{GhnError, Result};

/// Anytime-specific sampling knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnytimeSampling {
    pub n_exits: usize,
}

impl Default for AnytimeSampling {
    fn default() -> Self {
        AnytimeSampling { n_exits: 2 }
    }
}

/// Node counts of anytime blocks 1..3: half, then two thirds of the rest.
pub fn anytime_block_sizes(n: usize) -> [usize; 3] {
    let b1 = n.div_ceil(2);
    let b2 = ((n - b1) * 2).div_ceil(3);
    [b1, b2, n - b1 - b2]
}

/// Random block with `n_nodes` operator nodes (input nodes not counted).
///
/// Anytime graphs get `AnytimeSampling::default()` exits, capped at `n_nodes`.
pub fn sample_block(space: Space, n_nodes: usize, seed: u64) -> Result<ArchGraph> {
    match space {
        Space::Standard => sample_standard(n_nodes, seed),
        Space::Anytime => {
            let n_exits = AnytimeSampling::default().n_exits.min(n_nodes);
            sample_anytime(n_nodes, AnytimeSampling { n_exits }, seed)
        }
    }
}

fn pick_predecessors(rng: &mut ChaCha8Rng, available: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=2usize).min(available);
    let mut preds = rand::seq::index::sample(rng, available, k).into_vec();
    preds.sort_unstable();
    preds
}

fn sample_standard(n_nodes: usize, seed: u64) -> Result<ArchGraph> {
    if n_nodes == 0 {
        return Err(GhnError::input("a block needs at least one operator node"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = Space::Standard.ops();
    let mut nodes: Vec<ArchNode> = (0..2)
        .map(|id| ArchNode {
            id,
            op: Space::Standard.input_op(),
            anytime: None,
        })
        .collect();
    let mut edges = Vec::new();
    for id in 2..n_nodes + 2 {
        let op = ops[rng.gen_range(0..ops.len())];
        for p in pick_predecessors(&mut rng, id) {
            edges.push((p, id));
        }
        nodes.push(ArchNode {
            id,
            op,
            anytime: None,
        });
    }
    Ok(ArchGraph {
        nodes,
        edges,
        inputs: vec![0, 1],
        mode: Space::Standard,
        join: Space::Standard.join(),
    })
}

/// Random anytime network: node 0 is the stem, nodes `1..=n_nodes` are
/// split into three blocks by `anytime_block_sizes`.
///
/// Exits go to non-leaf nodes where possible and fall back to leaves when
/// there are too few.
pub fn sample_anytime(n_nodes: usize, cfg: AnytimeSampling, seed: u64) -> Result<ArchGraph> {
    if n_nodes == 0 {
        return Err(GhnError::input("a block needs at least one operator node"));
    }
    if cfg.n_exits > n_nodes {
        return Err(GhnError::input(format!(
            "cannot place {} exits on {} nodes",
            cfg.n_exits, n_nodes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = Space::Anytime.ops();
    let sizes = anytime_block_sizes(n_nodes);
    let mut nodes = vec![ArchNode {
        id: 0,
        op: Space::Anytime.input_op(),
        anytime: Some(AnytimeAttrs {
            block: 1,
            scale: Scale::Full,
            early_exit: false,
        }),
    }];
    let mut edges = Vec::new();
    let mut id = 1;
    for (b, &size) in sizes.iter().enumerate() {
        let block = b as u8 + 1;
        let scales = Scale::allowed_in_block(block);
        for _ in 0..size {
            let op = ops[rng.gen_range(0..ops.len())];
            let scale = scales[rng.gen_range(0..scales.len())];
            for p in pick_predecessors(&mut rng, id) {
                edges.push((p, id));
            }
            nodes.push(ArchNode {
                id,
                op,
                anytime: Some(AnytimeAttrs {
                    block,
                    scale,
                    early_exit: false,
                }),
            });
            id += 1;
        }
    }
    let mut g = ArchGraph {
        nodes,
        edges,
        inputs: vec![0],
        mode: Space::Anytime,
        join: Space::Anytime.join(),
    };

    let (mut inner, mut leaves): (Vec<usize>, Vec<usize>) =
        (1..=n_nodes).partition(|&v| g.out_degree(v) > 0);
    let exits: Vec<usize> = if inner.len() >= cfg.n_exits {
        inner.shuffle(&mut rng);
        inner.truncate(cfg.n_exits);
        inner
    } else {
        leaves.shuffle(&mut rng);
        leaves.truncate(cfg.n_exits - inner.len());
        inner.extend(leaves);
        inner
    };
    for n in &mut g.nodes {
        if exits.contains(&n.id) {
            if let Some(a) = n.anytime.as_mut() {
                a.early_exit = true;
            }
        }
    }
    Ok(g)
}
