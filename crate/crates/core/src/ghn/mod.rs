//! Graph hypernetwork: a GNN homomorphic to the candidate graph whose final
//! node embeddings are mapped to candidate weights by a shared MLP.

mod checkpoint;
mod generate;
mod propagate;

pub use checkpoint::{Checkpoint, CKPT_SCHEMA};
pub use generate::GeneratedWeights;
pub use propagate::{graph_embedding, EmbeddingState, PropagationScheme, StackMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Role, Scale, Space};
use crate::error::{GhnError, Result};
use crate::tensor::nn::{GruParams, Mlp2};
use crate::tensor::{ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhnConfig {
    pub space: Space,
    pub hidden: usize,
    pub hyper_hidden: usize,
    /// Channel width of one generated slab.
    pub block_width: usize,
    /// Largest slab index along either channel axis.
    pub max_tiles: usize,
    /// Independent GNN parameter sets; block `i` uses set `min(i, copies − 1)`.
    pub gnn_copies: usize,
}

impl GhnConfig {
    pub fn new(space: Space) -> Self {
        GhnConfig {
            space,
            hidden: 32,
            hyper_hidden: 64,
            block_width: 8,
            max_tiles: 16,
            gnn_copies: 1,
        }
    }

    /// Width of the initial one-hot node descriptor.
    pub fn onehot_dim(&self) -> usize {
        match self.space {
            Space::Standard => Space::Standard.ops().len(),
            Space::Anytime => Space::Anytime.ops().len() + Scale::ALL.len() + 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.space.max_kernel()
    }

    /// Elements in one node-head output row.
    pub fn slab_len(&self) -> usize {
        self.block_width * self.block_width * self.kernel() * self.kernel()
    }

    /// Role and tile indicators appended to an embedding before H.
    pub fn suffix_len(&self) -> usize {
        Role::ALL.len() + 2 * self.max_tiles
    }

    fn check(&self) -> Result<()> {
        if self.hidden == 0
            || self.hyper_hidden == 0
            || self.block_width == 0
            || self.max_tiles == 0
            || self.gnn_copies == 0
        {
            return Err(GhnError::config("GHN sizes must all be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhnModel {
    pub config: GhnConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

fn gnn_prefix(copy: usize) -> String {
    format!("gnn{copy}")
}

impl GhnModel {
    pub fn new(config: GhnConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let hh = config.hyper_hidden;
        let mut p = ParamStore::new();
        for copy in 0..config.gnn_copies {
            let g = gnn_prefix(copy);
            p.insert(
                format!("{g}.embed"),
                fan_in(&mut rng, config.onehot_dim(), d),
            );
            for gate in ["z", "r", "h"] {
                p.insert(format!("{g}.gru.w_{gate}"), fan_in(&mut rng, 2 * d, d));
                p.insert(format!("{g}.gru.b_{gate}"), Tensor::zeros(&[d]));
            }
            p.insert(format!("{g}.msg.w1"), fan_in(&mut rng, d, d));
            p.insert(format!("{g}.msg.b1"), Tensor::zeros(&[d]));
            p.insert(format!("{g}.msg.w2"), fan_in(&mut rng, d, d));
            p.insert(format!("{g}.msg.b2"), Tensor::zeros(&[d]));
        }
        let mut head = |p: &mut ParamStore, name: &str, input: usize, out: usize| {
            p.insert(format!("{name}.w1"), fan_in(&mut rng, input, hh));
            p.insert(format!("{name}.b1"), Tensor::zeros(&[hh]));
            let mut w2 = fan_in(&mut rng, hh, out);
            w2.data_mut().iter_mut().for_each(|v| *v *= 0.01);
            p.insert(format!("{name}.w2"), w2);
            p.insert(format!("{name}.b2"), Tensor::zeros(&[out]));
        };
        head(&mut p, "hyper", d + config.suffix_len(), config.slab_len());
        if config.space == Space::Anytime {
            let bw = config.block_width;
            head(&mut p, "edge", 2 * d + 2 * config.max_tiles, bw * bw);
        }
        Ok(GhnModel { config, params: p })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Differentiable binding for training.
    pub fn bind(&self, tape: &mut Tape) -> Ghn<'_> {
        Ghn {
            model: self,
            vars: self.params.bind(tape),
        }
    }

    /// Constant binding for evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Ghn<'_> {
        Ghn {
            model: self,
            vars: self.params.bind_frozen(tape),
        }
    }
}

/// A model whose parameters live on a tape.
pub struct Ghn<'m> {
    pub model: &'m GhnModel,
    pub vars: ParamVars,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GnnVars {
    pub embed: Var,
    pub gru: GruParams,
    pub msg: Mlp2,
}

impl Ghn<'_> {
    pub fn config(&self) -> &GhnConfig {
        &self.model.config
    }

    pub(crate) fn gnn(&self, block: usize) -> GnnVars {
        let copy = block.min(self.config().gnn_copies - 1);
        let g = gnn_prefix(copy);
        let v = |s: &str| self.vars.get(&format!("{g}.{s}"));
        GnnVars {
            embed: v("embed"),
            gru: GruParams {
                w_z: v("gru.w_z"),
                b_z: v("gru.b_z"),
                w_r: v("gru.w_r"),
                b_r: v("gru.b_r"),
                w_h: v("gru.w_h"),
                b_h: v("gru.b_h"),
            },
            msg: Mlp2 {
                w1: v("msg.w1"),
                b1: v("msg.b1"),
                w2: v("msg.w2"),
                b2: v("msg.b2"),
            },
        }
    }

    pub(crate) fn head(&self, name: &str) -> Option<Mlp2> {
        Some(Mlp2 {
            w1: self.vars.try_get(&format!("{name}.w1"))?,
            b1: self.vars.try_get(&format!("{name}.b1"))?,
            w2: self.vars.try_get(&format!("{name}.w2"))?,
            b2: self.vars.try_get(&format!("{name}.b2"))?,
        })
    }
}
