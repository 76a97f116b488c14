use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    sample_anytime, sample_block, serialize, AnytimeSampling, ArchGraph, NetworkSpec, Space,
};
use crate::error::{GhnError, Result};
use crate::ghn::{EmbeddingState, GeneratedWeights, Ghn, GhnModel, PropagationScheme, StackMode};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape};

use super::data::{Batch, Dataset};
use super::net::{argmax_rows, assemble, forward_loss, CandidateNet, OwnedWeights};

/// Deterministic 64-bit stream derived from a seed and two indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// How candidate networks are built around a sampled graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub channels: usize,
    /// Copies of the block (standard space only).
    pub repeat: usize,
    pub stem_stride: usize,
    /// Early exits per anytime graph.
    pub exits: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            channels: 8,
            repeat: 1,
            stem_stride: 2,
            exits: 2,
        }
    }
}

impl NetShape {
    pub fn spec(&self, g: ArchGraph, classes: usize) -> Result<NetworkSpec> {
        let repeat = if g.mode == Space::Anytime {
            1
        } else {
            self.repeat
        };
        Ok(crate::arch::stack_blocks(g, repeat, &[], self.channels)?
            .with_classes(classes)
            .with_stem_stride(self.stem_stride))
    }

    pub fn sample(&self, space: Space, n: usize, seed: u64) -> Result<ArchGraph> {
        match space {
            Space::Standard => sample_block(space, n, seed),
            Space::Anytime => sample_anytime(
                n,
                AnytimeSampling {
                    n_exits: self.exits.min(n),
                },
                seed,
            ),
        }
    }
}

/// Everything that shapes how the GHN is applied to a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GhnUse {
    pub scheme: PropagationScheme,
    pub stack: StackMode,
}

impl Default for GhnUse {
    fn default() -> Self {
        GhnUse {
            scheme: PropagationScheme::default(),
            stack: StackMode::SpPe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GhnTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Nodes per sampled graph are drawn uniformly from `1..=n_max`.
    pub n_max: usize,
    pub seed: u64,
}

impl Default for GhnTrainConfig {
    fn default() -> Self {
        GhnTrainConfig {
            steps: 15_000,
            batch_size: 64,
            lr: 1e-3,
            n_max: 7,
            seed: 0,
        }
    }
}

impl GhnTrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GhnError::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.n_max == 0 {
            return Err(GhnError::config("batch size and n_max must be positive"));
        }
        Ok(())
    }

    /// Initial rate, halved once half of the steps are done and again at
    /// three quarters.
    pub fn lr_at(&self, step: u64) -> f64 {
        let mut lr = self.lr;
        if 2 * step >= self.steps {
            lr /= 2.0;
        }
        if 4 * step >= 3 * self.steps {
            lr /= 2.0;
        }
        lr
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub nodes: usize,
}

fn embed(
    ghn: &Ghn,
    tape: &mut Tape,
    spec: &NetworkSpec,
    usage: GhnUse,
) -> Result<Vec<EmbeddingState>> {
    let blocks = vec![&spec.block; spec.repeat];
    let handoff = usage.stack.handoff() && spec.repeat > 1;
    ghn.propagate_stacked(tape, &blocks, usage.scheme, handoff)
}

/// Embed, generate and assemble `spec` on `tape`.
pub fn generate_candidate(
    ghn: &Ghn,
    tape: &mut Tape,
    spec: &NetworkSpec,
    input: [usize; 3],
    usage: GhnUse,
) -> Result<CandidateNet> {
    let plan = spec.plan(input)?;
    let states = embed(ghn, tape, spec, usage)?;
    let weights = ghn.generate_weights(tape, &plan, &states)?;
    assemble(tape, spec, plan, weights)
}

/// Loss of `spec` under weights generated by `model` together with the
/// gradient of every GHN parameter.
pub fn ghn_gradients(
    model: &GhnModel,
    spec: &NetworkSpec,
    batch: &Batch,
    usage: GhnUse,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let ghn = model.bind(&mut tape);
    let input = batch_input(batch)?;
    let net = generate_candidate(&ghn, &mut tape, spec, input, usage)?;
    let (_, loss) = forward_loss(&mut tape, &net, batch)?;
    let value = tape.value(loss.total).item();
    if !value.is_finite() {
        return Err(GhnError::Training {
            message: format!("non-finite loss {value}"),
            graph: serialize(&spec.block),
        });
    }
    tape.backward(loss.total)?;
    Ok((value, model.params.grads(&tape, &ghn.vars)))
}

/// Forward-only loss value, used as the finite-difference oracle.
pub fn ghn_loss(model: &GhnModel, spec: &NetworkSpec, batch: &Batch, usage: GhnUse) -> Result<f64> {
    let mut tape = Tape::new();
    let ghn = model.bind_frozen(&mut tape);
    let net = generate_candidate(&ghn, &mut tape, spec, batch_input(batch)?, usage)?;
    let (_, loss) = forward_loss(&mut tape, &net, batch)?;
    Ok(tape.value(loss.total).item())
}

fn batch_input(batch: &Batch) -> Result<[usize; 3]> {
    match batch.images.shape() {
        [_, c, h, w] => Ok([*c, *h, *w]),
        s => Err(GhnError::dim(format!(
            "batch images must be 4-d, got {s:?}"
        ))),
    }
}

/// One end-to-end step: generate, assemble, backpropagate through the
/// candidate into the GHN and apply one Adam update. Returns the loss.
pub fn ghn_train_step(
    model: &mut GhnModel,
    adam: &mut AdamState,
    spec: &NetworkSpec,
    batch: &Batch,
    usage: GhnUse,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = ghn_gradients(model, spec, batch, usage)?;
    adam.step(&mut model.params, &grads, AdamConfig::default().with_lr(lr))
        .map_err(|e| GhnError::Training {
            message: e.to_string(),
            graph: serialize(&spec.block),
        })?;
    Ok(loss)
}

/// Graph and minibatch used at `step`; depends only on the seed and step.
pub fn step_sample(
    cfg: &GhnTrainConfig,
    shape: &NetShape,
    space: Space,
    train: &Dataset,
    step: u64,
) -> Result<(NetworkSpec, Batch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, step));
    let n = rng.gen_range(1..=cfg.n_max);
    let g = shape.sample(space, n, rng.gen())?;
    let spec = shape.spec(g, train.classes)?;
    let k = cfg.batch_size.min(train.len());
    let mut ix = sample(&mut rng, train.len(), k).into_vec();
    ix.sort_unstable();
    Ok((spec, train.batch(&ix)?))
}

/// Runs steps `start..end` of a training schedule, calling `on_step` after
/// each one.
#[allow(clippy::too_many_arguments)]
pub fn train_ghn(
    model: &mut GhnModel,
    adam: &mut AdamState,
    cfg: &GhnTrainConfig,
    shape: &NetShape,
    usage: GhnUse,
    train: &Dataset,
    range: std::ops::Range<u64>,
    mut on_step: impl FnMut(&StepLog, &GhnModel, &AdamState) -> Result<()>,
) -> Result<()> {
    cfg.check()?;
    let space = model.config.space;
    for step in range {
        let (spec, batch) = step_sample(cfg, shape, space, train, step)?;
        let lr = cfg.lr_at(step);
        let loss = ghn_train_step(model, adam, &spec, &batch, usage, lr)?;
        let log = StepLog {
            step: step + 1,
            loss,
            lr,
            nodes: spec.block.len() - spec.block.inputs.len(),
        };
        on_step(&log, model, adam)?;
    }
    Ok(())
}

/// Accuracy over a whole split plus per-exit accuracies (anytime).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `(flops, accuracy)` for every exit and the final head, ascending in
    /// FLOPs. Standard networks carry the head only.
    pub curve: Vec<(u64, f64)>,
}

const EVAL_BATCH: usize = 125;

fn evaluate(tape: &mut Tape, net: &CandidateNet, data: &Dataset) -> Result<Evaluation> {
    let mark = tape.len();
    let mut head_hits = 0usize;
    let mut exit_hits = vec![0usize; net.exits.len()];
    for batch in data.batches(EVAL_BATCH)? {
        let x = tape.constant(batch.images.clone());
        let out = net.forward(tape, x)?;
        let count = |tape: &Tape, v| {
            argmax_rows(tape.value(v))
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count()
        };
        head_hits += count(tape, out.logits);
        for (h, &(_, v)) in exit_hits.iter_mut().zip(&out.exits) {
            *h += count(tape, v);
        }
        tape.truncate(mark);
    }
    let n = data.len() as f64;
    let report = net.plan.flop_report();
    let mut curve: Vec<(u64, f64)> = report
        .exits
        .iter()
        .zip(&exit_hits)
        .map(|(e, &h)| (e.flops, h as f64 / n))
        .collect();
    let accuracy = head_hits as f64 / n;
    curve.push((report.total, accuracy));
    curve.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(Evaluation { accuracy, curve })
}

/// Validation accuracy of `spec` under weights generated by `model`.
pub fn eval_with_generated(
    model: &GhnModel,
    spec: &NetworkSpec,
    val: &Dataset,
    usage: GhnUse,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let ghn = model.bind_frozen(&mut tape);
    let net = generate_candidate(&ghn, &mut tape, spec, val.shape, usage)?;
    evaluate(&mut tape, &net, val)
}

/// Settings of the ground-truth training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            steps: 500,
            batch_size: 64,
            lr: 1e-2,
        }
    }
}

/// Trains independently initialized weights of `spec` with Adam and
/// returns the validation evaluation.
pub fn sgd_train_candidate(
    spec: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<Evaluation> {
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(GhnError::config(
            "sgd batch size and learning rate must be positive",
        ));
    }
    let plan = spec.plan(train.shape)?;
    let owned = OwnedWeights::init(&plan, derive_seed(seed, 2, 0));
    let keys: Vec<_> = owned.tensors.keys().map(|k| (*k, k.to_string())).collect();
    let mut store = ParamStore::new();
    for (k, t) in owned.tensors {
        store.insert(k.to_string(), t);
    }
    let bind = |tape: &mut Tape, store: &ParamStore, frozen: bool| {
        let vars = if frozen {
            store.bind_frozen(tape)
        } else {
            store.bind(tape)
        };
        let weights = GeneratedWeights {
            slots: keys.iter().map(|(k, n)| (*k, vars.get(n))).collect(),
        };
        (vars, weights)
    };
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
    let k = cfg.batch_size.min(train.len());
    for _ in 0..cfg.steps {
        let mut ix = sample(&mut rng, train.len(), k).into_vec();
        ix.sort_unstable();
        let batch = train.batch(&ix)?;
        let mut tape = Tape::new();
        let (vars, weights) = bind(&mut tape, &store, false);
        let net = assemble(&tape, spec, plan.clone(), weights)?;
        let (_, loss) = forward_loss(&mut tape, &net, &batch)?;
        let value = tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(GhnError::Training {
                message: format!("non-finite loss {value} in ground-truth training"),
                graph: serialize(&spec.block),
            });
        }
        tape.backward(loss.total)?;
        let grads = store.grads(&tape, &vars);
        adam.step(&mut store, &grads, AdamConfig::default().with_lr(cfg.lr))?;
    }
    let mut tape = Tape::new();
    let (_, weights) = bind(&mut tape, &store, true);
    let net = assemble(&tape, spec, plan, weights)?;
    evaluate(&mut tape, &net, val)
}

/// One evaluated candidate, stored as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub graph_hash: String,
    pub predicted_acc: f64,
    pub true_acc: Option<f64>,
    pub flops: u64,
    pub seed: u64,
}

pub fn append_records(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GhnError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| GhnError::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| GhnError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| GhnError::Parse {
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}
