use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stats::{anytime_auc, one_sided_p, pearson_r};
use crate::arch::{graph_hash, serialize, NetworkSpec, Space};
use crate::candidate::{
    derive_seed, eval_with_generated, sgd_train_candidate, Dataset, Evaluation, GhnUse, NetShape,
    SgdConfig,
};
use crate::error::{GhnError, Result};
use crate::ghn::GhnModel;

/// Data and network settings shared by every evaluation in a run.
#[derive(Clone, Debug)]
pub struct Bench<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub shape: NetShape,
    pub usage: GhnUse,
    /// Nodes per evaluated graph.
    pub nodes: usize,
    pub sgd: SgdConfig,
}

impl Bench<'_> {
    /// Candidate `index` of the stream selected by `seed`.
    pub fn candidate(&self, space: Space, seed: u64, index: u64) -> Result<NetworkSpec> {
        let g = self
            .shape
            .sample(space, self.nodes, derive_seed(seed, 10, index))?;
        self.shape.spec(g, self.train.classes)
    }

    pub fn candidates(&self, space: Space, seed: u64, n: usize) -> Result<Vec<NetworkSpec>> {
        (0..n as u64)
            .map(|i| self.candidate(space, seed, i))
            .collect()
    }

    pub fn predict(&self, model: &GhnModel, spec: &NetworkSpec) -> Result<Evaluation> {
        eval_with_generated(model, spec, self.val, self.usage)
    }

    /// Ground-truth accuracy, trained with a seed tied to the graph so that
    /// the same architecture always gets the same number.
    pub fn truth(&self, spec: &NetworkSpec) -> Result<Evaluation> {
        let h = graph_hash(&spec.block);
        let seed = u64::from_str_radix(&h[..16], 16).expect("hex digest");
        sgd_train_candidate(spec, self.train, self.val, &self.sgd, seed)
    }

    /// Identifies the ground-truth setting: data, network shape and budget.
    fn truth_context(&self) -> String {
        let mut d = Sha256::new();
        d.update(self.train.to_bytes());
        d.update(self.val.to_bytes());
        let data = hex::encode(&d.finalize()[..8]);
        format!(
            "{data}/c{}r{}s{}e{}/steps{}b{}lr{}",
            self.shape.channels,
            self.shape.repeat,
            self.shape.stem_stride,
            self.shape.exits,
            self.sgd.steps,
            self.sgd.batch_size,
            self.sgd.lr
        )
    }
}

/// Score used to rank a candidate: head accuracy for standard networks,
/// area under the exit curve for anytime ones.
pub fn selection_score(space: Space, e: &Evaluation) -> Result<f64> {
    match space {
        Space::Standard => Ok(e.accuracy),
        Space::Anytime => {
            let pts: Vec<(f64, f64)> = e.curve.iter().map(|&(f, a)| (f as f64, a)).collect();
            anytime_auc(&pts)
        }
    }
}

/// Ground-truth evaluations persisted across runs, keyed by graph and
/// training setting.
#[derive(Debug, Default)]
pub struct TruthCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, CachedTruth>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CachedTruth {
    accuracy: f64,
    curve: Vec<(u64, f64)>,
}

impl TruthCache {
    pub fn in_memory() -> Self {
        TruthCache::default()
    }

    /// Loads `path` if it exists; new entries are written back by [`TruthCache::save`].
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| GhnError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| GhnError::Parse {
                location: path.display().to_string(),
                message: e.to_string(),
            })?
        } else {
            BTreeMap::new()
        };
        Ok(TruthCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn save(&self) -> Result<()> {
        if let Some(path) = &self.path {
            let text = serde_json::to_string_pretty(&*self.entries.lock().unwrap())
                .expect("cache serializes");
            std::fs::write(path, text).map_err(|e| GhnError::io(path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truth(&self, bench: &Bench, spec: &NetworkSpec) -> Result<Evaluation> {
        let key = format!("{}/{}", bench.truth_context(), graph_hash(&spec.block));
        if let Some(c) = self.entries.lock().unwrap().get(&key) {
            return Ok(Evaluation {
                accuracy: c.accuracy,
                curve: c.curve.clone(),
            });
        }
        let e = bench.truth(spec)?;
        self.entries.lock().unwrap().insert(
            key,
            CachedTruth {
                accuracy: e.accuracy,
                curve: e.curve.clone(),
            },
        );
        Ok(e)
    }

    /// Ground truth for many candidates, in parallel, in input order.
    pub fn truths(&self, bench: &Bench, specs: &[NetworkSpec]) -> Result<Vec<Evaluation>> {
        let out = specs.par_iter().map(|s| self.truth(bench, s)).collect();
        self.save()?;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchCandidate {
    /// Position in the sampling stream.
    pub index: usize,
    pub graph_hash: String,
    pub graph: String,
    pub predicted_acc: f64,
    /// Ranking key: `predicted_acc`, or the predicted curve's AUC (anytime).
    pub score: f64,
    pub flops: u64,
    /// `(flops, accuracy)` per exit (anytime).
    pub curve: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub space: Space,
    pub seed: u64,
    /// Ranked by score, descending, ties by graph hash.
    pub candidates: Vec<SearchCandidate>,
    pub top_k: Vec<String>,
    pub config: serde_json::Value,
    pub seconds: f64,
}

/// Sample `m` graphs, score each under generated weights and rank them.
pub fn random_search(
    model: &GhnModel,
    bench: &Bench,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<SearchReport> {
    if m < k {
        return Err(GhnError::input(format!(
            "cannot select top {k} of {m} candidates"
        )));
    }
    let space = model.config.space;
    let start = std::time::Instant::now();
    let mut candidates = (0..m)
        .into_par_iter()
        .map(|i| {
            let spec = bench.candidate(space, seed, i as u64)?;
            let e = bench.predict(model, &spec)?;
            Ok(SearchCandidate {
                index: i,
                graph_hash: graph_hash(&spec.block),
                graph: serialize(&spec.block),
                predicted_acc: e.accuracy,
                score: selection_score(space, &e)?,
                flops: spec.plan(bench.val.shape)?.flop_report().total,
                curve: e.curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rank(&mut candidates);
    let top_k = candidates[..k]
        .iter()
        .map(|c| c.graph_hash.clone())
        .collect();
    Ok(SearchReport {
        space,
        seed,
        candidates,
        top_k,
        config: serde_json::json!({
            "m": m,
            "k": k,
            "nodes": bench.nodes,
            "shape": bench.shape,
            "scheme": bench.usage.scheme,
            "stack": bench.usage.stack,
        }),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn rank(c: &mut [SearchCandidate]) {
    c.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.graph_hash.cmp(&b.graph_hash))
            .then_with(|| a.index.cmp(&b.index))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub graph_hash: String,
    pub predicted: f64,
    pub true_acc: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<CorrelationPair>,
    pub r_all: f64,
    /// Over the better half of the pairs by true accuracy.
    pub r_top: f64,
    /// One-sided p-value of `r_all > 0`.
    pub p_all: f64,
    pub n: usize,
}

impl CorrelationReport {
    pub fn from_pairs(pairs: Vec<CorrelationPair>) -> Result<Self> {
        let n = pairs.len();
        let xs: Vec<f64> = pairs.iter().map(|p| p.predicted).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.true_acc).collect();
        let r_all = pearson_r(&xs, &ys)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ys[b].total_cmp(&ys[a]).then(a.cmp(&b)));
        let top = &order[..n / 2];
        let r_top = pearson_r(
            &top.iter().map(|&i| xs[i]).collect::<Vec<_>>(),
            &top.iter().map(|&i| ys[i]).collect::<Vec<_>>(),
        )?;
        Ok(CorrelationReport {
            r_all,
            r_top,
            p_all: one_sided_p(r_all, n)?,
            n,
            pairs,
        })
    }
}

/// Predicted-vs-true correlation over `specs`, with any surrogate.
pub fn correlate_with<F>(
    bench: &Bench,
    cache: &TruthCache,
    specs: &[NetworkSpec],
    surrogate: F,
) -> Result<CorrelationReport>
where
    F: Fn(&NetworkSpec) -> Result<f64> + Sync,
{
    let truths = cache.truths(bench, specs)?;
    let predicted = specs
        .par_iter()
        .map(&surrogate)
        .collect::<Result<Vec<_>>>()?;
    let pairs = specs
        .iter()
        .zip(predicted)
        .zip(truths)
        .map(|((s, p), t)| {
            Ok(CorrelationPair {
                graph_hash: graph_hash(&s.block),
                predicted: p,
                true_acc: t.accuracy,
                flops: s.plan(bench.val.shape)?.flop_report().total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CorrelationReport::from_pairs(pairs)
}

/// `n` fresh graphs: GHN-predicted accuracy against ground-truth training.
pub fn correlation_benchmark(
    model: &GhnModel,
    bench: &Bench,
    cache: &TruthCache,
    n: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let specs = bench.candidates(model.config.space, seed, n)?;
    correlate_with(bench, cache, &specs, |s| {
        Ok(bench.predict(model, s)?.accuracy)
    })
}
