//! Run configuration: a TOML file with one table per section. Every key is
//! also a command-line flag `--<section>-<key>`.

use std::path::PathBuf;

use ghn::arch::Space;
use ghn::candidate::{GhnTrainConfig, GhnUse, NetShape, SgdConfig, TaskSpec};
use ghn::ghn::{GhnConfig, PropagationScheme, StackMode};
use ghn::search::AblationAxis;
use ghn::{GhnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: String,
    pub seed: u64,
    pub out: String,
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: "standard".into(),
            seed: 0,
            out: "runs/default".into(),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GhnSection {
    pub hidden: usize,
    pub hyper_hidden: usize,
    pub block_width: usize,
    pub max_tiles: usize,
    pub scheme: String,
    pub steps: usize,
    pub stack: String,
}

impl Default for GhnSection {
    fn default() -> Self {
        GhnSection {
            hidden: 32,
            hyper_hidden: 64,
            block_width: 8,
            max_tiles: 16,
            scheme: "forward-backward".into(),
            steps: 5,
            stack: "sp-pe".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub n_max: usize,
    pub checkpoint_every: u64,
    pub resume: bool,
    /// Stop once this many steps are done (0 = run the full schedule).
    pub stop_after: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = GhnTrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            n_max: t.n_max,
            checkpoint_every: 500,
            resume: false,
            stop_after: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub nodes: usize,
    pub sgd_steps: u64,
    pub sgd_batch: usize,
    pub sgd_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = SgdConfig::default();
        EvalSection {
            nodes: 7,
            sgd_steps: s.steps,
            sgd_batch: s.batch_size,
            sgd_lr: s.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub m: usize,
    pub k: usize,
    /// Also train the top-k and the first k sampled candidates from scratch.
    pub verify: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            m: 100,
            k: 10,
            verify: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateSection {
    pub n: usize,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        CorrelateSection { n: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub axis: String,
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            axis: "scheme".into(),
            grid: vec![5],
            seeds: vec![0, 1, 2],
            n: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsSection {
    /// Block graph file; empty samples one from `run.seed`.
    pub graph: String,
    pub repeat: usize,
    pub reductions: Vec<usize>,
    pub channels: usize,
}

impl Default for FlopsSection {
    fn default() -> Self {
        FlopsSection {
            graph: String::new(),
            repeat: 18,
            reductions: vec![6, 12],
            channels: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskSpec,
    pub net: NetShape,
    pub ghn: GhnSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub search: SearchSection,
    pub correlate: CorrelateSection,
    pub ablate: AblateSection,
    pub flops: FlopsSection,
}

/// Help text for every `(section, key)`; kept in step with the structs by
/// a unit test.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run", "mode", "search space: standard | anytime"),
    ("run", "seed", "master seed (falls back to GHN_SEED)"),
    ("run", "out", "output directory"),
    (
        "run",
        "threads",
        "worker threads for evaluation (0 = all cores)",
    ),
    ("task", "size", "image side in pixels"),
    ("task", "orientations", "grating orientations"),
    (
        "task",
        "frequencies",
        "grating frequencies, cycles per image side",
    ),
    ("task", "train", "training samples"),
    ("task", "val", "validation samples"),
    ("task", "noise", "pixel noise standard deviation"),
    ("task", "amp_lo", "smallest grating amplitude"),
    ("task", "amp_hi", "largest grating amplitude"),
    ("net", "channels", "candidate channel width"),
    ("net", "repeat", "stacked copies of a standard block"),
    ("net", "stem_stride", "stride of the 3x3 stem"),
    ("net", "exits", "early exits per anytime network"),
    ("ghn", "hidden", "node embedding size"),
    (
        "ghn",
        "hyper_hidden",
        "hidden width of the weight-generating MLP",
    ),
    ("ghn", "block_width", "channel width of one generated slab"),
    (
        "ghn",
        "max_tiles",
        "largest slab count along a channel axis",
    ),
    (
        "ghn",
        "scheme",
        "propagation: forward-backward | synchronous",
    ),
    (
        "ghn",
        "steps",
        "sweeps (forward-backward) or steps (synchronous)",
    ),
    (
        "ghn",
        "stack",
        "stacked blocks: independent | pe-only | sp-pe",
    ),
    ("train", "steps", "GHN training steps"),
    ("train", "batch_size", "images per GHN step"),
    ("train", "lr", "initial Adam learning rate"),
    ("train", "n_max", "largest sampled node count"),
    ("train", "checkpoint_every", "steps between checkpoints"),
    (
        "train",
        "resume",
        "continue from the checkpoint in the output directory",
    ),
    (
        "train",
        "stop_after",
        "stop after this many steps (0 = full schedule)",
    ),
    ("eval", "nodes", "nodes per evaluated graph"),
    ("eval", "sgd_steps", "ground-truth Adam steps"),
    ("eval", "sgd_batch", "ground-truth batch size"),
    ("eval", "sgd_lr", "ground-truth learning rate"),
    ("search", "m", "sampled candidates"),
    ("search", "k", "candidates kept"),
    ("search", "verify", "train top-k and random-k from scratch"),
    ("correlate", "n", "benchmark graphs"),
    ("ablate", "axis", "nodes | steps | scheme | stacked"),
    ("ablate", "grid", "axis values"),
    ("ablate", "seeds", "GHN seeds per setting"),
    ("ablate", "n", "benchmark graphs per setting"),
    ("flops", "graph", "block graph JSON (empty = sample one)"),
    ("flops", "repeat", "blocks in the audited network"),
    ("flops", "reductions", "1-based reduction block positions"),
    ("flops", "channels", "stem width of the audited network"),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!("config bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "config".into());
            GhnError::config(format!("{at}: {}", e.message()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replace `section.key` by `raw`, parsed to the type of the current value.
    pub fn set(&mut self, section: &str, key: &str, raw: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).expect("config serializes");
        let slot = doc
            .get_mut(section)
            .and_then(|s| s.get_mut(key))
            .ok_or_else(|| GhnError::config(format!("unknown key `{section}.{key}`")))?;
        let bad =
            |what: &str| GhnError::config(format!("`{section}.{key}` expects {what}, got `{raw}`"));
        *slot = match slot {
            toml::Value::String(_) => toml::Value::String(raw.to_string()),
            toml::Value::Integer(_) => {
                toml::Value::Integer(raw.parse().map_err(|_| bad("an integer"))?)
            }
            toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad("a number"))?),
            toml::Value::Boolean(_) => {
                toml::Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?)
            }
            toml::Value::Array(items) => {
                let float = items
                    .first()
                    .map(|v| v.is_float())
                    .unwrap_or(key == "frequencies");
                let parts = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
                let vals: std::result::Result<Vec<toml::Value>, _> = if float {
                    parts
                        .map(|p| p.parse::<f64>().map(toml::Value::Float))
                        .map(|r| r.map_err(|_| ()))
                        .collect()
                } else {
                    parts
                        .map(|p| p.parse::<i64>().map(toml::Value::Integer))
                        .map(|r| r.map_err(|_| ()))
                        .collect()
                };
                toml::Value::Array(vals.map_err(|_| bad("a comma-separated list"))?)
            }
            _ => return Err(bad("a scalar")),
        };
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| GhnError::config(e.message().to_string()))?;
        Ok(())
    }

    pub fn space(&self) -> Result<Space> {
        self.run.mode.parse().map_err(GhnError::Config)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out)
    }

    pub fn ghn_config(&self) -> Result<GhnConfig> {
        let mut c = GhnConfig::new(self.space()?);
        c.hidden = self.ghn.hidden;
        c.hyper_hidden = self.ghn.hyper_hidden;
        c.block_width = self.ghn.block_width;
        c.max_tiles = self.ghn.max_tiles;
        let stack = self.stack()?;
        c.gnn_copies = if stack.shared() {
            1
        } else {
            self.net.repeat.max(1)
        };
        Ok(c)
    }

    pub fn stack(&self) -> Result<StackMode> {
        self.ghn.stack.parse()
    }

    pub fn usage(&self) -> Result<GhnUse> {
        Ok(GhnUse {
            scheme: PropagationScheme::from_name(&self.ghn.scheme, self.ghn.steps)?,
            stack: self.stack()?,
        })
    }

    pub fn train_config(&self) -> GhnTrainConfig {
        GhnTrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            n_max: self.train.n_max,
            seed: self.run.seed,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            steps: self.eval.sgd_steps,
            batch_size: self.eval.sgd_batch,
            lr: self.eval.sgd_lr,
        }
    }

    pub fn axis(&self) -> Result<AblationAxis> {
        self.ablate.axis.parse()
    }

    /// Checks everything that can be checked without touching files.
    pub fn validate(&self) -> Result<()> {
        self.space()?;
        self.usage()?;
        self.ghn_config()?;
        self.task.check()?;
        self.train_config().check()?;
        if self.net.channels == 0 || self.net.repeat == 0 || self.net.stem_stride == 0 {
            return Err(GhnError::config("net sizes must be positive"));
        }
        if self.eval.nodes == 0
            || self.eval.sgd_batch == 0
            || self.eval.sgd_lr.is_nan()
            || self.eval.sgd_lr <= 0.0
        {
            return Err(GhnError::config(
                "eval nodes, batch and lr must be positive",
            ));
        }
        if self.search.k == 0 || self.correlate.n < 3 {
            return Err(GhnError::config(
                "search.k must be positive and correlate.n at least 3",
            ));
        }
        self.axis()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys_of(c: &RunConfig) -> Vec<(String, String)> {
        let v = toml::Value::try_from(c).unwrap();
        let mut out = Vec::new();
        for (s, t) in v.as_table().unwrap() {
            for k in t.as_table().unwrap().keys() {
                out.push((s.clone(), k.clone()));
            }
        }
        out.sort();
        out
    }

    #[test]
    fn keys_match_help_table() {
        let mut documented: Vec<(String, String)> = KEYS
            .iter()
            .map(|(s, k, _)| (s.to_string(), k.to_string()))
            .collect();
        documented.sort();
        assert_eq!(keys_of(&RunConfig::default()), documented);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.train.lr = 3e-4;
        c.task.frequencies = vec![1.25, 2.5];
        c.ablate.grid = vec![1, 3, 5];
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn set_by_type() {
        let mut c = RunConfig::default();
        c.set("train", "lr", "0.5").unwrap();
        c.set("run", "mode", "anytime").unwrap();
        c.set("ablate", "grid", "1,2,3").unwrap();
        c.set("task", "frequencies", "2,4").unwrap();
        c.set("train", "resume", "true").unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.run.mode, "anytime");
        assert_eq!(c.ablate.grid, vec![1, 2, 3]);
        assert_eq!(c.task.frequencies, vec![2.0, 4.0]);
        assert!(c.train.resume);
        assert!(c.set("train", "steps", "many").is_err());
        assert!(c.set("train", "nope", "1").is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let c = RunConfig::from_toml("[ghn]\nscheme = \"bogus\"\n").unwrap();
        assert!(c.validate().unwrap_err().is_config());
        assert!(RunConfig::from_toml("[ghn]\nunknown = 1\n").is_err());
    }
}
