use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bench::{correlation_benchmark, Bench, CorrelationReport, TruthCache};
use super::stats::mean;
use crate::candidate::{train_ghn, GhnTrainConfig, GhnUse};
use crate::error::{GhnError, Result};
use crate::ghn::{GhnConfig, GhnModel, PropagationScheme, StackMode};
use crate::tensor::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Grid values are the training `n_max`.
    Nodes,
    /// Grid values are propagation steps (or sweeps) with the base scheme.
    Steps,
    /// Both schemes at every grid step count.
    Scheme,
    /// The three stacking modes at every grid repeat count.
    Stacked,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Nodes,
        AblationAxis::Steps,
        AblationAxis::Scheme,
        AblationAxis::Stacked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Nodes => "nodes",
            AblationAxis::Steps => "steps",
            AblationAxis::Scheme => "scheme",
            AblationAxis::Stacked => "stacked",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = GhnError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| GhnError::config(format!("unknown ablation axis `{s}`")))
    }
}

/// Everything an ablation varies around.
#[derive(Clone, Debug)]
pub struct AblationBase<'a> {
    pub bench: Bench<'a>,
    pub ghn: GhnConfig,
    pub train: GhnTrainConfig,
    /// Graphs per correlation benchmark.
    pub n: usize,
    /// Selects the benchmark graphs, shared by every setting and seed.
    pub eval_seed: u64,
}

/// One trained setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub label: String,
    pub ghn: GhnConfig,
    pub train: GhnTrainConfig,
    pub usage: GhnUse,
    pub repeat: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    pub seed: u64,
    pub r_all: f64,
    pub r_top: f64,
}

/// The cartesian settings an axis expands `grid` into.
pub fn settings(axis: AblationAxis, grid: &[usize], base: &AblationBase) -> Result<Vec<Setting>> {
    if grid.is_empty() {
        return Err(GhnError::input("empty ablation grid"));
    }
    if grid.contains(&0) {
        return Err(GhnError::input("ablation grid values must be positive"));
    }
    let usage = base.bench.usage;
    let plain = |label: String| Setting {
        label,
        ghn: base.ghn.clone(),
        train: base.train.clone(),
        usage,
        repeat: base.bench.shape.repeat,
    };
    let with_steps = |scheme: PropagationScheme, t: usize| match scheme {
        PropagationScheme::Synchronous { .. } => PropagationScheme::Synchronous { steps: t },
        PropagationScheme::ForwardBackward { .. } => {
            PropagationScheme::ForwardBackward { passes: t }
        }
    };
    let mut out = Vec::new();
    match axis {
        AblationAxis::Nodes => {
            for &n in grid {
                let mut s = plain(format!("N={n}"));
                s.train.n_max = n;
                out.push(s);
            }
        }
        AblationAxis::Steps => {
            for &t in grid {
                let mut s = plain(format!("T={t}"));
                s.usage.scheme = with_steps(usage.scheme, t);
                out.push(s);
            }
        }
        AblationAxis::Scheme => {
            for proto in [
                PropagationScheme::Synchronous { steps: 1 },
                PropagationScheme::ForwardBackward { passes: 1 },
            ] {
                for &t in grid {
                    let mut s = plain(format!("{}/T={t}", proto.name()));
                    s.usage.scheme = with_steps(proto, t);
                    out.push(s);
                }
            }
        }
        AblationAxis::Stacked => {
            for mode in StackMode::ALL {
                for &r in grid {
                    let mut s = plain(format!("{mode}/R={r}"));
                    s.usage.stack = mode;
                    s.repeat = r;
                    s.ghn.gnn_copies = if mode.shared() { 1 } else { r };
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

/// Train a fresh GHN for `setting` with `seed` and benchmark it.
pub fn run_setting(
    base: &AblationBase,
    setting: &Setting,
    seed: u64,
    cache: &TruthCache,
) -> Result<CorrelationReport> {
    let mut bench = base.bench.clone();
    bench.usage = setting.usage;
    bench.shape.repeat = setting.repeat;
    let mut model = GhnModel::new(setting.ghn.clone(), seed)?;
    let mut adam = AdamState::new();
    let cfg = GhnTrainConfig {
        seed,
        ..setting.train.clone()
    };
    train_ghn(
        &mut model,
        &mut adam,
        &cfg,
        &bench.shape,
        bench.usage,
        bench.train,
        0..cfg.steps,
        |_, _, _| Ok(()),
    )?;
    correlation_benchmark(&model, &bench, cache, base.n, base.eval_seed)
}

/// One row per (setting, seed).
pub fn ablate(
    axis: AblationAxis,
    grid: &[usize],
    base: &AblationBase,
    seeds: &[u64],
    cache: &TruthCache,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(GhnError::input("no seeds for the ablation"));
    }
    let mut rows = Vec::new();
    for s in settings(axis, grid, base)? {
        for &seed in seeds {
            let r = run_setting(base, &s, seed, cache)?;
            let row = AblationRow {
                axis,
                setting: s.label.clone(),
                seed,
                r_all: r.r_all,
                r_top: r.r_top,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Seed-averaged `(setting, r_all, r_top)` in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.setting) {
            order.push(r.setting.clone());
        }
    }
    order
        .into_iter()
        .map(|s| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.setting == s).collect();
            let a = mean(&of.iter().map(|r| r.r_all).collect::<Vec<_>>());
            let t = mean(&of.iter().map(|r| r.r_top).collect::<Vec<_>>());
            (s, a, t)
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| GhnError::Io {
        path: "csv output".into(),
        source: e.into(),
    };
    w.write_record(["axis", "setting", "seed", "r_all", "r_top"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.axis.name().to_string(),
            r.setting.clone(),
            r.seed.to_string(),
            format!("{}", r.r_all),
            format!("{}", r.r_top),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| GhnError::Io {
        path: "csv output".into(),
        source: e,
    })
}
