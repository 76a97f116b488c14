use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ghn::arch::{
    deserialize, graph_hash, sample_anytime, sample_block, stack_blocks, AnytimeSampling, Space,
};
use ghn::candidate::{append_records, train_ghn, Dataset, ResultRecord, StepLog, TaskSpec};
use ghn::ghn::{Checkpoint, GhnModel};
use ghn::search::{
    ablate as run_ablation, correlation_benchmark, mean, random_search, summarize,
    write_ablation_csv, AblationBase, Bench, TruthCache,
};
use ghn::tensor::AdamState;
use ghn::{GhnError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

const TRAIN_FILE: &str = "train.bin";
const VAL_FILE: &str = "val.bin";
const CKPT_FILE: &str = "ghn.ckpt.json";
const LOG_FILE: &str = "train_log.jsonl";
const RESULTS_FILE: &str = "results.jsonl";
const TRUTH_CACHE: &str = "truth_cache.json";

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir().join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GhnError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| GhnError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> GhnError + '_ {
    move |e| GhnError::io(path, e.into())
}

/// Config echo without the keys that only steer how a run is executed.
fn echo(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    for (s, k) in [
        ("train", "resume"),
        ("train", "stop_after"),
        ("train", "checkpoint_every"),
        ("run", "threads"),
        ("run", "out"),
    ] {
        v[s].as_object_mut().unwrap().remove(k);
    }
    v
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (t, v) = (out(cfg, TRAIN_FILE), out(cfg, VAL_FILE));
    if !t.exists() || !v.exists() {
        return Err(GhnError::Io {
            path: t.display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset missing; run `ghn gen-data` with the same --run-out first",
            ),
        });
    }
    Ok((Dataset::load(&t)?, Dataset::load(&v)?))
}

fn load_model(cfg: &RunConfig) -> Result<GhnModel> {
    let ck = Checkpoint::load(&out(cfg, CKPT_FILE))?;
    if ck.model.config != cfg.ghn_config()? {
        return Err(GhnError::config(
            "checkpoint was trained with a different GHN configuration",
        ));
    }
    Ok(ck.model)
}

fn bench<'a>(cfg: &RunConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Bench<'a>> {
    Ok(Bench {
        train,
        val,
        shape: cfg.net.clone(),
        usage: cfg.usage()?,
        nodes: cfg.eval.nodes,
        sgd: cfg.sgd(),
    })
}

fn checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| GhnError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let task: &TaskSpec = &cfg.task;
    let (train, val) = task.generate(cfg.run.seed)?;
    for (name, d) in [(TRAIN_FILE, &train), (VAL_FILE, &val)] {
        let p = out(cfg, name);
        d.save(&p)?;
        println!(
            "{}: {} samples of {:?}, {} classes, sha256 {}",
            p.display(),
            d.len(),
            d.shape,
            d.classes,
            checksum(&p)?
        );
    }
    Ok(())
}

fn save_checkpoint(cfg: &RunConfig, model: &GhnModel, adam: &AdamState, step: u64) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        adam: Some(adam.clone()),
        step,
        meta: echo(cfg),
    };
    ck.save(&out(cfg, CKPT_FILE))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (train, _) = load_data(cfg)?;
    let ck_path = out(cfg, CKPT_FILE);
    let log_path = out(cfg, LOG_FILE);
    let tc = cfg.train_config();
    let (mut model, mut adam, start) = if cfg.train.resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.model.config != cfg.ghn_config()? {
            return Err(GhnError::config(
                "checkpoint GHN configuration differs from the run",
            ));
        }
        if ck.meta != echo(cfg) {
            return Err(GhnError::config(
                "checkpoint was written under a different configuration",
            ));
        }
        (ck.model, ck.adam.unwrap_or_default(), ck.step)
    } else {
        (
            GhnModel::new(cfg.ghn_config()?, cfg.run.seed)?,
            AdamState::new(),
            0,
        )
    };
    // the log keeps exactly the steps the checkpoint has seen
    let kept: String = if start > 0 && log_path.exists() {
        let text = std::fs::read_to_string(&log_path).map_err(|e| GhnError::io(&log_path, e))?;
        text.lines()
            .filter(|l| {
                serde_json::from_str::<StepLog>(l)
                    .map(|s| s.step <= start)
                    .unwrap_or(false)
            })
            .map(|l| format!("{l}\n"))
            .collect()
    } else {
        String::new()
    };
    write_text(&log_path, &kept)?;
    let end = match cfg.train.stop_after {
        0 => tc.steps,
        s => s.min(tc.steps),
    };
    let mut log = BufWriter::new(
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| GhnError::io(&log_path, e))?,
    );
    let every = cfg.train.checkpoint_every;
    let started = std::time::Instant::now();
    train_ghn(
        &mut model,
        &mut adam,
        &tc,
        &cfg.net,
        cfg.usage()?,
        &train,
        start..end,
        |s, model, adam| {
            writeln!(log, "{}", serde_json::to_string(s).expect("log serializes"))
                .map_err(|e| GhnError::io(&log_path, e))?;
            if every > 0 && s.step % every == 0 {
                log.flush().map_err(|e| GhnError::io(&log_path, e))?;
                save_checkpoint(cfg, model, adam, s.step)?;
            }
            if s.step % 100 == 0 {
                eprintln!("step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
            }
            Ok(())
        },
    )?;
    log.flush().map_err(|e| GhnError::io(&log_path, e))?;
    save_checkpoint(cfg, &model, &adam, end.max(start))?;
    println!(
        "trained steps {start}..{end} in {:.1}s; checkpoint {}",
        started.elapsed().as_secs_f64(),
        ck_path.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Verification {
    top: Vec<f64>,
    random: Vec<f64>,
    top_mean: f64,
    random_mean: f64,
    margin: f64,
}

#[derive(Serialize, Deserialize)]
struct SearchOutput {
    report: ghn::search::SearchReport,
    verification: Option<Verification>,
}

pub fn search(cfg: &RunConfig) -> Result<()> {
    let (train, val) = load_data(cfg)?;
    let model = load_model(cfg)?;
    let b = bench(cfg, &train, &val)?;
    let mut report = random_search(&model, &b, cfg.search.m, cfg.search.k, cfg.run.seed)?;
    report.config = echo(cfg);
    let verification = if cfg.search.verify {
        let cache = TruthCache::open(&out(cfg, TRUTH_CACHE))?;
        let k = cfg.search.k;
        let space = model.config.space;
        let top_specs = report.candidates[..k]
            .iter()
            .map(|c| b.candidate(space, cfg.run.seed, c.index as u64))
            .collect::<Result<Vec<_>>>()?;
        let random_specs = b.candidates(space, cfg.run.seed, k)?;
        let top: Vec<f64> = cache
            .truths(&b, &top_specs)?
            .iter()
            .map(|e| e.accuracy)
            .collect();
        let random: Vec<f64> = cache
            .truths(&b, &random_specs)?
            .iter()
            .map(|e| e.accuracy)
            .collect();
        let (tm, rm) = (mean(&top), mean(&random));
        println!(
            "top-{k} true accuracy {tm:.4}, random-{k} {rm:.4}, margin {:+.4}",
            tm - rm
        );
        Some(Verification {
            top,
            random,
            top_mean: tm,
            random_mean: rm,
            margin: tm - rm,
        })
    } else {
        None
    };
    let records: Vec<ResultRecord> = report
        .candidates
        .iter()
        .map(|c| ResultRecord {
            graph_hash: c.graph_hash.clone(),
            predicted_acc: c.predicted_acc,
            true_acc: None,
            flops: c.flops,
            seed: cfg.run.seed,
        })
        .collect();
    append_records(&out(cfg, RESULTS_FILE), &records)?;
    for (i, c) in report.candidates.iter().take(cfg.search.k).enumerate() {
        println!(
            "#{:<3} {} predicted {:.4} score {:.4} flops {}",
            i + 1,
            &c.graph_hash[..12],
            c.predicted_acc,
            c.score,
            c.flops
        );
    }
    write_json(
        &out(cfg, "search.json"),
        &SearchOutput {
            report,
            verification,
        },
    )
}

pub fn correlate(cfg: &RunConfig) -> Result<()> {
    let (train, val) = load_data(cfg)?;
    let model = load_model(cfg)?;
    let b = bench(cfg, &train, &val)?;
    let cache = TruthCache::open(&out(cfg, TRUTH_CACHE))?;
    let r = correlation_benchmark(&model, &b, &cache, cfg.correlate.n, cfg.run.seed)?;
    println!(
        "n={} r_all={:.4} (one-sided p={:.4}) r_top={:.4}; reference r_all=0.68 r_top=0.48",
        r.n, r.r_all, r.p_all, r.r_top
    );
    let records: Vec<ResultRecord> = r
        .pairs
        .iter()
        .map(|p| ResultRecord {
            graph_hash: p.graph_hash.clone(),
            predicted_acc: p.predicted,
            true_acc: Some(p.true_acc),
            flops: p.flops,
            seed: cfg.run.seed,
        })
        .collect();
    append_records(&out(cfg, RESULTS_FILE), &records)?;
    let path = out(cfg, "correlation.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["graph_hash", "predicted", "true_acc", "flops"])
        .map_err(csv_err(&path))?;
    for p in &r.pairs {
        w.write_record([
            p.graph_hash.clone(),
            p.predicted.to_string(),
            p.true_acc.to_string(),
            p.flops.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| GhnError::io(&path, e))?;
    write_json(
        &out(cfg, "correlation.json"),
        &serde_json::json!({
            "report": r,
            "reference": {"r_all": 0.68, "r_top": 0.48},
            "config": echo(cfg),
        }),
    )
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (train, val) = load_data(cfg)?;
    let axis = cfg.axis()?;
    let base = AblationBase {
        bench: bench(cfg, &train, &val)?,
        ghn: cfg.ghn_config()?,
        train: cfg.train_config(),
        n: cfg.ablate.n,
        eval_seed: cfg.run.seed,
    };
    let cache = TruthCache::open(&out(cfg, TRUTH_CACHE))?;
    let rows = run_ablation(
        axis,
        &cfg.ablate.grid,
        &base,
        &cfg.ablate.seeds,
        &cache,
        |r| {
            eprintln!(
                "{} seed {}: r_all {:.4} r_top {:.4}",
                r.setting, r.seed, r.r_all, r.r_top
            )
        },
    )?;
    cache.save()?;
    let path = out(cfg, &format!("ablation_{}.csv", axis.name()));
    let f = File::create(&path).map_err(|e| GhnError::io(&path, e))?;
    write_ablation_csv(BufWriter::new(f), &rows)?;
    for (s, a, t) in summarize(&rows) {
        println!("{s:<28} r_all {a:+.4}  r_top {t:+.4}");
    }
    Ok(())
}

pub fn flops(cfg: &RunConfig) -> Result<()> {
    let space = cfg.space()?;
    let block = if cfg.flops.graph.is_empty() {
        match space {
            Space::Standard => sample_block(space, cfg.eval.nodes, cfg.run.seed)?,
            Space::Anytime => sample_anytime(
                cfg.eval.nodes,
                AnytimeSampling {
                    n_exits: cfg.net.exits.min(cfg.eval.nodes),
                },
                cfg.run.seed,
            )?,
        }
    } else {
        let p = Path::new(&cfg.flops.graph);
        deserialize(&std::fs::read_to_string(p).map_err(|e| GhnError::io(p, e))?)
            .map_err(|e| GhnError::config(format!("{}: {e}", p.display())))?
    };
    let (repeat, reductions) = match block.mode {
        Space::Standard => (cfg.flops.repeat, cfg.flops.reductions.clone()),
        Space::Anytime => (1, vec![]),
    };
    let hash = graph_hash(&block);
    let spec = stack_blocks(block, repeat, &reductions, cfg.flops.channels)?
        .with_classes(cfg.task.classes())
        .with_stem_stride(cfg.net.stem_stride);
    let input = [1, cfg.task.size, cfg.task.size];
    let report = spec.plan(input)?.flop_report();
    let path = out(cfg, "flops.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["part", "flops"]).map_err(csv_err(&path))?;
    println!("graph {}", &hash[..12]);
    let mut rows = vec![("stem".to_string(), report.stem)];
    rows.extend(
        report
            .blocks
            .iter()
            .enumerate()
            .map(|(i, f)| (format!("block{}", i + 1), *f)),
    );
    rows.push(("head".into(), report.head));
    for e in &report.exits {
        rows.push((format!("exit@node{}", e.node), e.flops));
    }
    rows.push(("total".into(), report.total));
    for (part, f) in &rows {
        println!("{part:<14} {f:>14}");
        w.write_record([part.clone(), f.to_string()])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| GhnError::io(&path, e))
}

/// `(series, x, y)` rows gathered from whatever earlier outputs exist.
pub fn plotdata(cfg: &RunConfig) -> Result<()> {
    let mut written = Vec::new();
    let read_json = |name: &str| -> Result<Option<serde_json::Value>> {
        let p = out(cfg, name);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| GhnError::io(&p, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| GhnError::Parse {
                location: p.display().to_string(),
                message: e.to_string(),
            })
    };
    let emit = |name: &str, rows: Vec<(String, f64, f64)>| -> Result<()> {
        let path = out(cfg, name);
        let mut w = csv_writer(&path)?;
        w.write_record(["series", "x", "y"])
            .map_err(csv_err(&path))?;
        for (s, x, y) in rows {
            w.write_record([s, x.to_string(), y.to_string()])
                .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| GhnError::io(&path, e))
    };

    if let Some(c) = read_json("correlation.json")? {
        let rows = c["report"]["pairs"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|p| {
                (
                    "predicted_vs_true".to_string(),
                    p["predicted"].as_f64().unwrap_or(f64::NAN),
                    p["true_acc"].as_f64().unwrap_or(f64::NAN),
                )
            })
            .collect();
        emit("plot_correlation.csv", rows)?;
        written.push("plot_correlation.csv");
    }
    if let Some(s) = read_json("search.json")? {
        let out_s: SearchOutput = serde_json::from_value(s).map_err(|e| GhnError::Parse {
            location: "search.json".into(),
            message: e.to_string(),
        })?;
        if let Some(v) = &out_s.verification {
            let mut rows = Vec::new();
            for (series, accs) in [("top", &v.top), ("random", &v.random)] {
                for (i, a) in accs.iter().enumerate() {
                    rows.push((series.to_string(), (i + 1) as f64, *a));
                }
            }
            emit("plot_random_vs_top.csv", rows)?;
            written.push("plot_random_vs_top.csv");
        }
        if out_s.report.space == Space::Anytime {
            let k = out_s.report.top_k.len();
            let rows = out_s.report.candidates[..k]
                .iter()
                .flat_map(|c| {
                    c.curve
                        .iter()
                        .map(move |&(f, a)| (c.graph_hash[..12].to_string(), f as f64, a))
                })
                .collect();
            emit("plot_anytime.csv", rows)?;
            written.push("plot_anytime.csv");
        }
    }
    let mut ablation_rows = Vec::new();
    for axis in ghn::search::AblationAxis::ALL {
        let p = out(cfg, &format!("ablation_{}.csv", axis.name()));
        if !p.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&p).map_err(csv_err(&p))?;
        let mut rows = Vec::new();
        for rec in r.deserialize::<ghn::search::AblationRow>() {
            rows.push(rec.map_err(csv_err(&p))?);
        }
        for (i, (setting, a, t)) in summarize(&rows).into_iter().enumerate() {
            let x = setting
                .rsplit('=')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .unwrap_or(i as f64);
            let family = setting.split('/').next().filter(|_| setting.contains('/'));
            let prefix = match family {
                Some(f) => format!("{}:{f}", axis.name()),
                None => axis.name().to_string(),
            };
            ablation_rows.push((format!("{prefix}:r_all"), x, a));
            ablation_rows.push((format!("{prefix}:r_top"), x, t));
        }
    }
    if !ablation_rows.is_empty() {
        emit("plot_ablation.csv", ablation_rows)?;
        written.push("plot_ablation.csv");
    }
    if written.is_empty() {
        return Err(GhnError::Io {
            path: cfg.out_dir().display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no correlation, search or ablation outputs to plot",
            ),
        });
    }
    for w in written {
        println!("{}", out(cfg, w).display());
    }
    Ok(())
}
