use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &[&str] = &[
    "--task-train",
    "200",
    "--task-val",
    "50",
    "--net-channels",
    "4",
    "--train-batch-size",
    "4",
    "--eval-nodes",
    "4",
];

fn ghn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghn"))
        .args(args)
        .arg("--run-out")
        .arg(out)
        .env_remove("GHN_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = ghn(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn with_small<'a>(verb: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![verb];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_writes_checksummed_balanced_sets() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &with_small("gen-data", &[]));
    for (name, n) in [("train.bin", 200usize), ("val.bin", 50)] {
        let bytes = read(dir.path().join(name));
        let line = stdout.lines().find(|l| l.contains(name)).unwrap();
        let printed = line.rsplit("sha256 ").next().unwrap();
        assert_eq!(printed, hex::encode(Sha256::digest(&bytes)));

        assert_eq!(&bytes[..8], b"GHNDATA1");
        let word = |i: usize| {
            u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
        };
        let (count, c, h, w, classes) = (word(0), word(1), word(2), word(3), word(4));
        assert_eq!((count, c, h, w, classes), (n, 1, 16, 16, 10));
        let labels = &bytes[28 + n * c * h * w..];
        assert_eq!(labels.len(), n);
        for k in 0..classes as u8 {
            let share = labels.iter().filter(|&&l| l == k).count() as f64 / n as f64;
            assert!((share - 0.1).abs() <= 0.005, "class {k}: {share}");
        }
    }
    let again = tempfile::tempdir().unwrap();
    ok(again.path(), &with_small("gen-data", &[]));
    assert_eq!(
        read(dir.path().join("train.bin")),
        read(again.path().join("train.bin"))
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let train = ["--train-steps", "24", "--train-checkpoint-every", "5"];
    for d in [full.path(), split.path()] {
        ok(d, &with_small("gen-data", &[]));
    }
    ok(full.path(), &with_small("train", &train));
    ok(
        split.path(),
        &with_small(
            "train",
            &[&train[..], &["--train-stop-after", "12"]].concat(),
        ),
    );
    let half: serde_json::Value =
        serde_json::from_slice(&read(split.path().join("ghn.ckpt.json"))).unwrap();
    assert_eq!(half["step"], 12);
    ok(
        split.path(),
        &with_small("train", &[&train[..], &["--train-resume", "true"]].concat()),
    );
    for f in ["ghn.ckpt.json", "train_log.jsonl"] {
        assert!(
            read(full.path().join(f)) == read(split.path().join(f)),
            "{f} differs"
        );
    }
}

#[test]
fn resume_refuses_a_different_configuration() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with_small("gen-data", &[]));
    ok(
        d.path(),
        &with_small("train", &["--train-steps", "4", "--train-stop-after", "2"]),
    );
    let o = ghn(
        d.path(),
        &with_small(
            "train",
            &[
                "--train-steps",
                "4",
                "--train-resume",
                "true",
                "--train-lr",
                "0.5",
            ],
        ),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[derive(serde::Deserialize)]
struct Step {
    step: u64,
    loss: f64,
    lr: f64,
}

#[test]
fn learning_rate_halves_and_loss_falls() {
    let d = tempfile::tempdir().unwrap();
    let task = ["--task-train", "200", "--task-val", "50"];
    ok(d.path(), &[&["gen-data"], &task[..]].concat());
    let train = [
        "train",
        "--net-channels",
        "4",
        "--train-steps",
        "400",
        "--train-batch-size",
        "8",
        "--train-lr",
        "0.002",
    ];
    ok(d.path(), &[&train[..], &task[..]].concat());
    let text = String::from_utf8(read(d.path().join("train_log.jsonl"))).unwrap();
    let log: Vec<Step> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 400);
    for s in &log {
        let expected = match s.step {
            1..=200 => 0.002,
            201..=300 => 0.001,
            _ => 0.0005,
        };
        assert_eq!(s.lr, expected, "step {}", s.step);
    }
    let mean = |v: &[Step]| v.iter().map(|s| s.loss).sum::<f64>() / v.len() as f64;
    let (first, last) = (mean(&log[..40]), mean(&log[360..]));
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = ghn(d.path(), &["train", "--no-such-flag", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = ghn(d.path(), &["train", "--train-steps", "many"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ghn(d.path(), &["train", "--ghn-scheme", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let o = ghn(d.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
}

#[test]
fn config_file_and_flags_resolve_in_order() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nlr = 0.25\nsteps = 9\n").unwrap();
    let c = cfg.to_str().unwrap();
    let printed = ok(
        d.path(),
        &[
            "train",
            "--config",
            c,
            "--train-steps",
            "11",
            "--print-config",
        ],
    );
    let t: toml::Table = printed.parse().unwrap();
    assert_eq!(t["train"]["lr"].as_float(), Some(0.25));
    assert_eq!(t["train"]["steps"].as_integer(), Some(11));

    let seeded = |env: Option<&str>, args: &[&str]| -> i64 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ghn"));
        cmd.args(args).arg("--print-config").env_remove("GHN_SEED");
        if let Some(s) = env {
            cmd.env("GHN_SEED", s);
        }
        let out = String::from_utf8(cmd.output().unwrap().stdout).unwrap();
        out.parse::<toml::Table>().unwrap()["run"]["seed"]
            .as_integer()
            .unwrap()
    };
    assert_eq!(seeded(None, &["train"]), 0);
    assert_eq!(seeded(Some("42"), &["train"]), 42);
    assert_eq!(seeded(Some("42"), &["train", "--run-seed", "5"]), 5);
}

/// 18 copies of a two-input block with one 1x1 conv, widths doubling at
/// blocks 6 and 12; costs summed by hand from the layer shapes.
#[test]
fn flops_of_the_eighteen_block_skeleton() {
    let d = tempfile::tempdir().unwrap();
    let graph = d.path().join("block.json");
    std::fs::write(
        &graph,
        r#"{"schema":"ghn-arch/1","mode":"standard","join":"sum","inputs":[0,1],
            "nodes":[{"id":0,"op":"conv_1x1"},{"id":1,"op":"conv_1x1"},{"id":2,"op":"conv_1x1"}],
            "edges":[[0,2],[1,2]]}"#,
    )
    .unwrap();
    ok(
        d.path(),
        &["flops", "--flops-graph", graph.to_str().unwrap()],
    );

    let conv = |cout: u64, cin: u64, k: u64, s: u64| 2 * cout * cin * k * k * s * s;
    let stem = conv(16, 1, 3, 8);
    let mut outs = vec![(16u64, 8u64)];
    let mut blocks = Vec::new();
    for b in 1..=18usize {
        let (c, s) = match b {
            1..=5 => (16, 8),
            6..=11 => (32, 4),
            _ => (64, 2),
        };
        let src0 = outs[b - 1].0;
        let src1 = outs[b.saturating_sub(2)].0;
        blocks.push(conv(c, src0, 1, s) + conv(c, src1, 1, s) + 2 * conv(c, c, 1, s));
        outs.push((c, s));
    }
    let head = 2 * 10 * 64;

    let mut r = csv::Reader::from_path(d.path().join("flops.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["part", "flops"]
    );
    let rows: Vec<(String, u64)> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0], ("stem".into(), stem));
    for (i, f) in blocks.iter().enumerate() {
        assert_eq!(rows[i + 1], (format!("block{}", i + 1), *f));
    }
    assert_eq!(rows[19], ("head".into(), head));
    assert_eq!(
        rows[20],
        ("total".into(), stem + head + blocks.iter().sum::<u64>())
    );
}

#[test]
fn search_correlate_and_plotdata_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // large enough that the benchmark graphs do not all reach the same accuracy
    let args = |verb: &'static str| -> Vec<&'static str> {
        vec![
            verb,
            "--run-seed",
            "7",
            "--task-train",
            "300",
            "--task-val",
            "100",
            "--net-channels",
            "4",
            "--train-steps",
            "6",
            "--train-batch-size",
            "4",
            "--eval-nodes",
            "4",
            "--eval-sgd-steps",
            "60",
            "--eval-sgd-batch",
            "16",
            "--search-m",
            "6",
            "--search-k",
            "2",
            "--search-verify",
            "true",
            "--correlate-n",
            "6",
        ]
    };
    ok(p, &args("gen-data"));
    let o = ghn(p, &args("search"));
    assert_eq!(
        o.status.code(),
        Some(3),
        "search before training has no checkpoint"
    );
    ok(p, &args("train"));
    ok(p, &args("search"));
    let stdout = ok(p, &args("correlate"));
    assert!(stdout.contains("r_all=") && stdout.contains("0.68"));

    let s: serde_json::Value = serde_json::from_slice(&read(p.join("search.json"))).unwrap();
    let cands = s["report"]["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 6);
    assert!(cands
        .windows(2)
        .all(|w| w[0]["score"].as_f64() >= w[1]["score"].as_f64()));
    assert_eq!(s["report"]["top_k"].as_array().unwrap().len(), 2);
    assert!(s["verification"]["margin"].is_number());

    let results = String::from_utf8(read(p.join("results.jsonl"))).unwrap();
    assert_eq!(results.lines().count(), 6 + 6);

    let out = ok(p, &args("plotdata"));
    for f in ["plot_correlation.csv", "plot_random_vs_top.csv"] {
        assert!(out.contains(f));
        let text = String::from_utf8(read(p.join(f))).unwrap();
        assert_eq!(text.lines().next(), Some("series,x,y"));
    }
    let corr = String::from_utf8(read(p.join("correlation.csv"))).unwrap();
    assert_eq!(
        corr.lines().next(),
        Some("graph_hash,predicted,true_acc,flops")
    );
    assert_eq!(corr.lines().count(), 7);
}

#[test]
fn plotdata_without_outputs_fails() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ghn(d.path(), &["plotdata"]).status.code(), Some(3));
}

#[test]
fn corrupt_checkpoints_are_rejected_with_their_version() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &with_small("gen-data", &[]));
    ok(p, &with_small("train", &["--train-steps", "2"]));
    let ck = p.join("ghn.ckpt.json");
    let text = String::from_utf8(read(ck.clone())).unwrap();

    std::fs::write(&ck, text.replace("ghn-ckpt/1", "ghn-ckpt/9")).unwrap();
    let o = ghn(
        p,
        &with_small("search", &["--search-m", "2", "--search-k", "1"]),
    );
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(
        err.contains("ghn-ckpt/9") && err.contains("ghn-ckpt/1"),
        "{err}"
    );

    std::fs::write(&ck, &text[..text.len() / 2]).unwrap();
    let o = ghn(
        p,
        &with_small("search", &["--search-m", "2", "--search-k", "1"]),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

#[test]
fn anytime_flops_list_every_exit() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(
        d.path(),
        &["flops", "--run-mode", "anytime", "--eval-nodes", "6"],
    );
    assert!(out.contains("exit@node"));
    let mut r = csv::Reader::from_path(d.path().join("flops.csv")).unwrap();
    let rows: Vec<(String, u64)> = r.deserialize().map(|x| x.unwrap()).collect();
    let exits: Vec<u64> = rows
        .iter()
        .filter(|r| r.0.starts_with("exit@"))
        .map(|r| r.1)
        .collect();
    assert_eq!(exits.len(), 2);
    let total = rows.last().unwrap().1;
    assert!(exits.windows(2).all(|w| w[0] < w[1]) && exits[1] < total);
}
