mod commands;
mod config;

use std::path::Path;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use ghn::{GhnError, Result};

use config::{RunConfig, KEYS};

const VERBS: &[(&str, &str)] = &[
    ("gen-data", "Write the synthetic train/val image sets"),
    ("train", "Train the graph hypernetwork"),
    (
        "search",
        "Rank random architectures by generated-weight accuracy",
    ),
    (
        "correlate",
        "Correlate predicted with ground-truth accuracy",
    ),
    ("ablate", "Train one GHN per setting along an ablation axis"),
    (
        "flops",
        "Audit per-block and total FLOPs of a stacked network",
    ),
    (
        "plotdata",
        "Emit CSV series for the figures from earlier outputs",
    ),
];

fn flag_name(section: &str, key: &str) -> String {
    format!("{section}-{}", key.replace('_', "-"))
}

fn cli() -> Command {
    let mut cmd = Command::new("ghn")
        .about("Graph hypernetworks for neural architecture search")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("TOML run configuration; flags override its values")
                .global(true),
        )
        .arg(
            Arg::new("print-config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .help("Print the resolved configuration and exit")
                .global(true),
        );
    for &(section, key, help) in KEYS {
        let name: &'static str = Box::leak(flag_name(section, key).into_boxed_str());
        cmd = cmd.arg(
            Arg::new(name)
                .long(name)
                .value_name("VALUE")
                .help(format!("{help} [{section}.{key}]"))
                .global(true),
        );
    }
    for &(verb, about) in VERBS {
        cmd = cmd.subcommand(Command::new(verb).about(about));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let (mut cfg, file_has_seed) = match m.get_one::<String>("config") {
        Some(path) => {
            let path = Path::new(path);
            let text = std::fs::read_to_string(path).map_err(|e| GhnError::io(path, e))?;
            let has_seed = text
                .parse::<toml::Table>()
                .ok()
                .and_then(|t| t.get("run")?.get("seed").cloned())
                .is_some();
            (RunConfig::from_toml(&text)?, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    let seed_flag = flag_name("run", "seed");
    if m.get_one::<String>(&seed_flag).is_none() && !file_has_seed {
        if let Ok(s) = std::env::var("GHN_SEED") {
            cfg.set("run", "seed", &s)?;
        }
    }
    for &(section, key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(&flag_name(section, key)) {
            cfg.set(section, key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(m: &ArgMatches) -> Result<()> {
    let (verb, sub) = m.subcommand().expect("subcommand is required");
    let cfg = resolve(sub)?;
    if sub.get_flag("print-config") {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if cfg.run.threads > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build_global();
    }
    std::fs::create_dir_all(cfg.out_dir()).map_err(|e| GhnError::io(cfg.out_dir(), e))?;
    match verb {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "search" => commands::search(&cfg),
        "correlate" => commands::correlate(&cfg),
        "ablate" => commands::ablate(&cfg),
        "flops" => commands::flops(&cfg),
        "plotdata" => commands::plotdata(&cfg),
        other => unreachable!("unregistered verb {other}"),
    }
}

fn main() -> ExitCode {
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
