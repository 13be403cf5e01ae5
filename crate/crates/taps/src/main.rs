//! Command-line front end. Subcommands cover a single episode, the
//! comparison sweeps, the two closed-form sanity simulations, and a
//! config dump for discovering override keys.
//!
//! Exit codes: 0 on success, 2 for usage or configuration mistakes,
//! 1 for runtime failures (I/O, numeric preconditions).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use taps::config::{build_run_config, parse_kv_text, RunConfig};
use taps::harness::{emit_csv, emit_summary, run_episode, run_sweep, sweep_to_csv, SweepAxis};
use taps::theory::{
    failure_rate_vs_budget, failure_table_to_csv, simulate_buffer_balance, simulate_query_ratio,
    theory_policy_config,
};

const USAGE: &str = "\
usage: taps <command> [flags]

commands:
  run             stream one adaptation episode; writes steps.csv and summary.txt
  sweep           rerun the episode across one axis of settings; writes sweep.csv
  theory query-ratio    stationary-stream query rate simulation; writes query_ratio.csv
  theory buffer-balance class-balance trace for the eviction rule; writes balance.csv
  dump-config     print the effective configuration as key=value lines

common flags:
  --config FILE   key=value file applied before command-line overrides
  --out DIR       output directory (default taps-out)
  --key VALUE     any key accepted by dump-config, e.g. --world.dim 32 or --lr=0.01

sweep flags:
  --axis NAME     budget_alpha | buffer_capacity | alpha_ce | selection_policy |
                  eviction_policy | alignment_granularity
  --values A,B    comma-separated settings for the axis
  --seeds 1,2,3   one episode per (value, seed); default is the configured seed

theory query-ratio flags:
  --mu F --sigma F   entropy distribution (default 0, 1)
  --alpha F          target budget (default 0.05)
  --switch-ratio F   regime switch point (default 1.5 * alpha)
  --steps N          stream length (default 20000)
  --seed N           (default 7)

theory buffer-balance flags:
  --k N --capacity N   classes and buffer size; k must divide capacity (default 5, 20)
  --budget N           number of insertions (default 100 * capacity)
  --mix P1,P2,...      class probabilities (default uniform)
  --seed N             (default 7)
  --budgets B1,B2,...  also estimate failure rates across budgets
  --trials N           trials per budget row (default 200)
";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `taps help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    match args.first().map(String::as_str) {
        None | Some("help") | Some("--help") | Some("-h") => {
            print!("{USAGE}");
            Ok(())
        }
        Some("run") => cmd_run(&args[1..]),
        Some("sweep") => cmd_sweep(&args[1..]),
        Some("theory") => match args.get(1).map(String::as_str) {
            Some("query-ratio") => cmd_query_ratio(&args[2..]),
            Some("buffer-balance") => cmd_buffer_balance(&args[2..]),
            other => Err(usage(format!(
                "theory needs a subcommand (query-ratio or buffer-balance), got {other:?}"
            ))),
        },
        Some("dump-config") => cmd_dump_config(&args[1..]),
        Some(other) => Err(usage(format!("unknown command {other:?}"))),
    }
}

/// `--key value` and `--key=value` pairs, in order of appearance.
fn parse_pairs(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let stripped = arg
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("expected a --flag, got {arg:?}")))?;
        if stripped.is_empty() {
            return Err(usage("bare -- is not a flag"));
        }
        if let Some((k, v)) = stripped.split_once('=') {
            pairs.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let v = args
                .get(i + 1)
                .ok_or_else(|| usage(format!("flag --{stripped} needs a value")))?;
            pairs.push((stripped.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(pairs)
}

/// Pull the named flags out of the pair list; the rest stay in order.
/// Repeating a flag keeps the last occurrence.
fn split_reserved(
    pairs: Vec<(String, String)>,
    reserved: &[&str],
) -> (BTreeMap<String, String>, Vec<(String, String)>) {
    let mut taken = BTreeMap::new();
    let mut rest = Vec::new();
    for (k, v) in pairs {
        if reserved.contains(&k.as_str()) {
            taken.insert(k, v);
        } else {
            rest.push((k, v));
        }
    }
    (taken, rest)
}

fn parse_num<T>(key: &str, value: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| usage(format!("--{key} {value:?}: {e}")))
}

fn parse_num_list<T>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

/// Effective run configuration: defaults, then the config file, then
/// command-line overrides.
fn load_run_config(
    config_path: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut map = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {path:?}: {e}")))?;
            parse_kv_text(&text).map_err(usage)?
        }
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    build_run_config(&map).map_err(usage)
}

fn out_dir(taken: &BTreeMap<String, String>) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(taken.get("out").map_or("taps-out", String::as_str));
    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_run(args: &[String]) -> Result<(), CliError> {
    let pairs = parse_pairs(args)?;
    let (taken, overrides) = split_reserved(pairs, &["config", "out"]);
    let cfg = load_run_config(taken.get("config").map(String::as_str), &overrides)?;
    let dir = out_dir(&taken)?;

    let (reports, summary) = run_episode(&cfg).map_err(runtime)?;
    let steps_path = dir.join("steps.csv");
    let summary_path = dir.join("summary.txt");
    emit_csv(&reports, &steps_path).map_err(runtime)?;
    emit_summary(&summary, &summary_path).map_err(runtime)?;

    print!("{}", summary.to_kv());
    println!("wrote {}", steps_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_sweep(args: &[String]) -> Result<(), CliError> {
    let pairs = parse_pairs(args)?;
    let (taken, overrides) =
        split_reserved(pairs, &["config", "out", "axis", "values", "seeds"]);
    let cfg = load_run_config(taken.get("config").map(String::as_str), &overrides)?;
    let dir = out_dir(&taken)?;

    let axis_name = taken
        .get("axis")
        .ok_or_else(|| usage("sweep needs --axis"))?;
    let axis = SweepAxis::parse(axis_name)
        .ok_or_else(|| usage(format!("unknown sweep axis {axis_name:?}")))?;
    let values: Vec<String> = taken
        .get("values")
        .ok_or_else(|| usage("sweep needs --values"))?
        .split(',')
        .map(|v| v.trim().to_string())
        .collect();
    let seeds = match taken.get("seeds") {
        Some(s) => parse_num_list("seeds", s)?,
        None => vec![cfg.seed],
    };

    let rows = run_sweep(&cfg, axis, &values, &seeds).map_err(runtime)?;
    let path = dir.join("sweep.csv");
    write_text(&path, &sweep_to_csv(&rows))?;
    println!("{} episodes across {} values", rows.len(), values.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_query_ratio(args: &[String]) -> Result<(), CliError> {
    let pairs = parse_pairs(args)?;
    let (taken, rest) = split_reserved(
        pairs,
        &["mu", "sigma", "alpha", "switch-ratio", "steps", "seed", "out"],
    );
    if let Some((k, _)) = rest.first() {
        return Err(usage(format!("theory query-ratio does not take --{k}")));
    }
    let get = |key: &str, default: &str| taken.get(key).cloned().unwrap_or_else(|| default.into());
    let mu: f64 = parse_num("mu", &get("mu", "0"))?;
    let sigma: f64 = parse_num("sigma", &get("sigma", "1"))?;
    let alpha: f64 = parse_num("alpha", &get("alpha", "0.05"))?;
    let steps: u64 = parse_num("steps", &get("steps", "20000"))?;
    let seed: u64 = parse_num("seed", &get("seed", "7"))?;

    let mut policy = theory_policy_config(alpha).map_err(usage)?;
    if let Some(s) = taken.get("switch-ratio") {
        policy.switch_ratio = parse_num("switch-ratio", s)?;
        policy.validate().map_err(usage)?;
    }
    let dir = out_dir(&taken)?;

    let trace = simulate_query_ratio(mu, sigma, &policy, steps, seed).map_err(usage)?;
    let path = dir.join("query_ratio.csv");
    let summary_path = dir.join("summary.txt");
    write_text(&path, &trace.to_csv())?;
    write_text(&summary_path, &trace.summary())?;
    print!("{}", trace.summary());
    println!("wrote {}", path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_buffer_balance(args: &[String]) -> Result<(), CliError> {
    let pairs = parse_pairs(args)?;
    let (taken, rest) = split_reserved(
        pairs,
        &["k", "capacity", "budget", "mix", "seed", "budgets", "trials", "out"],
    );
    if let Some((k, _)) = rest.first() {
        return Err(usage(format!("theory buffer-balance does not take --{k}")));
    }
    let get = |key: &str, default: &str| taken.get(key).cloned().unwrap_or_else(|| default.into());
    let k: usize = parse_num("k", &get("k", "5"))?;
    let capacity: usize = parse_num("capacity", &get("capacity", "20"))?;
    let default_budget = (100 * capacity).to_string();
    let budget: u64 = parse_num("budget", &get("budget", &default_budget))?;
    let seed: u64 = parse_num("seed", &get("seed", "7"))?;
    let mix: Vec<f64> = match taken.get("mix") {
        Some(s) => parse_num_list("mix", s)?,
        None => vec![1.0 / k as f64; k],
    };
    let dir = out_dir(&taken)?;

    let trace = simulate_buffer_balance(k, capacity, budget, &mix, seed).map_err(usage)?;
    let path = dir.join("balance.csv");
    let summary_path = dir.join("summary.txt");
    write_text(&path, &trace.to_csv())?;
    write_text(&summary_path, &trace.summary())?;
    print!("{}", trace.summary());
    println!("wrote {}", path.display());
    println!("wrote {}", summary_path.display());

    if let Some(budgets_str) = taken.get("budgets") {
        let budgets: Vec<u64> = parse_num_list("budgets", budgets_str)?;
        let trials: u64 = parse_num("trials", &get("trials", "200"))?;
        let rows = failure_rate_vs_budget(k, capacity, &budgets, trials, seed).map_err(usage)?;
        let rate_path = dir.join("failure_rate.csv");
        write_text(&rate_path, &failure_table_to_csv(&rows))?;
        println!("wrote {}", rate_path.display());
    }
    Ok(())
}

fn cmd_dump_config(args: &[String]) -> Result<(), CliError> {
    let pairs = parse_pairs(args)?;
    let (taken, overrides) = split_reserved(pairs, &["config"]);
    let cfg = load_run_config(taken.get("config").map(String::as_str), &overrides)?;
    print!("{}", cfg.to_kv());
    Ok(())
}
