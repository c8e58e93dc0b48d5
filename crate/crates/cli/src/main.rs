//! `pdnac`: run, sweep, inspect and check the primal-dual natural
//! actor-critic on tabular constrained MDPs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use pdnac_core::acceptance::{find_check, CHECKS};
use pdnac_core::cmdp::{CmdpModel, PolicyParams, Signal};
use pdnac_core::experiment::{aggregate, aggregate_csv, run_file_stem, EnvSource, ExperimentSpec};
use pdnac_core::oracle::{
    evaluate_exact, max_average_cost, mixing_time, optimal_unconstrained, policy_from_occupancy,
    solve_constrained_optimum,
};
use pdnac_core::pdnac::RunMetrics;

#[derive(Parser)]
#[command(name = "pdnac", version, about = "Primal-dual natural actor-critic experiments on tabular CMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its metrics CSV and JSON summary.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Root seed (default: the spec's `first_seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every (T, seed) pair of a grid and aggregate the results.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Number of seeds per T.
        #[arg(long)]
        seeds: Option<u64>,
        /// First seed of the range.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the exact solution of an environment as JSON.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env_file: Option<PathBuf>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks and print one line per check.
    Check {
        /// Only run these checks.
        names: Vec<String>,
        /// List the available checks and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment file, replacing the spec's `[env]`.
    #[arg(long)]
    env_file: Option<PathBuf>,
    /// Horizon(s) T, comma separated.
    #[arg(long = "T", value_delimiter = ',')]
    t: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config field, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also write the exact solution to `oracle.json` in the output directory.
    #[arg(long)]
    dump_oracle: bool,
}

impl ExperimentArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(file) = &self.env_file {
            spec.env = EnvSource::File(file.clone());
        }
        if !self.t.is_empty() {
            spec.t_values = self.t.clone();
        }
        if let Some(out) = &self.out {
            spec.out_dir = out.clone();
        }
        for assignment in &self.set {
            spec.set_override(assignment)
                .with_context(|| format!("--set {assignment}"))?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn load_model(spec: &ExperimentSpec) -> Result<CmdpModel> {
    let model = spec.build_model();
    match &spec.env {
        EnvSource::File(path) => model.with_context(|| format!("loading environment {}", path.display())),
        EnvSource::Garnet(g) => model.with_context(|| format!("generating garnet {g:?}")),
    }
}

fn write_run(dir: &Path, t: u64, seed: u64, metrics: &RunMetrics) -> Result<PathBuf> {
    let stem = run_file_stem(t, seed);
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, metrics.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let summary = dir.join(format!("{stem}.json"));
    fs::write(&summary, metrics.summary_json() + "\n").with_context(|| format!("writing {}", summary.display()))?;
    Ok(csv)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn oracle_report(model: &CmdpModel) -> Result<serde_json::Value> {
    let uniform = PolicyParams::tabular(model.n_states(), model.n_actions());
    let eval = evaluate_exact(model, &uniform)?;
    let (j_r_unconstrained, greedy) = optimal_unconstrained(model, Signal::Reward)?;
    let constrained = match solve_constrained_optimum(model) {
        Ok(opt) => {
            let table = policy_from_occupancy(&opt.nu_star);
            let policy: Vec<&[f64]> = (0..model.n_states()).map(|s| table.row(s)).collect();
            json!({
                "j_r_star": opt.j_r_star,
                "j_c": opt.j_c,
                "nu_star": opt.nu_star,
                "policy": policy,
            })
        }
        Err(e @ pdnac_core::Error::Infeasible { .. }) => json!({ "infeasible": e.to_string() }),
        Err(e) => return Err(e.into()),
    };
    Ok(json!({
        "n_states": model.n_states(),
        "n_actions": model.n_actions(),
        "constrained_optimum": constrained,
        "max_average_cost": max_average_cost(model)?,
        "unconstrained_reward_optimum": { "j_r": j_r_unconstrained, "actions": greedy },
        "uniform_policy": {
            "j_r": eval.reward.j,
            "j_c": eval.cost.j,
            "d_pi": eval.d_pi,
            "mixing_time": mixing_time(model, &uniform)?,
        },
    }))
}

fn dump_oracle(dir: &Path, model: &CmdpModel) -> Result<()> {
    let path = dir.join("oracle.json");
    let text = serde_json::to_string_pretty(&oracle_report(model)?)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(exp: &ExperimentArgs, seed: Option<u64>) -> Result<()> {
    let spec = exp.spec()?;
    let [t] = spec.t_values[..] else {
        bail!("`run` takes a single T, got {:?}; use `sweep` for a grid", spec.t_values);
    };
    let seed = seed.unwrap_or(spec.first_seed);
    let model = load_model(&spec)?;
    prepare_out_dir(&spec.out_dir)?;
    if exp.dump_oracle {
        dump_oracle(&spec.out_dir, &model)?;
    }
    let metrics = spec.run_one(&model, t, seed)?;
    for w in &metrics.summary.warnings {
        eprintln!("warning: {w}");
    }
    let csv = write_run(&spec.out_dir, t, seed, &metrics)?;
    println!(
        "T={t} seed={seed}: mean gap {:.6}, mean violation {:.6} -> {}",
        metrics.summary.mean_gap,
        metrics.summary.mean_violation,
        csv.display()
    );
    Ok(())
}

fn cmd_sweep(exp: &ExperimentArgs, seeds: Option<u64>, seed: Option<u64>, threads: Option<usize>) -> Result<()> {
    let mut spec = exp.spec()?;
    if let Some(n) = seeds {
        spec.seeds = n;
    }
    if let Some(s) = seed {
        spec.first_seed = s;
    }
    spec.validate()?;
    let model = load_model(&spec)?;
    prepare_out_dir(&spec.out_dir)?;
    if exp.dump_oracle {
        dump_oracle(&spec.out_dir, &model)?;
    }
    let grid: Vec<(u64, u64)> = spec
        .t_values
        .iter()
        .flat_map(|&t| spec.seed_values().map(move |s| (t, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("starting worker pool")?;
    let results: Vec<Result<RunMetrics>> = pool.install(|| {
        grid.par_iter()
            .map(|&(t, s)| {
                let metrics = spec
                    .run_one(&model, t, s)
                    .with_context(|| format!("run T={t} seed={s}"))?;
                write_run(&spec.out_dir, t, s, &metrics)?;
                log::info!("T={t} seed={s}: mean gap {:.6}", metrics.summary.mean_gap);
                Ok(metrics)
            })
            .collect()
    });
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        summaries.push(r?.summary);
    }
    let rows = aggregate(&spec.t_values, &summaries);
    let path = spec.out_dir.join("aggregate.csv");
    fs::write(&path, aggregate_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    for row in &rows {
        println!(
            "T={}: {} runs, mean gap {:.6}, mean violation {:.6}",
            row.t, row.runs, row.mean_gap, row.mean_violation
        );
    }
    println!("wrote {} runs and {}", summaries.len(), path.display());
    Ok(())
}

fn cmd_oracle(config: Option<&Path>, env_file: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let model = match (env_file, config) {
        (Some(file), _) => CmdpModel::load(file).with_context(|| format!("loading environment {}", file.display()))?,
        (None, Some(path)) => load_model(&ExperimentSpec::load(path)?)?,
        (None, None) => load_model(&ExperimentSpec::default())?,
    };
    let text = serde_json::to_string_pretty(&oracle_report(&model)?)? + "\n";
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Returns whether every selected check passed.
fn cmd_check(names: &[String], list: bool) -> Result<bool> {
    if list {
        for c in &CHECKS {
            println!("{} (budget {} s)", c.name, c.budget.as_secs());
        }
        return Ok(true);
    }
    let selected = if names.is_empty() {
        CHECKS.to_vec()
    } else {
        names
            .iter()
            .map(|n| find_check(n).with_context(|| format!("unknown check `{n}`; see `pdnac check --list`")))
            .collect::<Result<Vec<_>>>()?
    };
    let mut failed = 0;
    for check in &selected {
        let outcome = check.run();
        println!("{outcome}");
        if !outcome.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", selected.len() - failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // help and version exit 0, usage errors exit 2
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PDNAC_LOG", "warn")).init();
    let outcome = match &cli.command {
        Command::Run { exp, seed } => cmd_run(exp, *seed).map(|_| true),
        Command::Sweep { exp, seeds, seed, jobs } => cmd_sweep(exp, *seeds, *seed, *jobs).map(|_| true),
        Command::Oracle { config, env_file, out } => {
            cmd_oracle(config.as_deref(), env_file.as_deref(), out.as_deref()).map(|_| true)
        }
        Command::Check { names, list } => cmd_check(names, *list),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
