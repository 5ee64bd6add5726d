use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pathflow::experiment::{
    compare_feedforward, default_grid, random_scenarios, simulate, sweep_horizon, verify_instance,
    verify_suite, ExperimentConfig,
};
use pathflow::harness::{audit_message_log, run_distributed, Schedule};
use pathflow::instances::InstanceRanges;
use pathflow::model::GraphSpec;
use pathflow::oracle::Trajectory;
use pathflow::sim::{run_closed_loop, Duration};
use pathflow::synthesis::synthesize;

/// Structured optimal control of delayed transport chains.
#[derive(Parser)]
#[command(name = "pathflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the planning horizon of the configuration.
    #[arg(long)]
    horizon: Option<usize>,
    /// Never announce planned disturbances to the controller.
    #[arg(long)]
    no_feedforward: bool,
    /// Also print the run summary to stdout.
    #[arg(long)]
    tee_summary: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and write the controller parameters.
    Synth(Common),
    /// Run the closed loop and write the trajectory.
    Simulate(Common),
    /// Compare costs with and without disturbance feed-forward.
    CompareFf(Common),
    /// Closed-loop cost as a function of the planning horizon.
    SweepHorizon(Common),
    /// Check the controller against the dense reference solver.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Number of random instances.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Largest accepted relative deviation.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Run the message-passing network and write its message log.
    Distributed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ScheduleArg::Randomized)]
        schedule: ScheduleArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Sequential,
    Randomized,
    Threaded,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .context("this command needs --config <path>")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).with_context(|| path.display().to_string())?;
    if let Some(h) = common.horizon {
        cfg.horizon = h;
    }
    if common.no_feedforward {
        cfg.feedforward = false;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn write_summary(common: &Common, summary: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)? + "\n";
    let path = out_dir(common)?.join("summary.json");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    if common.tee_summary {
        print!("{text}");
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

/// One row per step and node: `u` is the flow sent toward the node from its
/// upstream neighbour, `step_cost` the node's stage cost and `cum_cost` the
/// running total over all rows so far.
fn write_trajectory(path: &Path, traj: &Trajectory, t0: i64) -> Result<()> {
    let spec = &traj.spec;
    let mut w = csv_writer(path)?;
    w.write_record(["t", "node", "z", "u", "v", "d", "step_cost", "cum_cost"])?;
    let mut cum = 0.0;
    for s in 0..traj.len() {
        for i in 0..spec.n() {
            let z = traj.z[s][i];
            let u = traj.u[s].get(i).copied().unwrap_or(0.0);
            let v = traj.v[s][i];
            let step = spec.q()[i] * z * z + spec.r()[i] * v * v;
            cum += step;
            w.write_record([
                (t0 + s as i64).to_string(),
                (i + 1).to_string(),
                z.to_string(),
                u.to_string(),
                v.to_string(),
                traj.d[s][i].to_string(),
                step.to_string(),
                cum.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn spec_json(spec: &GraphSpec) -> serde_json::Value {
    serde_json::to_value(spec).expect("spec serializes")
}

fn synth(common: &Common) -> Result<bool> {
    let cfg = load(common)?;
    let spec = cfg.spec()?;
    let params = synthesize(&spec);
    let path = out_dir(common)?.join("params.csv");
    let mut w = csv_writer(&path)?;
    for row in params.rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    write_summary(
        common,
        &json!({
            "command": "synth",
            "spec": spec_json(&spec),
            "terminal": params.terminal(),
            "rows": params.rows().len(),
        }),
    )?;
    Ok(true)
}

fn simulate_cmd(common: &Common) -> Result<bool> {
    let cfg = load(common)?;
    let spec = cfg.spec()?;
    let init = cfg.initial_state()?;
    let run = simulate(&spec, &init, &cfg.plan()?, cfg.knowledge(), cfg.steps)?;
    write_trajectory(
        &out_dir(common)?.join("trajectory.csv"),
        &run.trajectory,
        init.t,
    )?;
    write_summary(
        common,
        &json!({
            "command": "simulate",
            "spec": spec_json(&spec),
            "knowledge": cfg.knowledge(),
            "steps": cfg.steps,
            "total_cost": run.cost(),
        }),
    )?;
    Ok(true)
}

fn compare_ff(common: &Common) -> Result<bool> {
    let cfg = load(common)?;
    let spec = cfg.spec()?;
    let cmp = compare_feedforward(&spec, &cfg.initial_state()?, &cfg.plan()?, cfg.steps)?;
    let path = out_dir(common)?.join("compare_ff.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["run", "horizon", "cost"])?;
    for (run, h, cost) in [
        ("feedforward", cmp.horizon.to_string(), cmp.feedforward_cost),
        ("horizon-zero", "0".to_string(), cmp.horizon_zero_cost),
        ("no-feedforward", String::new(), cmp.no_feedforward_cost),
    ] {
        w.write_record([run.to_string(), h, cost.to_string()])?;
    }
    w.flush()?;
    write_summary(
        common,
        &json!({
            "command": "compare-ff",
            "spec": spec_json(&spec),
            "comparison": cmp,
            "feedforward_better": cmp.feedforward_cost < cmp.horizon_zero_cost,
        }),
    )?;
    Ok(true)
}

fn sweep(common: &Common) -> Result<bool> {
    let cfg = load(common)?;
    let spec = cfg.spec()?;
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let plans = match (&cfg.scenarios, cfg.disturbances.is_empty()) {
        (Some(sc), true) => random_scenarios(&spec, sc, seed),
        _ => vec![cfg.plan()?],
    };
    let mut grid = cfg
        .horizon_grid
        .clone()
        .unwrap_or_else(|| default_grid(&spec));
    for must in [0, spec.sigma_top()] {
        if !grid.contains(&must) {
            grid.push(must);
        }
    }
    grid.sort_unstable();
    let points = sweep_horizon(&spec, &cfg.initial_state()?, &plans, &grid)?;
    let path = out_dir(common)?.join("sweep_horizon.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["horizon", "feedforward", "cost"])?;
    for p in &points {
        w.write_record([
            p.horizon.map(|h| h.to_string()).unwrap_or_default(),
            p.horizon.is_some().to_string(),
            p.cost.to_string(),
        ])?;
    }
    w.flush()?;
    let at = |h| points.iter().find(|p| p.horizon == Some(h)).map(|p| p.cost);
    write_summary(
        common,
        &json!({
            "command": "sweep-horizon",
            "spec": spec_json(&spec),
            "seed": seed,
            "scenarios": plans.len(),
            "sigma_top": spec.sigma_top(),
            "cost_h0": at(0),
            "cost_sigma_top": at(spec.sigma_top()),
            "points": points,
        }),
    )?;
    Ok(true)
}

fn verify(common: &Common, count: usize, tolerance: f64) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let mut report = verify_suite(seed, count, &InstanceRanges::default(), tolerance)?;
    if common.config.is_some() {
        let cfg = load(common)?;
        let case = verify_instance(count, &cfg.spec()?, &cfg.initial_state()?, &cfg.plan()?)?;
        report.max_first_step_error = report.max_first_step_error.max(case.first_step_error);
        report.max_cost_error = report.max_cost_error.max(case.cost_error);
        report.cases.push(case);
    }
    let path = out_dir(common)?.join("verify.csv");
    let mut w = csv_writer(&path)?;
    for case in &report.cases {
        w.serialize(case)?;
    }
    w.flush()?;
    let passed = report.passed();
    write_summary(
        common,
        &json!({
            "command": "verify",
            "seed": seed,
            "instances": report.cases.len(),
            "tolerance": tolerance,
            "max_first_step_error": report.max_first_step_error,
            "max_cost_error": report.max_cost_error,
            "passed": passed,
        }),
    )?;
    if !passed {
        eprintln!(
            "verify: deviation above {tolerance:e} (first step {:e}, cost {:e})",
            report.max_first_step_error, report.max_cost_error
        );
    }
    Ok(passed)
}

fn distributed(common: &Common, schedule: ScheduleArg) -> Result<bool> {
    let cfg = load(common)?;
    let spec = cfg.spec()?;
    let init = cfg.initial_state()?;
    let plan = cfg.plan()?;
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let schedule = match schedule {
        ScheduleArg::Sequential => Schedule::Sequential,
        ScheduleArg::Randomized => Schedule::Randomized(seed),
        ScheduleArg::Threaded => Schedule::Threaded,
    };
    let params = synthesize(&spec);
    let run = run_distributed(
        &spec,
        &params,
        &init,
        &plan,
        cfg.knowledge(),
        cfg.steps,
        schedule,
    )?;
    let reference = run_closed_loop(
        &spec,
        &params,
        &init,
        &plan,
        cfg.knowledge(),
        Duration::Steps(cfg.steps),
    )?;
    let identical = reference
        .decisions
        .iter()
        .zip(&run.decisions)
        .all(|(a, b)| {
            a.to_vec()
                .iter()
                .zip(b.to_vec())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let audit = audit_message_log(&run.log, &spec);
    let dir = out_dir(common)?;
    let file = fs::File::create(dir.join("messages.csv")).context("writing messages.csv")?;
    run.log.write_csv(file)?;
    write_trajectory(&dir.join("trajectory.csv"), &run.trajectory, init.t)?;
    write_summary(
        common,
        &json!({
            "command": "distributed",
            "spec": spec_json(&spec),
            "seed": seed,
            "knowledge": cfg.knowledge(),
            "steps": cfg.steps,
            "messages": run.log.len(),
            "total_cost": run.trajectory.cost(),
            "matches_sequential": identical,
            "audit": audit,
            "audit_passed": audit.passed(),
        }),
    )?;
    if !identical {
        eprintln!("distributed: decisions differ from the sequential controller");
    }
    if !audit.passed() {
        eprintln!("distributed: message audit failed");
    }
    Ok(identical && audit.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Simulate(c) => simulate_cmd(c),
        Command::CompareFf(c) => compare_ff(c),
        Command::SweepHorizon(c) => sweep(c),
        Command::Verify {
            common,
            count,
            tolerance,
        } => {
            if *count == 0 && common.config.is_none() {
                bail!("nothing to verify");
            }
            verify(common, *count, *tolerance)
        }
        Command::Distributed { common, schedule } => distributed(common, *schedule),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
