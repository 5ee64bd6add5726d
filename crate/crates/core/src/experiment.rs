//! Experiment configuration and drivers shared by the command line tool and
//! the acceptance suite.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::control_step;
use crate::error::{Error, Result};
use crate::instances::{random_instance, rng_for, InstanceRanges};
use crate::ledger::{DisturbanceLedger, DisturbancePlan};
use crate::model::{GraphSpec, PlantState, RawSpec};
use crate::oracle::DenseOracle;
use crate::sim::{run_closed_loop, ClosedLoopRun, Duration, Knowledge};
use crate::synthesis::synthesize;

pub const SCHEMA_VERSION: u32 = 1;

/// A constant disturbance on one node over a closed range of time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceRecord {
    /// One-based node index, 1 being the most downstream node.
    pub node: usize,
    pub start_time: i64,
    pub end_time: i64,
    pub amount_per_step: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub z: Vec<f64>,
    #[serde(default)]
    pub pipelines: Option<Vec<Vec<f64>>>,
}

/// Random disturbance scenarios for horizon sweeps: each scenario hits
/// `nodes_hit` distinct random nodes with a pulse of random total size and
/// duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomScenarios {
    pub trials: usize,
    pub nodes_hit: usize,
    /// Inclusive range of the total pulse size.
    pub total: (f64, f64),
    /// Inclusive range of the pulse length in steps.
    pub length: (i64, i64),
    /// Inclusive range of the pulse start time.
    pub start: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub description: Option<String>,
    pub n: usize,
    pub tau: Vec<i64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub horizon: usize,
    #[serde(default)]
    pub initial: Option<InitialState>,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceRecord>,
    /// Closed-loop run length.
    pub steps: usize,
    #[serde(default = "default_true")]
    pub feedforward: bool,
    #[serde(default)]
    pub horizon_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub scenarios: Option<RandomScenarios>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config: field `schema_version`: unsupported version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.spec()?;
        cfg.plan()?;
        cfg.initial_state()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn spec(&self) -> Result<GraphSpec> {
        GraphSpec::try_from(RawSpec {
            n: self.n,
            tau: self.tau.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            horizon: self.horizon,
        })
        .map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn plan(&self) -> Result<DisturbancePlan> {
        records_to_plan(&self.disturbances, self.n)
    }

    pub fn initial_state(&self) -> Result<PlantState> {
        let spec = self.spec()?;
        match &self.initial {
            None => Ok(PlantState::zero(&spec)),
            Some(init) => PlantState::new(&spec, init.z.clone(), init.pipelines.clone())
                .map_err(|e| Error::Config(format!("config: field `initial`: {e}"))),
        }
    }

    pub fn knowledge(&self) -> Knowledge {
        if self.feedforward {
            Knowledge::Receding
        } else {
            Knowledge::None
        }
    }
}

pub fn records_to_plan(records: &[DisturbanceRecord], n: usize) -> Result<DisturbancePlan> {
    let mut plan = DisturbancePlan::new();
    for (k, rec) in records.iter().enumerate() {
        let at = |msg: String| Error::Config(format!("config: field `disturbances[{k}]`: {msg}"));
        if rec.node == 0 || rec.node > n {
            return Err(at(format!("node {} outside 1..={n}", rec.node)));
        }
        if rec.end_time < rec.start_time {
            return Err(at("end_time before start_time".into()));
        }
        if rec.start_time < 0 {
            return Err(at("negative start_time".into()));
        }
        if !rec.amount_per_step.is_finite() {
            return Err(at("amount_per_step is not finite".into()));
        }
        for t in rec.start_time..=rec.end_time {
            plan.add(rec.node - 1, t, rec.amount_per_step);
        }
    }
    Ok(plan)
}

/// Summary of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub horizon: usize,
    pub knowledge: Knowledge,
    pub steps: usize,
    pub total_cost: f64,
}

pub fn simulate(
    spec: &GraphSpec,
    init: &PlantState,
    plan: &DisturbancePlan,
    knowledge: Knowledge,
    steps: usize,
) -> Result<ClosedLoopRun> {
    let params = synthesize(spec);
    run_closed_loop(spec, &params, init, plan, knowledge, Duration::Steps(steps))
}

/// Costs of the same scenario under different amounts of disturbance
/// information.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedforwardComparison {
    pub horizon: usize,
    pub steps: usize,
    /// Announcements up to the configured horizon.
    pub feedforward_cost: f64,
    /// Announcements only as far ahead as the delays force (`H = 0`).
    pub horizon_zero_cost: f64,
    /// Disturbances never announced.
    pub no_feedforward_cost: f64,
}

pub fn compare_feedforward(
    spec: &GraphSpec,
    init: &PlantState,
    plan: &DisturbancePlan,
    steps: usize,
) -> Result<FeedforwardComparison> {
    let cost = |s: &GraphSpec, k| simulate(s, init, plan, k, steps).map(|run| run.cost());
    Ok(FeedforwardComparison {
        horizon: spec.horizon(),
        steps,
        feedforward_cost: cost(spec, Knowledge::Receding)?,
        horizon_zero_cost: cost(&spec.with_horizon(0), Knowledge::Receding)?,
        no_feedforward_cost: cost(spec, Knowledge::None)?,
    })
}

/// Plans drawn according to `scenarios`.
pub fn random_scenarios(
    spec: &GraphSpec,
    scenarios: &RandomScenarios,
    seed: u64,
) -> Vec<DisturbancePlan> {
    let mut rng = rng_for(seed);
    let hit = scenarios.nodes_hit.min(spec.n());
    (0..scenarios.trials)
        .map(|_| {
            let nodes = rand::seq::index::sample(&mut rng, spec.n(), hit);
            let mut plan = DisturbancePlan::new();
            for node in nodes.iter() {
                let total = rng.gen_range(scenarios.total.0..=scenarios.total.1);
                let len = rng
                    .gen_range(scenarios.length.0..=scenarios.length.1)
                    .max(1);
                let start = rng.gen_range(scenarios.start.0..=scenarios.start.1);
                for t in start..start + len {
                    plan.add(node, t, total / len as f64);
                }
            }
            plan
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonPoint {
    /// `None` for the run without feed-forward.
    pub horizon: Option<usize>,
    /// Mean closed-loop cost over the scenarios.
    pub cost: f64,
}

/// Mean closed-loop cost for every horizon in `grid`, followed by the run
/// without feed-forward. Every run lasts until the plant has settled after
/// the last disturbance.
pub fn sweep_horizon(
    spec: &GraphSpec,
    init: &PlantState,
    plans: &[DisturbancePlan],
    grid: &[usize],
) -> Result<Vec<HorizonPoint>> {
    let settings: Vec<Option<usize>> = grid.iter().map(|&h| Some(h)).chain([None]).collect();
    settings
        .par_iter()
        .map(|&h| {
            let s = spec.with_horizon(h.unwrap_or(0));
            let params = synthesize(&s);
            let knowledge = if h.is_some() {
                Knowledge::Receding
            } else {
                Knowledge::None
            };
            let mut total = 0.0;
            for plan in plans {
                let run = run_closed_loop(
                    &s,
                    &params,
                    init,
                    plan,
                    knowledge,
                    Duration::settle_after(plan, init.t),
                )?;
                total += run.cost();
            }
            Ok(HorizonPoint {
                horizon: h,
                cost: total / plans.len().max(1) as f64,
            })
        })
        .collect()
}

/// Default sweep grid: every horizon from 0 to `sigma_N`.
pub fn default_grid(spec: &GraphSpec) -> Vec<usize> {
    (0..=spec.sigma_top()).collect()
}

/// Outcome of comparing the structured controller with the dense oracle on
/// one random instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCase {
    pub case: usize,
    pub n: usize,
    pub horizon: usize,
    pub first_step_error: f64,
    pub cost_error: f64,
    pub oracle_cost: f64,
    pub closed_loop_cost: f64,
    pub settled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<VerifyCase>,
    pub max_first_step_error: f64,
    pub max_cost_error: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.max_first_step_error <= self.tolerance
            && self.max_cost_error <= self.tolerance
            && self.cases.iter().all(|c| c.settled)
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().chain(a).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Differential check of one instance: first control step and total
/// closed-loop cost against the dense oracle.
pub fn verify_instance(
    case: usize,
    spec: &GraphSpec,
    init: &PlantState,
    plan: &DisturbancePlan,
) -> Result<VerifyCase> {
    let oracle = DenseOracle::new(spec)?;
    let sol = oracle.solve(init, plan, oracle.default_length())?;
    let params = synthesize(spec);
    let ledger = DisturbanceLedger::init_shifted_sums(plan.clone(), spec, init.t)?;
    let (first, _) = control_step(init, &ledger, &params)?;
    let run = run_closed_loop(
        spec,
        &params,
        init,
        plan,
        Knowledge::Upfront,
        Duration::settle_after(plan, init.t),
    )?;
    let closed = run.cost();
    Ok(VerifyCase {
        case,
        n: spec.n(),
        horizon: spec.horizon(),
        first_step_error: relative_error(&first.to_vec(), &sol.first().to_vec()),
        cost_error: relative_error(&[closed], &[sol.cost]),
        oracle_cost: sol.cost,
        closed_loop_cost: closed,
        settled: run.settled,
    })
}

/// Runs [`verify_instance`] on `count` seeded random instances in parallel.
pub fn verify_suite(
    seed: u64,
    count: usize,
    ranges: &InstanceRanges,
    tolerance: f64,
) -> Result<VerifyReport> {
    let mut rng = rng_for(seed);
    let instances: Vec<_> = (0..count)
        .map(|_| random_instance(&mut rng, ranges))
        .collect();
    let cases = instances
        .par_iter()
        .enumerate()
        .map(|(k, inst)| verify_instance(k, &inst.spec, &inst.init, &inst.plan))
        .collect::<Result<Vec<_>>>()?;
    let max_first_step_error = cases.iter().map(|c| c.first_step_error).fold(0.0, f64::max);
    let max_cost_error = cases.iter().map(|c| c.cost_error).fold(0.0, f64::max);
    Ok(VerifyReport {
        seed,
        tolerance,
        cases,
        max_first_step_error,
        max_cost_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            description: None,
            n: 2,
            tau: vec![1],
            q: vec![1.0, 1.0],
            r: vec![1.0, 1.0],
            horizon: 1,
            initial: None,
            disturbances: vec![DisturbanceRecord {
                node: 2,
                start_time: 1,
                end_time: 3,
                amount_per_step: -0.5,
            }],
            steps: 10,
            feedforward: true,
            horizon_grid: None,
            scenarios: None,
            seed: None,
        }
    }

    #[test]
    fn round_trip() {
        let cfg = base();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        let plan = back.plan().unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.get(1, 2), -0.5);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = base();
        cfg.schema_version = 7;
        let err = ExperimentConfig::from_json(&cfg.to_json()).unwrap_err();
        assert!(err.to_string().contains("schema_version"));

        let mut cfg = base();
        cfg.disturbances[0].node = 3;
        let err = ExperimentConfig::from_json(&cfg.to_json()).unwrap_err();
        assert!(err.to_string().contains("disturbances[0]"), "{err}");

        let text = base().to_json().replace("\"steps\"", "\"stepz\"");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn scenarios_are_seeded() {
        let spec = GraphSpec::uniform(vec![3; 4], 1.0, 50.0, 0).unwrap();
        let sc = RandomScenarios {
            trials: 3,
            nodes_hit: 2,
            total: (-1.0, 0.0),
            length: (1, 5),
            start: (0, 10),
        };
        let a = random_scenarios(&spec, &sc, 9);
        assert_eq!(a, random_scenarios(&spec, &sc, 9));
        assert!(a.iter().all(|p| p
            .iter()
            .map(|(i, _, _)| i)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
            <= 2));
    }
}
