//! Closed-loop simulation of the structured controller.

use serde::{Deserialize, Serialize};

use crate::controller::control_step;
use crate::error::{Error, Result};
use crate::ledger::{DisturbanceLedger, DisturbancePlan, PlanChange};
use crate::model::{ControlDecision, GraphSpec, PlantState};
use crate::oracle::Trajectory;
use crate::synthesis::ControllerParams;

/// How much of the disturbance plan the controller is told about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Knowledge {
    /// Every entry is announced as soon as it falls inside the node's
    /// look-ahead bound.
    #[default]
    Receding,
    /// The whole plan is loaded at the start; it must already satisfy the
    /// look-ahead bound.
    Upfront,
    /// Disturbances hit the plant unannounced.
    None,
}

/// Stopping rule for [`run_closed_loop`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Duration {
    Steps(usize),
    /// Run at least `min_steps`, then until every level and in-transit flow
    /// is below `tolerance` times the largest magnitude seen, or `max_steps`.
    Settle {
        min_steps: usize,
        tolerance: f64,
        max_steps: usize,
    },
}

impl Duration {
    /// Settling run long enough to cover every planned disturbance.
    pub fn settle_after(plan: &DisturbancePlan, init_t: i64) -> Self {
        let last = plan
            .last_time()
            .map_or(0, |t| (t - init_t + 1).max(0) as usize);
        Duration::Settle {
            min_steps: last + 1,
            tolerance: 1e-13,
            max_steps: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub decisions: Vec<ControlDecision>,
    pub settled: bool,
}

impl ClosedLoopRun {
    pub fn cost(&self) -> f64 {
        self.trajectory.cost()
    }
}

/// Plan entries to announce at `now`: everything inside the look-ahead bound
/// on the first call, afterwards only entries that just came into reach.
pub(crate) fn announcements(
    plan: &DisturbancePlan,
    spec: &GraphSpec,
    now: i64,
    first: bool,
) -> Vec<PlanChange> {
    plan.iter()
        .filter(|&(i, t, _)| {
            let bound = spec.disturbance_bound(i, now);
            t >= now && t <= bound && (first || t == bound)
        })
        .map(|(node, time, value)| PlanChange { node, time, value })
        .collect()
}

/// Simulates the plant under the structured controller from `init`, with
/// `plan` (absolute times) acting on the plant.
pub fn run_closed_loop(
    spec: &GraphSpec,
    params: &ControllerParams,
    init: &PlantState,
    plan: &DisturbancePlan,
    knowledge: Knowledge,
    duration: Duration,
) -> Result<ClosedLoopRun> {
    if params.n() != spec.n() {
        return Err(Error::Shape {
            field: "params",
            expected: spec.n(),
            found: params.n(),
        });
    }
    let mut ledger = match knowledge {
        Knowledge::Upfront => DisturbanceLedger::init_shifted_sums(plan.clone(), spec, init.t)?,
        Knowledge::Receding => {
            let mut l = DisturbanceLedger::empty(spec, init.t);
            l.apply_plan_updates(&announcements(plan, spec, init.t, true))?;
            l
        }
        Knowledge::None => DisturbanceLedger::empty(spec, init.t),
    };
    let mut traj = Trajectory::new(spec, init)?;
    let mut decisions = Vec::new();
    let mut state = init.clone();
    let mut peak = state
        .to_augmented()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let (min_steps, max_steps, tolerance) = match duration {
        Duration::Steps(s) => (s, s, None),
        Duration::Settle {
            min_steps,
            tolerance,
            max_steps,
        } => (min_steps, max_steps.max(min_steps), Some(tolerance)),
    };
    let mut settled = tolerance.is_none();
    for step in 0..max_steps {
        if let Some(tol) = tolerance {
            let size = state
                .to_augmented()
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()));
            if step >= min_steps && size <= tol * peak.max(f64::MIN_POSITIVE) {
                settled = true;
                break;
            }
        }
        let (decision, _) = control_step(&state, &ledger, params)?;
        if !decision.is_finite() {
            return Err(Error::NonFinite {
                field: "control decision",
            });
        }
        let d = plan.at(spec.n(), state.t);
        state = traj.push(&decision, &d)?.clone();
        peak = state
            .to_augmented()
            .iter()
            .fold(peak, |m, x| m.max(x.abs()));
        decisions.push(decision);
        ledger.advance_time();
        if knowledge == Knowledge::Receding {
            ledger.apply_plan_updates(&announcements(plan, spec, state.t, false))?;
        }
    }
    if !settled {
        log::warn!("closed loop did not settle within {max_steps} steps");
    }
    Ok(ClosedLoopRun {
        trajectory: traj,
        decisions,
        settled,
    })
}
