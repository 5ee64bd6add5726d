//! Seeded random problem instances.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ledger::DisturbancePlan;
use crate::model::{GraphSpec, PlantState};

/// Sampling ranges, all inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRanges {
    pub nodes: (usize, usize),
    pub delay: (i64, i64),
    pub horizon: (usize, usize),
    pub weight: (f64, f64),
    /// Magnitude bound for initial levels and in-transit flows.
    pub state_scale: f64,
    /// Probability that a slot inside the look-ahead bound carries a disturbance.
    pub disturbance_density: f64,
    pub disturbance_scale: f64,
}

impl Default for InstanceRanges {
    fn default() -> Self {
        Self {
            nodes: (1, 6),
            delay: (1, 4),
            horizon: (0, 6),
            weight: (0.1, 10.0),
            state_scale: 1.0,
            disturbance_density: 0.3,
            disturbance_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub spec: GraphSpec,
    pub init: PlantState,
    pub plan: DisturbancePlan,
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weights are drawn log-uniformly so both ends of the range get exercised.
fn weight<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

pub fn random_spec<R: Rng>(rng: &mut R, ranges: &InstanceRanges) -> GraphSpec {
    let n = rng.gen_range(ranges.nodes.0..=ranges.nodes.1);
    let tau = (1..n)
        .map(|_| rng.gen_range(ranges.delay.0..=ranges.delay.1))
        .collect();
    let q = (0..n).map(|_| weight(rng, ranges.weight)).collect();
    let r = (0..n).map(|_| weight(rng, ranges.weight)).collect();
    let h = rng.gen_range(ranges.horizon.0..=ranges.horizon.1);
    GraphSpec::new(tau, q, r, h).expect("sampled ranges are valid")
}

pub fn random_state<R: Rng>(rng: &mut R, spec: &GraphSpec, scale: f64) -> PlantState {
    let mut sample = || rng.gen_range(-scale..=scale);
    let z = (0..spec.n()).map(|_| sample()).collect();
    let pipelines = spec
        .tau()
        .iter()
        .map(|&t| (0..t).map(|_| sample()).collect())
        .collect();
    PlantState::new(spec, z, Some(pipelines)).expect("finite sample")
}

/// Sparse plan that respects every node's look-ahead bound from `now`.
pub fn random_plan<R: Rng>(
    rng: &mut R,
    spec: &GraphSpec,
    now: i64,
    density: f64,
    scale: f64,
) -> DisturbancePlan {
    let mut plan = DisturbancePlan::new();
    for i in 0..spec.n() {
        for t in now..=spec.disturbance_bound(i, now) {
            if rng.gen_bool(density) {
                plan.set(i, t, rng.gen_range(-scale..=scale));
            }
        }
    }
    plan
}

pub fn random_instance<R: Rng>(rng: &mut R, ranges: &InstanceRanges) -> Instance {
    let spec = random_spec(rng, ranges);
    let init = random_state(rng, &spec, ranges.state_scale);
    let plan = random_plan(
        rng,
        &spec,
        init.t,
        ranges.disturbance_density,
        ranges.disturbance_scale,
    );
    Instance { spec, init, plan }
}
