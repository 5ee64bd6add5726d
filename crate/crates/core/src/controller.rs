//! Online two-sweep control law.
//!
//! An upstream pass (node 0 to the top) accumulates `delta_i`, a downstream
//! pass (top to node 0) accumulates `mu_i`. The two passes share nothing and
//! may run concurrently; once both finish every node computes its own flow
//! and production from local quantities.
//!
//! The per-node functions here are the unit of work of both the sequential
//! controller and the message-passing harness, so the two produce identical
//! floating-point results.

use crate::error::{Error, Result};
use crate::ledger::DisturbanceLedger;
use crate::model::{ControlDecision, PlantState};
use crate::synthesis::{ControllerParams, NodeParams};

/// What node `i` observes locally at the current step.
#[derive(Debug, Clone, Copy)]
pub struct LocalView<'a> {
    pub z: f64,
    /// In-transit flows `u_i[t - tau_i + delta]`; empty on the top node.
    pub pipeline: &'a [f64],
    /// `D_i[t + sigma_i + delta]` for `delta = 0..span`.
    pub shifted: &'a [f64],
    /// `d_i[t]`.
    pub d_now: f64,
}

impl LocalView<'_> {
    fn inflow(&self, delta: usize) -> f64 {
        self.pipeline.get(delta).copied().unwrap_or(0.0)
    }
}

/// `Phi_i = phi_i(1) z_i + sum_delta phi_i(delta+1) (u_i[t-(tau_i-delta)] + D_i[t+sigma_i+delta])`.
pub fn local_phi(np: &NodeParams, view: &LocalView) -> f64 {
    let mut acc = np.phi[0] * view.z;
    for delta in 0..np.span {
        acc += np.phi[delta] * (view.inflow(delta) + view.shifted[delta]);
    }
    acc
}

/// `pi_i = z_i + sum_delta (u_i[t-(tau_i-delta)] + D_i[t+sigma_i+delta]) prod_{j=2}^{delta+1} g_i(j)`.
pub fn local_pi(np: &NodeParams, view: &LocalView) -> f64 {
    let mut acc = view.z;
    for delta in 0..np.span {
        acc += (view.inflow(delta) + view.shifted[delta]) * np.pi_weights[delta];
    }
    acc
}

/// `delta_i = Phi_i + (1 - P_i(tau_i, 1)) delta_{i-1}`.
pub fn carry_delta(np: &NodeParams, phi: f64, delta_down: f64) -> f64 {
    phi + np.delta_carry() * delta_down
}

/// `mu_i = pi_i + b_i mu_{i+1}`.
pub fn carry_mu(np: &NodeParams, pi: f64, mu_up: f64) -> f64 {
    pi + np.b * mu_up
}

/// Flow out of node `i` toward `i - 1` (absent for node 0) and production at `i`.
pub fn local_actions(
    np: &NodeParams,
    view: &LocalView,
    delta_down: f64,
    mu: f64,
    has_downstream: bool,
) -> (Option<f64>, f64) {
    let head = view.shifted[0];
    let u = has_downstream.then(|| {
        (1.0 - np.gamma / np.q) * (view.z + view.inflow(0) + head) - np.a * delta_down
            + np.c * mu
            + view.d_now
            - head
    });
    let v = -(np.x1() / np.r) * (delta_down + (1.0 - np.h_prev) * mu);
    (u, v)
}

/// Per-node intermediates of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepState {
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Local observations of every node, owning the shifted ranges.
struct Views<'a> {
    state: &'a PlantState,
    shifted: Vec<Vec<f64>>,
    d_now: Vec<f64>,
}

impl<'a> Views<'a> {
    fn gather(
        state: &'a PlantState,
        ledger: &DisturbanceLedger,
        params: &ControllerParams,
    ) -> Result<Self> {
        let n = params.n();
        for (field, found) in [("z", state.z.len()), ("ledger nodes", ledger.spec().n())] {
            if found != n {
                return Err(Error::Shape {
                    field,
                    expected: n,
                    found,
                });
            }
        }
        let shifted = (0..n)
            .map(|i| {
                let from = ledger.now() + params.sigma[i] as i64;
                ledger
                    .window(i)
                    .range(from, params.nodes[i].span)
                    .ok_or(Error::LedgerRange {
                        node: i,
                        time: from,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let d_now = (0..n).map(|i| ledger.d_now(i)).collect();
        Ok(Self {
            state,
            shifted,
            d_now,
        })
    }

    fn view(&self, i: usize) -> LocalView<'_> {
        LocalView {
            z: self.state.z[i],
            pipeline: self.state.pipelines.get(i).map_or(&[], Vec::as_slice),
            shifted: &self.shifted[i],
            d_now: self.d_now[i],
        }
    }
}

fn upstream(views: &Views, params: &ControllerParams) -> (Vec<f64>, Vec<f64>) {
    let n = params.n();
    let mut phi = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut carry = 0.0;
    for (i, np) in params.nodes.iter().enumerate() {
        let p = local_phi(np, &views.view(i));
        carry = carry_delta(np, p, carry);
        phi.push(p);
        delta.push(carry);
    }
    (phi, delta)
}

fn downstream(views: &Views, params: &ControllerParams) -> (Vec<f64>, Vec<f64>) {
    let n = params.n();
    let mut pi = vec![0.0; n];
    let mut mu = vec![0.0; n];
    let mut carry = 0.0;
    for (i, np) in params.nodes.iter().enumerate().rev() {
        pi[i] = local_pi(np, &views.view(i));
        carry = carry_mu(np, pi[i], carry);
        mu[i] = carry;
    }
    (pi, mu)
}

fn actions(views: &Views, params: &ControllerParams, delta: &[f64], mu: &[f64]) -> ControlDecision {
    let n = params.n();
    let mut u = vec![0.0; n.saturating_sub(1)];
    let mut v = vec![0.0; n];
    for (i, np) in params.nodes.iter().enumerate() {
        let delta_down = if i == 0 { 0.0 } else { delta[i - 1] };
        let (flow, prod) = local_actions(np, &views.view(i), delta_down, mu[i], i > 0);
        if let Some(f) = flow {
            u[i - 1] = f;
        }
        v[i] = prod;
    }
    ControlDecision { u, v }
}

/// `Phi` and `delta` for every node.
pub fn upstream_sweep(
    state: &PlantState,
    ledger: &DisturbanceLedger,
    params: &ControllerParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(upstream(&Views::gather(state, ledger, params)?, params))
}

/// `pi` and `mu` for every node.
pub fn downstream_sweep(
    state: &PlantState,
    ledger: &DisturbanceLedger,
    params: &ControllerParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(downstream(&Views::gather(state, ledger, params)?, params))
}

/// Flows and productions from completed sweeps.
pub fn compute_actions(
    state: &PlantState,
    ledger: &DisturbanceLedger,
    delta: &[f64],
    mu: &[f64],
    params: &ControllerParams,
) -> Result<ControlDecision> {
    Ok(actions(
        &Views::gather(state, ledger, params)?,
        params,
        delta,
        mu,
    ))
}

/// One full control step. The ledger's clock defines the current time.
pub fn control_step(
    state: &PlantState,
    ledger: &DisturbanceLedger,
    params: &ControllerParams,
) -> Result<(ControlDecision, SweepState)> {
    let views = Views::gather(state, ledger, params)?;
    let (phi, delta) = upstream(&views, params);
    let (pi, mu) = downstream(&views, params);
    let decision = actions(&views, params, &delta, &mu);
    Ok((decision, SweepState { phi, delta, pi, mu }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::DisturbancePlan;
    use crate::model::GraphSpec;
    use crate::synthesis::synthesize;
    use approx::assert_relative_eq;

    #[test]
    fn equilibrium_gives_zero_everything() {
        let spec = GraphSpec::uniform(vec![2, 1, 3], 1.0, 2.0, 3).unwrap();
        let params = synthesize(&spec);
        let state = PlantState::zero(&spec);
        let ledger = DisturbanceLedger::empty(&spec, 0);
        let (d, s) = control_step(&state, &ledger, &params).unwrap();
        assert!(d.u.iter().chain(&d.v).all(|&x| x == 0.0));
        assert!(s
            .delta
            .iter()
            .chain(&s.mu)
            .chain(&s.phi)
            .chain(&s.pi)
            .all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_golden_ratio_gain() {
        let spec = GraphSpec::uniform(vec![], 1.0, 1.0, 0).unwrap();
        let params = synthesize(&spec);
        let state = PlantState::new(&spec, vec![2.0], None).unwrap();
        let ledger = DisturbanceLedger::empty(&spec, 0);
        let (d, _) = control_step(&state, &ledger, &params).unwrap();
        let gain = (5f64.sqrt() - 1.0) / 2.0;
        assert_relative_eq!(d.v[0], -gain * 2.0, epsilon = 1e-14);
    }

    #[test]
    fn sweep_boundaries() {
        let spec = GraphSpec::new(vec![1, 2], vec![1.0, 2.0, 0.5], vec![3.0, 1.0, 2.0], 2).unwrap();
        let params = synthesize(&spec);
        let state = PlantState::new(
            &spec,
            vec![0.3, -1.0, 0.8],
            Some(vec![vec![0.4], vec![0.1, -0.2]]),
        )
        .unwrap();
        let ledger = DisturbanceLedger::empty(&spec, 0);
        let (phi, delta) = upstream_sweep(&state, &ledger, &params).unwrap();
        assert_eq!(delta[0], phi[0]);
        let (pi, mu) = downstream_sweep(&state, &ledger, &params).unwrap();
        assert_eq!(mu[2], pi[2]);
        // unit delay, no disturbances: pi = z + u[t-1]
        assert_eq!(pi[0], 0.3 + 0.4);
    }

    #[test]
    fn missing_window_is_a_range_error() {
        let spec = GraphSpec::uniform(vec![2], 1.0, 1.0, 1).unwrap();
        let params = synthesize(&spec);
        let state = PlantState::zero(&spec);
        let other = GraphSpec::uniform(vec![2], 1.0, 1.0, 0).unwrap();
        let ledger = DisturbanceLedger::empty(&other, 0);
        assert!(control_step(&state, &ledger, &params).is_err());
    }

    #[test]
    fn scaling_inputs_scales_actions() {
        let spec = GraphSpec::new(vec![2, 1], vec![1.0, 0.4, 2.0], vec![0.7, 3.0, 1.0], 2).unwrap();
        let params = synthesize(&spec);
        let mut plan = DisturbancePlan::new();
        plan.set(0, 0, 0.3);
        plan.set(2, 1, -0.6);
        plan.set(1, 3, 1.1);
        let state = PlantState::new(
            &spec,
            vec![1.0, -0.5, 0.25],
            Some(vec![vec![0.2, -0.1], vec![0.6]]),
        )
        .unwrap();
        let ledger = DisturbanceLedger::init_shifted_sums(plan.clone(), &spec, 0).unwrap();
        let (base, _) = control_step(&state, &ledger, &params).unwrap();

        let alpha = -2.5;
        let mut scaled_plan = DisturbancePlan::new();
        for (i, t, v) in plan.iter() {
            scaled_plan.set(i, t, alpha * v);
        }
        let scaled_state = PlantState {
            t: 0,
            z: state.z.iter().map(|x| alpha * x).collect(),
            pipelines: state
                .pipelines
                .iter()
                .map(|p| p.iter().map(|x| alpha * x).collect())
                .collect(),
        };
        let ledger = DisturbanceLedger::init_shifted_sums(scaled_plan, &spec, 0).unwrap();
        let (scaled, _) = control_step(&scaled_state, &ledger, &params).unwrap();
        for (a, b) in base.to_vec().iter().zip(scaled.to_vec()) {
            assert!((alpha * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }
}
