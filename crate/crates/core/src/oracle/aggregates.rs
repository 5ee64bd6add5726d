//! Shifted sums over a trajectory.
//!
//! Summing node `i`'s quantity at time `t - sigma[i]` over the nodes `0..=k`
//! removes every internal flow except the one entering node `k` from above,
//! which decouples the problem into scalar subproblems. The functions here
//! evaluate those sums on recorded trajectories and check the identities the
//! optimal controller must satisfy in these coordinates.

use serde::Serialize;

use super::trajectory::Trajectory;
use crate::error::Result;
use crate::synthesis::ControllerParams;

/// Read-only view computing shifted sums of one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedAggregates<'a> {
    traj: &'a Trajectory,
}

pub fn shifted_aggregates(traj: &Trajectory) -> ShiftedAggregates<'_> {
    ShiftedAggregates { traj }
}

impl ShiftedAggregates<'_> {
    fn sigma(&self, i: usize) -> i64 {
        self.traj.spec.sigma()[i] as i64
    }

    /// `sum_{i<=k} z_i[t - sigma_i]`.
    pub fn s(&self, k: usize, t: i64) -> Result<f64> {
        (0..=k).map(|i| self.traj.z_at(i, t - self.sigma(i))).sum()
    }

    /// `sum_{i<=k} v_i[t - sigma_i]`.
    pub fn vsum(&self, k: usize, t: i64) -> Result<f64> {
        (0..=k).map(|i| self.traj.v_at(i, t - self.sigma(i))).sum()
    }

    /// `sum_{i<=k} d_i[t - sigma_i]`.
    pub fn dsum(&self, k: usize, t: i64) -> Result<f64> {
        (0..=k).map(|i| self.traj.d_at(i, t - self.sigma(i))).sum()
    }

    /// `sum_{i<=k} (z_i[t] + sum_{delta=1}^{tau_i} u_i[t - delta])`: everything
    /// held in or travelling toward nodes `0..=k`.
    pub fn m(&self, k: usize, t: i64) -> Result<f64> {
        let spec = &self.traj.spec;
        let mut acc = 0.0;
        for i in 0..=k {
            acc += self.traj.z_at(i, t)?;
            if i + 1 < spec.n() {
                for delta in 1..=spec.tau()[i] as i64 {
                    acc += self.traj.u_at(i, t - delta)?;
                }
            }
        }
        Ok(acc)
    }

    /// Residual of `S_k[t+1] = S_k[t] + V_k[t] + D_k[t] + u_k[t - sigma_{k+1}]`.
    pub fn step_residual(&self, k: usize, t: i64) -> Result<f64> {
        let spec = &self.traj.spec;
        let inflow = if k + 1 < spec.n() {
            self.traj.u_at(k, t - self.sigma(k + 1))?
        } else {
            0.0
        };
        let predicted = self.s(k, t)? + self.vsum(k, t)? + self.dsum(k, t)? + inflow;
        Ok(self.s(k, t + 1)? - predicted)
    }

    /// Times `t` at which `S_k[t]` is unaffected by any flow issued at or after
    /// step 0, clipped to the recorded trajectory. Below the top node the
    /// window closes once flow from above can have arrived.
    pub fn flow_invariant_times(&self, k: usize) -> std::ops::RangeInclusive<i64> {
        let spec = &self.traj.spec;
        let last = self.traj.len() as i64;
        let end = if k + 1 < spec.n() {
            self.sigma(k + 1).min(last)
        } else {
            last
        };
        self.sigma(k) + 1..=end
    }
}

/// Group of the level decomposition at time `t >= 1`: the highest node whose
/// shifted level at `t` lies strictly after the initial state.
fn level_group(sigma: &[usize], t: i64) -> usize {
    sigma.iter().rposition(|&s| (s as i64) < t).unwrap_or(0)
}

/// Group of the production decomposition at time `t >= 0`.
fn production_group(sigma: &[usize], t: i64) -> usize {
    sigma.iter().rposition(|&s| (s as i64) <= t).unwrap_or(0)
}

/// Outcome of evaluating both cost decompositions on a finite trajectory.
///
/// The recorded trajectory covers steps `0..=L` for levels and `0..L` for
/// productions. Terms whose shifted time falls beyond the record cannot be
/// grouped; they are carried separately as `*_leftover`. The cost incurred
/// after step `L` is not part of either side. When the closed loop is run by
/// a stationary optimal law with no disturbances left, that remainder is at
/// most `x_L' P x_L` for the stationary Riccati matrix `P`, which callers
/// can supply through [`DecompositionReport::with_tail_bound`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub level_lhs: f64,
    pub level_rhs: f64,
    pub level_leftover: f64,
    pub level_residual: f64,
    pub production_lhs: f64,
    pub production_rhs: f64,
    pub production_leftover: f64,
    pub production_residual: f64,
    pub tail_bound: Option<f64>,
}

impl DecompositionReport {
    pub fn with_tail_bound(mut self, bound: f64) -> Self {
        self.tail_bound = Some(bound);
        self
    }

    pub fn max_residual(&self) -> f64 {
        self.level_residual.max(self.production_residual)
    }
}

fn relative(lhs: f64, rhs: f64) -> f64 {
    let scale = lhs.abs().max(rhs.abs());
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

/// Compares the direct level and production costs with their expressions in
/// shifted sums, `gamma_k S_k[t]^2` and `rho_k V_k[t]^2`.
pub fn check_cost_decomposition(
    traj: &Trajectory,
    params: &ControllerParams,
) -> Result<DecompositionReport> {
    let spec = &traj.spec;
    let agg = shifted_aggregates(traj);
    let sigma = spec.sigma();
    let len = traj.len() as i64;
    let q = spec.q();
    let r = spec.r();

    let level_lhs = traj.level_cost(traj.len() + 1);
    let mut level_rhs: f64 = (0..spec.n()).map(|i| q[i] * traj.z[0][i].powi(2)).sum();
    for t in 1..=len {
        let k = level_group(sigma, t);
        level_rhs += params.nodes[k].gamma * agg.s(k, t)?.powi(2);
    }
    let mut level_leftover = 0.0;
    for i in 0..spec.n() {
        for s in (len - sigma[i] as i64 + 1).max(1)..=len {
            level_leftover += q[i] * traj.z_at(i, s)?.powi(2);
        }
    }

    let production_lhs = traj.production_cost(traj.len());
    let mut production_rhs = 0.0;
    for t in 0..len {
        let k = production_group(sigma, t);
        production_rhs += params.nodes[k].rho * agg.vsum(k, t)?.powi(2);
    }
    let mut production_leftover = 0.0;
    for i in 0..spec.n() {
        for s in (len - sigma[i] as i64).max(0)..len {
            production_leftover += r[i] * traj.v_at(i, s)?.powi(2);
        }
    }

    Ok(DecompositionReport {
        level_lhs,
        level_rhs,
        level_leftover,
        level_residual: relative(level_lhs, level_rhs + level_leftover),
        production_lhs,
        production_rhs,
        production_leftover,
        production_residual: relative(production_lhs, production_rhs + production_leftover),
        tail_bound: None,
    })
}

/// Largest deviation from the optimal spread of a shifted level,
/// `z_i[t - sigma_i] = (gamma_k / q_i) S_k[t]` for `i <= k`, scaled by the
/// largest shifted level seen.
pub fn level_spread_residual(traj: &Trajectory, params: &ControllerParams) -> Result<f64> {
    let spec = &traj.spec;
    let agg = shifted_aggregates(traj);
    let sigma = spec.sigma();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for t in 1..=traj.len() as i64 {
        let k = level_group(sigma, t);
        let s = agg.s(k, t)?;
        scale = scale.max(s.abs());
        for i in 0..=k {
            let z = traj.z_at(i, t - sigma[i] as i64)?;
            worst = worst.max((z - params.nodes[k].gamma / spec.q()[i] * s).abs());
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// Largest deviation from `v_i[t - sigma_i] = (rho_k / r_i) V_k[t]`, scaled
/// like [`level_spread_residual`].
pub fn production_spread_residual(traj: &Trajectory, params: &ControllerParams) -> Result<f64> {
    let spec = &traj.spec;
    let agg = shifted_aggregates(traj);
    let sigma = spec.sigma();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for t in 0..traj.len() as i64 {
        let k = production_group(sigma, t);
        let vs = agg.vsum(k, t)?;
        scale = scale.max(vs.abs());
        for i in 0..=k {
            let v = traj.v_at(i, t - sigma[i] as i64)?;
            worst = worst.max((v - params.nodes[k].rho / spec.r()[i] * vs).abs());
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}
