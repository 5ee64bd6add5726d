use nalgebra::{DMatrix, DVector};

use super::augmented::{build_augmented_system, AugmentedSystem};
use super::riccati::{stationary_gain, StationaryGain};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::ledger::{validate_horizon_at, DisturbancePlan};
use crate::model::{ControlDecision, GraphSpec, PlantState};

/// Steps beyond `sigma_N + H` included by default.
pub const DEFAULT_MARGIN: usize = 60;

const CONDITION_WARNING: f64 = 1e12;

/// Dense LQ reference for one problem instance.
///
/// The finite-horizon problem is solved as a single unconstrained quadratic
/// program over the stacked inputs, with the dynamics eliminated. Beyond the
/// last planned disturbance the problem is an ordinary stationary LQ problem,
/// so the stationary Riccati matrix as terminal weight makes the truncated
/// problem exact for any length past `sigma_N + H`.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    spec: GraphSpec,
    system: AugmentedSystem,
    stationary: StationaryGain,
}

/// Optimal open-loop solution from a given initial state.
#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    pub inputs: Vec<ControlDecision>,
    /// Augmented states `x_0..=x_T`.
    pub states: Vec<DVector<f64>>,
    /// `sum_{t<T} (x'Qx + w'Rw) + x_T' P x_T`.
    pub cost: f64,
    /// Rough conditioning estimate of the normal-equation matrix.
    pub condition_estimate: f64,
}

impl FiniteHorizonSolution {
    pub fn first(&self) -> &ControlDecision {
        &self.inputs[0]
    }
}

impl DenseOracle {
    pub fn new(spec: &GraphSpec) -> Result<Self> {
        let system = build_augmented_system(spec);
        let stationary = stationary_gain(&system)?;
        if stationary.residual > 1e-8 * stationary.p.amax().max(1.0) {
            log::warn!("stationary Riccati residual {:e}", stationary.residual);
        }
        Ok(Self {
            spec: spec.clone(),
            system,
            stationary,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn system(&self) -> &AugmentedSystem {
        &self.system
    }

    pub fn stationary(&self) -> &StationaryGain {
        &self.stationary
    }

    /// `sigma_N + H + DEFAULT_MARGIN`.
    pub fn default_length(&self) -> usize {
        self.spec.sigma_top() + self.spec.horizon() + DEFAULT_MARGIN
    }

    /// Dense stationary feedback applied to a plant state.
    pub fn stationary_action(&self, state: &PlantState) -> ControlDecision {
        let x = DVector::from_vec(state.to_augmented());
        let w = &self.stationary.k * x;
        ControlDecision::from_slice(&self.spec, w.as_slice())
    }

    /// Stationary optimal cost from `state` when no disturbance remains,
    /// `x' P x`.
    pub fn cost_to_go(&self, state: &PlantState) -> f64 {
        let x = DVector::from_vec(state.to_augmented());
        x.dot(&(&self.stationary.p * &x))
    }

    /// Optimal inputs over `len` steps from `init`, with `init.t` as time zero
    /// of the plan.
    pub fn solve(
        &self,
        init: &PlantState,
        plan: &DisturbancePlan,
        len: usize,
    ) -> Result<FiniteHorizonSolution> {
        let required = self.spec.sigma_top() + self.spec.horizon();
        if len <= required {
            return Err(Error::InvalidHorizon { t: len, required });
        }
        validate_horizon_at(plan, &self.spec, init.t)?;

        let sys = &self.system;
        let (n, m) = (sys.dim(), sys.inputs());
        let p_term = &self.stationary.p;
        let disturbance = |s: usize| DVector::from_vec(plan.at(self.spec.n(), init.t + s as i64));

        // free response
        let mut free = Vec::with_capacity(len + 1);
        free.push(DVector::from_vec(init.to_augmented()));
        for s in 0..len {
            let next = &sys.a * &free[s] + &sys.e * disturbance(s);
            free.push(next);
        }

        // adjoint of the free response: lambda_t = Q_t f_t + A' lambda_{t+1}
        let at = sys.a.transpose();
        let mut lambda = vec![DVector::zeros(n); len + 1];
        lambda[len] = p_term * &free[len];
        for t in (1..len).rev() {
            lambda[t] = &sys.q * &free[t] + &at * &lambda[t + 1];
        }

        // weights of future state deviations: L_t = Q + A' L_{t+1} A, L_T = P
        let mut l_times_b = vec![DMatrix::zeros(n, m); len + 1];
        let mut l = p_term.clone();
        l_times_b[len] = &l * &sys.b;
        for t in (1..len).rev() {
            l = &sys.q + &at * &l * &sys.a;
            l_times_b[t] = &l * &sys.b;
        }

        // A^k B
        let mut powers = Vec::with_capacity(len);
        powers.push(sys.b.clone());
        for k in 1..len {
            let next = &sys.a * &powers[k - 1];
            powers.push(next);
        }

        let dim = len * m;
        let mut hess = DMatrix::zeros(dim, dim);
        let mut grad = DVector::zeros(dim);
        for s2 in 0..len {
            let lb = &l_times_b[s2 + 1];
            for s1 in 0..=s2 {
                let block = powers[s2 - s1].transpose() * lb;
                hess.view_mut((s1 * m, s2 * m), (m, m)).copy_from(&block);
                if s1 != s2 {
                    hess.view_mut((s2 * m, s1 * m), (m, m))
                        .copy_from(&block.transpose());
                }
            }
            let mut diag = hess.view_mut((s2 * m, s2 * m), (m, m));
            diag += &sys.r;
            let g = sys.b.transpose() * &lambda[s2 + 1];
            grad.rows_mut(s2 * m, m).copy_from(&g);
        }

        let lu = hess.lu();
        let u_diag = lu.u().diagonal().map(f64::abs);
        let condition_estimate = (u_diag.max() / u_diag.min()).powi(2);
        if condition_estimate > CONDITION_WARNING {
            log::warn!("oracle normal equations poorly conditioned (~{condition_estimate:e})");
        }
        let w = lu.solve(&(-grad)).ok_or(Error::Singular {
            context: "finite-horizon oracle",
        })?;

        let mut states = Vec::with_capacity(len + 1);
        let mut inputs = Vec::with_capacity(len);
        let mut x = free[0].clone();
        let mut cost = 0.0;
        for s in 0..len {
            let ws = w.rows(s * m, m).into_owned();
            cost += x.dot(&(&sys.q * &x)) + ws.dot(&(&sys.r * &ws));
            let next = sys.step(&x, &ws, &disturbance(s));
            inputs.push(ControlDecision::from_slice(&self.spec, ws.as_slice()));
            states.push(std::mem::replace(&mut x, next));
        }
        cost += x.dot(&(p_term * &x));
        states.push(x);

        Ok(FiniteHorizonSolution {
            inputs,
            states,
            cost,
            condition_estimate,
        })
    }

    /// Open-loop optimal trajectory expressed in plant coordinates.
    pub fn trajectory(
        &self,
        init: &PlantState,
        plan: &DisturbancePlan,
        sol: &FiniteHorizonSolution,
    ) -> Result<Trajectory> {
        let mut traj = Trajectory::new(&self.spec, init)?;
        for (s, w) in sol.inputs.iter().enumerate() {
            let d = plan.at(self.spec.n(), init.t + s as i64);
            traj.push(w, &d)?;
        }
        Ok(traj)
    }
}
