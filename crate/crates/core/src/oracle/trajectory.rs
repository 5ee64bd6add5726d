use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{plant_step, ControlDecision, GraphSpec, PlantState};

/// Recorded plant trajectory. Times are relative to the initial state, which
/// sits at step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub spec: GraphSpec,
    /// Pipelines of the initial state, so flows issued before step 0 can be
    /// recovered.
    pub init_pipelines: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    last: PlantState,
}

impl Trajectory {
    pub fn new(spec: &GraphSpec, init: &PlantState) -> Result<Self> {
        if !init.is_finite() {
            return Err(Error::NonFinite {
                field: "initial state",
            });
        }
        Ok(Self {
            spec: spec.clone(),
            init_pipelines: init.pipelines.clone(),
            z: vec![init.z.clone()],
            u: Vec::new(),
            v: Vec::new(),
            d: Vec::new(),
            last: init.clone(),
        })
    }

    /// Applies one step and records it.
    pub fn push(&mut self, action: &ControlDecision, d: &[f64]) -> Result<&PlantState> {
        let next = plant_step(&self.spec, &self.last, action, d)?;
        self.u.push(action.u.clone());
        self.v.push(action.v.clone());
        self.d.push(d.to_vec());
        self.z.push(next.z.clone());
        self.last = next;
        Ok(&self.last)
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn last_state(&self) -> &PlantState {
        &self.last
    }

    /// Level of `node` at step `t`, `0 <= t <= len`.
    pub fn z_at(&self, node: usize, t: i64) -> Result<f64> {
        self.check(t, self.z.len())?;
        Ok(self.z[t as usize][node])
    }

    /// Flow on `edge` issued at step `t`. Negative `t` reads the initial
    /// pipelines; the top node has no upstream edge and reads as zero.
    pub fn u_at(&self, edge: usize, t: i64) -> Result<f64> {
        if edge + 1 >= self.spec.n() {
            return Ok(0.0);
        }
        if t < 0 {
            let tau = self.spec.tau()[edge] as i64;
            if t < -tau {
                return Err(Error::TrajectoryRange {
                    time: t,
                    available: self.len() as i64,
                });
            }
            return Ok(self.init_pipelines[edge][(t + tau) as usize]);
        }
        self.check(t, self.u.len())?;
        Ok(self.u[t as usize][edge])
    }

    pub fn v_at(&self, node: usize, t: i64) -> Result<f64> {
        self.check(t, self.v.len())?;
        Ok(self.v[t as usize][node])
    }

    pub fn d_at(&self, node: usize, t: i64) -> Result<f64> {
        self.check(t, self.d.len())?;
        Ok(self.d[t as usize][node])
    }

    fn check(&self, t: i64, len: usize) -> Result<()> {
        if t < 0 || t as usize >= len {
            Err(Error::TrajectoryRange {
                time: t,
                available: self.len() as i64,
            })
        } else {
            Ok(())
        }
    }

    /// `sum_t sum_i q_i z_i[t]^2 + r_i v_i[t]^2` over the recorded steps.
    pub fn cost(&self) -> f64 {
        self.level_cost(self.len()) + self.production_cost(self.len())
    }

    /// Level cost over steps `0..steps`.
    pub fn level_cost(&self, steps: usize) -> f64 {
        self.z[..steps]
            .iter()
            .map(|z| {
                z.iter()
                    .zip(self.spec.q())
                    .map(|(z, q)| q * z * z)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Production cost over steps `0..steps`.
    pub fn production_cost(&self, steps: usize) -> f64 {
        self.v[..steps]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(self.spec.r())
                    .map(|(v, r)| r * v * v)
                    .sum::<f64>()
            })
            .sum()
    }
}
