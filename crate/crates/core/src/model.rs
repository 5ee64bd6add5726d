//! Problem instances, the delayed transport dynamics and cost accounting.
//!
//! Nodes are stored zero-based: `z[0]` is the most downstream node. Edge `i`
//! carries flow `u[i]` from node `i + 1` into node `i` and takes `tau[i]`
//! steps to arrive. The boundary flows into the bottom of node 0 and out of
//! the top node are identically zero and never stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregate delays `sigma[k] = tau[0] + ... + tau[k-1]`, one entry per node.
///
/// The last entry is the total delay from the top node down to node 0.
pub fn aggregate_delays(tau: &[i64]) -> Result<Vec<usize>> {
    let mut sigma = Vec::with_capacity(tau.len() + 1);
    let mut acc = 0usize;
    sigma.push(0);
    for (edge, &t) in tau.iter().enumerate() {
        if t < 1 {
            return Err(Error::InvalidDelay { edge, value: t });
        }
        acc += t as usize;
        sigma.push(acc);
    }
    Ok(sigma)
}

/// Unvalidated instance description, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSpec {
    pub n: usize,
    pub tau: Vec<i64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub horizon: usize,
}

/// A validated problem instance. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct GraphSpec {
    n: usize,
    tau: Vec<usize>,
    q: Vec<f64>,
    r: Vec<f64>,
    horizon: usize,
    sigma: Vec<usize>,
}

impl GraphSpec {
    pub fn new(tau: Vec<i64>, q: Vec<f64>, r: Vec<f64>, horizon: usize) -> Result<Self> {
        validate_spec(&RawSpec {
            n: q.len(),
            tau,
            q,
            r,
            horizon,
        })
    }

    /// Uniform weights on every node.
    pub fn uniform(tau: Vec<i64>, q: f64, r: f64, horizon: usize) -> Result<Self> {
        let n = tau.len() + 1;
        Self::new(tau, vec![q; n], vec![r; n], horizon)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    /// Total delay from the top node to node 0.
    pub fn sigma_top(&self) -> usize {
        self.sigma[self.n - 1]
    }

    /// Number of look-ahead slots a node's control law spans: `tau[i]` for
    /// nodes with an upstream edge, `H + 1` for the top node.
    pub fn span(&self, node: usize) -> usize {
        if node + 1 == self.n {
            self.horizon + 1
        } else {
            self.tau[node]
        }
    }

    /// Latest time at which node `node` may carry a nonzero planned
    /// disturbance, relative to `now`.
    pub fn disturbance_bound(&self, node: usize, now: i64) -> i64 {
        now + (self.horizon + self.sigma_top() - self.sigma[node]) as i64
    }

    /// Total number of in-transit slots over all edges.
    pub fn pipeline_slots(&self) -> usize {
        self.tau.iter().sum()
    }

    /// Same graph and weights with a different planning horizon.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    pub fn to_raw(&self) -> RawSpec {
        RawSpec {
            n: self.n,
            tau: self.tau.iter().map(|&t| t as i64).collect(),
            q: self.q.clone(),
            r: self.r.clone(),
            horizon: self.horizon,
        }
    }
}

impl TryFrom<RawSpec> for GraphSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        validate_spec(&raw)
    }
}

impl From<GraphSpec> for RawSpec {
    fn from(spec: GraphSpec) -> Self {
        spec.to_raw()
    }
}

/// Checks sizes and positivity and derives the aggregate delays.
pub fn validate_spec(raw: &RawSpec) -> Result<GraphSpec> {
    if raw.n == 0 {
        return Err(Error::InvalidSize);
    }
    let expect = |field, found: usize, expected: usize| {
        if found == expected {
            Ok(())
        } else {
            Err(Error::Shape {
                field,
                expected,
                found,
            })
        }
    };
    expect("tau", raw.tau.len(), raw.n - 1)?;
    expect("q", raw.q.len(), raw.n)?;
    expect("r", raw.r.len(), raw.n)?;
    for (field, w) in [("q", &raw.q), ("r", &raw.r)] {
        for (node, &value) in w.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidWeight { field, node, value });
            }
        }
    }
    let sigma = aggregate_delays(&raw.tau)?;
    Ok(GraphSpec {
        n: raw.n,
        tau: raw.tau.iter().map(|&t| t as usize).collect(),
        q: raw.q.clone(),
        r: raw.r.clone(),
        horizon: raw.horizon,
        sigma,
    })
}

/// Node levels and in-transit flows at absolute time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub t: i64,
    pub z: Vec<f64>,
    /// `pipelines[i][k]` holds `u_i[t - tau_i + k]`, oldest first, so slot 0
    /// is the flow arriving at node `i` during the current step.
    pub pipelines: Vec<Vec<f64>>,
}

impl PlantState {
    /// Equilibrium state with empty pipelines.
    pub fn zero(spec: &GraphSpec) -> Self {
        Self {
            t: 0,
            z: vec![0.0; spec.n()],
            pipelines: spec.tau().iter().map(|&t| vec![0.0; t]).collect(),
        }
    }

    pub fn new(spec: &GraphSpec, z: Vec<f64>, pipelines: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let mut state = Self::zero(spec);
        if z.len() != spec.n() {
            return Err(Error::Shape {
                field: "z",
                expected: spec.n(),
                found: z.len(),
            });
        }
        state.z = z;
        if let Some(p) = pipelines {
            if p.len() != spec.n() - 1 {
                return Err(Error::Shape {
                    field: "pipelines",
                    expected: spec.n() - 1,
                    found: p.len(),
                });
            }
            for (buf, &tau) in p.iter().zip(spec.tau()) {
                if buf.len() != tau {
                    return Err(Error::Shape {
                        field: "pipeline",
                        expected: tau,
                        found: buf.len(),
                    });
                }
            }
            state.pipelines = p;
        }
        if !state.is_finite() {
            return Err(Error::NonFinite { field: "state" });
        }
        Ok(state)
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|x| x.is_finite())
            && self.pipelines.iter().flatten().all(|x| x.is_finite())
    }

    /// Flattened coordinates: levels first, then each pipeline oldest first.
    pub fn to_augmented(&self) -> Vec<f64> {
        let mut x = self.z.clone();
        for p in &self.pipelines {
            x.extend_from_slice(p);
        }
        x
    }

    pub fn from_augmented(spec: &GraphSpec, t: i64, x: &[f64]) -> Result<Self> {
        let dim = spec.n() + spec.pipeline_slots();
        if x.len() != dim {
            return Err(Error::Shape {
                field: "augmented state",
                expected: dim,
                found: x.len(),
            });
        }
        let z = x[..spec.n()].to_vec();
        let mut offset = spec.n();
        let mut pipelines = Vec::with_capacity(spec.n() - 1);
        for &tau in spec.tau() {
            pipelines.push(x[offset..offset + tau].to_vec());
            offset += tau;
        }
        Ok(Self { t, z, pipelines })
    }

    /// Quantity stored in nodes plus quantity in transit.
    pub fn total_quantity(&self) -> f64 {
        self.z.iter().sum::<f64>() + self.pipelines.iter().flatten().sum::<f64>()
    }
}

/// Flows and productions applied during one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    /// `u[i]` moves quantity from node `i + 1` into edge `i`.
    pub u: Vec<f64>,
    /// Flexible production at each node.
    pub v: Vec<f64>,
}

impl ControlDecision {
    pub fn zero(spec: &GraphSpec) -> Self {
        Self {
            u: vec![0.0; spec.n() - 1],
            v: vec![0.0; spec.n()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Flows followed by productions, the input ordering of the augmented system.
    pub fn to_vec(&self) -> Vec<f64> {
        self.u.iter().chain(&self.v).copied().collect()
    }

    pub fn from_slice(spec: &GraphSpec, w: &[f64]) -> Self {
        let edges = spec.n() - 1;
        Self {
            u: w[..edges].to_vec(),
            v: w[edges..edges + spec.n()].to_vec(),
        }
    }
}

/// Advances the plant one step:
/// `z_i[t+1] = z_i[t] - u_{i-1}[t] + u_i[t - tau_i] + v_i[t] + d_i[t]`.
pub fn plant_step(
    spec: &GraphSpec,
    state: &PlantState,
    action: &ControlDecision,
    d: &[f64],
) -> Result<PlantState> {
    let n = spec.n();
    let check = |field, found: usize, expected: usize| {
        if found != expected {
            Err(Error::Shape {
                field,
                expected,
                found,
            })
        } else {
            Ok(())
        }
    };
    check("z", state.z.len(), n)?;
    check("u", action.u.len(), n - 1)?;
    check("v", action.v.len(), n)?;
    check("d", d.len(), n)?;
    check("pipelines", state.pipelines.len(), n - 1)?;
    for (buf, &tau) in state.pipelines.iter().zip(spec.tau()) {
        check("pipeline", buf.len(), tau)?;
    }

    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let outflow = if i > 0 { action.u[i - 1] } else { 0.0 };
        let arrival = if i + 1 < n {
            state.pipelines[i][0]
        } else {
            0.0
        };
        z.push(state.z[i] - outflow + arrival + action.v[i] + d[i]);
    }
    let pipelines = state
        .pipelines
        .iter()
        .zip(&action.u)
        .map(|(buf, &u)| {
            let mut next = Vec::with_capacity(buf.len());
            next.extend_from_slice(&buf[1..]);
            next.push(u);
            next
        })
        .collect();
    Ok(PlantState {
        t: state.t + 1,
        z,
        pipelines,
    })
}

/// Stage cost `sum_i q_i z_i^2 + r_i v_i^2`.
pub fn stage_cost(spec: &GraphSpec, z: &[f64], v: &[f64]) -> f64 {
    z.iter()
        .zip(v)
        .zip(spec.q().iter().zip(spec.r()))
        .map(|((z, v), (q, r))| q * z * z + r * v * v)
        .sum()
}

/// Running quadratic cost of a trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub accumulated: f64,
    pub per_step: Option<Vec<f64>>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recording() -> Self {
        Self {
            accumulated: 0.0,
            per_step: Some(Vec::new()),
        }
    }

    /// Adds the stage cost of `state` and `action`; returns the increment.
    pub fn accumulate(
        &mut self,
        spec: &GraphSpec,
        state: &PlantState,
        action: &ControlDecision,
    ) -> f64 {
        let step = stage_cost(spec, &state.z, &action.v);
        self.accumulated += step;
        if let Some(log) = self.per_step.as_mut() {
            log.push(step);
        }
        step
    }
}
