//! Planned disturbances and their shifted sums `D_i[t] = sum_{j<=i} d_j[t - sigma_j]`.
//!
//! Every node keeps `D_i[t]` for `t` in `[now + sigma_i, now + sigma_N + H]`
//! together with the downstream contribution `D_{i-1}[t]` it was built from,
//! so a node can refresh an entry after a local plan change without asking
//! its neighbour and without cancelling floating-point terms. Sums are always
//! formed in ascending node order, which makes windows reproducible bit for
//! bit against a from-scratch evaluation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GraphSpec;

/// One planned disturbance in serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub node: usize,
    pub time: i64,
    pub value: f64,
}

/// Sparse schedule of planned disturbances keyed by `(node, absolute time)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<PlanEntry>", into = "Vec<PlanEntry>")]
pub struct DisturbancePlan {
    entries: BTreeMap<(usize, i64), f64>,
}

impl DisturbancePlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: usize, t: i64) -> f64 {
        self.entries.get(&(node, t)).copied().unwrap_or(0.0)
    }

    /// Stores `value`; zero removes the entry.
    pub fn set(&mut self, node: usize, t: i64, value: f64) {
        if value == 0.0 {
            self.entries.remove(&(node, t));
        } else {
            self.entries.insert((node, t), value);
        }
    }

    /// Adds `value` to whatever is already planned at `(node, t)`.
    pub fn add(&mut self, node: usize, t: i64, value: f64) {
        let v = self.get(node, t) + value;
        self.set(node, t, v);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Nonzero entries as `(node, time, value)`, ordered by node then time.
    pub fn iter(&self) -> impl Iterator<Item = (usize, i64, f64)> + '_ {
        self.entries.iter().map(|(&(i, t), &v)| (i, t, v))
    }

    /// Disturbance vector across all nodes at time `t`.
    pub fn at(&self, n: usize, t: i64) -> Vec<f64> {
        (0..n).map(|i| self.get(i, t)).collect()
    }

    /// Latest time carrying a nonzero entry.
    pub fn last_time(&self) -> Option<i64> {
        self.entries.keys().map(|&(_, t)| t).max()
    }

    /// Entries whose time satisfies `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(usize, i64) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(&(i, t), _)| keep(i, t))
                .map(|(&k, &v)| (k, v))
                .collect(),
        }
    }
}

impl From<Vec<PlanEntry>> for DisturbancePlan {
    fn from(entries: Vec<PlanEntry>) -> Self {
        let mut plan = Self::new();
        for e in entries {
            plan.add(e.node, e.time, e.value);
        }
        plan
    }
}

impl From<DisturbancePlan> for Vec<PlanEntry> {
    fn from(plan: DisturbancePlan) -> Self {
        plan.iter()
            .map(|(node, time, value)| PlanEntry { node, time, value })
            .collect()
    }
}

/// Checks that every nonzero entry satisfies `d_i[t] = 0` for
/// `t > now + H + sigma_N - sigma_i`.
pub fn validate_horizon_at(plan: &DisturbancePlan, spec: &GraphSpec, now: i64) -> Result<()> {
    for (node, time, _) in plan.iter() {
        if node >= spec.n() {
            return Err(Error::NodeOutOfRange { node, n: spec.n() });
        }
        let bound = spec.disturbance_bound(node, now);
        if time > bound {
            return Err(Error::HorizonViolation { node, time, bound });
        }
    }
    Ok(())
}

/// [`validate_horizon_at`] with the current time at zero.
pub fn validate_horizon(plan: &DisturbancePlan, spec: &GraphSpec) -> Result<()> {
    validate_horizon_at(plan, spec, 0)
}

/// A node's slice of shifted sums over a contiguous time range.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeWindow {
    start: i64,
    /// `D_{i-1}[t]` as received from downstream (zero on node 0).
    base: VecDeque<f64>,
    /// `D_i[t]`.
    value: VecDeque<f64>,
}

impl NodeWindow {
    pub fn empty(start: i64) -> Self {
        Self {
            start,
            base: VecDeque::new(),
            value: VecDeque::new(),
        }
    }

    /// First time held.
    pub fn start(&self) -> i64 {
        self.start
    }

    /// One past the last time held.
    pub fn end(&self) -> i64 {
        self.start + self.value.len() as i64
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn slot(&self, t: i64) -> Option<usize> {
        (t >= self.start && t < self.end()).then(|| (t - self.start) as usize)
    }

    pub fn get(&self, t: i64) -> Option<f64> {
        self.slot(t).map(|k| self.value[k])
    }

    pub fn base(&self, t: i64) -> Option<f64> {
        self.slot(t).map(|k| self.base[k])
    }

    /// Appends `D_i[end] = base + d`.
    pub fn push(&mut self, base: f64, d: f64) -> f64 {
        let v = base + d;
        self.base.push_back(base);
        self.value.push_back(v);
        v
    }

    /// Rewrites an existing entry as `base + d`.
    pub fn refresh(&mut self, t: i64, base: f64, d: f64) -> Option<f64> {
        let k = self.slot(t)?;
        let v = base + d;
        self.base[k] = base;
        self.value[k] = v;
        Some(v)
    }

    /// Recomputes an entry from the stored base and a new local disturbance.
    pub fn refresh_local(&mut self, t: i64, d: f64) -> Option<f64> {
        let base = self.base(t)?;
        self.refresh(t, base, d)
    }

    /// Drops and returns the oldest entry `(time, D)`.
    pub fn pop_head(&mut self) -> Option<(i64, f64)> {
        let t = self.start;
        self.base.pop_front()?;
        let v = self.value.pop_front()?;
        self.start += 1;
        Some((t, v))
    }

    /// `count` entries starting at `from`.
    pub fn range(&self, from: i64, count: usize) -> Option<Vec<f64>> {
        let k = self.slot(from)?;
        if k + count > self.value.len() {
            return None;
        }
        Some(self.value.range(k..k + count).copied().collect())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.value.iter().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LedgerMessageKind {
    /// Expiring head of node `i` handed to node `i - 1`.
    Shift,
    /// Refreshed `D_i[t]` sent upstream to node `i + 1`.
    Update,
}

/// One value exchanged between neighbours while maintaining the windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerMessage {
    pub from: usize,
    pub to: usize,
    pub kind: LedgerMessageKind,
    pub time: i64,
    pub value: f64,
}

/// A replacement value for one planned disturbance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanChange {
    pub node: usize,
    pub time: i64,
    pub value: f64,
}

/// Shifted-sum windows of every node plus the raw plan they derive from.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceLedger {
    spec: GraphSpec,
    now: i64,
    plan: DisturbancePlan,
    windows: Vec<NodeWindow>,
}

impl DisturbanceLedger {
    /// Validates the plan against the horizon and builds every window with
    /// one upstream pass.
    pub fn init_shifted_sums(plan: DisturbancePlan, spec: &GraphSpec, now: i64) -> Result<Self> {
        validate_horizon_at(&plan, spec, now)?;
        let last = now + (spec.sigma_top() + spec.horizon()) as i64;
        let mut windows: Vec<NodeWindow> = Vec::with_capacity(spec.n());
        for i in 0..spec.n() {
            let sigma = spec.sigma()[i] as i64;
            let mut w = NodeWindow::empty(now + sigma);
            for t in now + sigma..=last {
                let base = match windows.last() {
                    Some(down) => down
                        .get(t)
                        .expect("downstream window covers upstream range"),
                    None => 0.0,
                };
                w.push(base, plan.get(i, t - sigma));
            }
            windows.push(w);
        }
        Ok(Self {
            spec: spec.clone(),
            now,
            plan,
            windows,
        })
    }

    /// Ledger with no planned disturbances.
    pub fn empty(spec: &GraphSpec, now: i64) -> Self {
        Self::init_shifted_sums(DisturbancePlan::new(), spec, now)
            .expect("an empty plan satisfies any horizon")
    }

    pub fn now(&self) -> i64 {
        self.now
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn plan(&self) -> &DisturbancePlan {
        &self.plan
    }

    pub fn window(&self, node: usize) -> &NodeWindow {
        &self.windows[node]
    }

    pub fn windows(&self) -> &[NodeWindow] {
        &self.windows
    }

    /// `D_i[t]`.
    pub fn shifted(&self, node: usize, t: i64) -> Result<f64> {
        self.windows[node]
            .get(t)
            .ok_or(Error::LedgerRange { node, time: t })
    }

    /// `d_i[now]`.
    pub fn d_now(&self, node: usize) -> f64 {
        self.plan.get(node, self.now)
    }

    /// `D_i[now + sigma_i + delta]` for `delta = 0..span_i`, the range the
    /// node's control law reads.
    pub fn operating_range(&self, node: usize) -> Result<Vec<f64>> {
        let from = self.now + self.spec.sigma()[node] as i64;
        self.windows[node]
            .range(from, self.spec.span(node))
            .ok_or(Error::LedgerRange { node, time: from })
    }

    /// Moves the ledger to `now + 1`.
    ///
    /// Each node drops its head `D_i[now + sigma_i]`; node `i > 0` hands
    /// `D_i[now + sigma_i] - d_i[now]` (which equals `D_{i-1}[now + sigma_i]`)
    /// to its downstream neighbour, where it becomes the newest entry of the
    /// range that neighbour's control law reads. Every window then grows by
    /// one tail entry at `now + 1 + sigma_N + H`.
    pub fn advance_time(&mut self) -> Vec<LedgerMessage> {
        let n = self.spec.n();
        let mut messages = Vec::with_capacity(n);
        for i in 0..n {
            let (t, head) = self.windows[i].pop_head().expect("windows are never empty");
            if i > 0 {
                let value = head - self.plan.get(i, self.now);
                debug_assert!(self.windows[i - 1]
                    .get(t)
                    .is_some_and(|held| (held - value).abs() <= 1e-9 * (1.0 + held.abs())));
                messages.push(LedgerMessage {
                    from: i,
                    to: i - 1,
                    kind: LedgerMessageKind::Shift,
                    time: t,
                    value,
                });
            }
        }
        self.now += 1;
        let tail = self.now + (self.spec.sigma_top() + self.spec.horizon()) as i64;
        for i in 0..n {
            let base = if i == 0 {
                0.0
            } else {
                self.windows[i - 1]
                    .get(tail)
                    .expect("tail pushed downstream first")
            };
            let d = self.plan.get(i, tail - self.spec.sigma()[i] as i64);
            let v = self.windows[i].push(base, d);
            if i + 1 < n && v != 0.0 {
                messages.push(LedgerMessage {
                    from: i,
                    to: i + 1,
                    kind: LedgerMessageKind::Update,
                    time: tail,
                    value: v,
                });
            }
        }
        messages
    }

    /// Replaces planned values and refreshes only the affected shifted sums
    /// with one upstream pass. The batch is rejected as a whole if any entry
    /// lies in the past or beyond the horizon bound.
    pub fn apply_plan_updates(&mut self, changes: &[PlanChange]) -> Result<Vec<LedgerMessage>> {
        let n = self.spec.n();
        for c in changes {
            if c.node >= n {
                return Err(Error::NodeOutOfRange { node: c.node, n });
            }
            if c.time < self.now {
                return Err(Error::PastUpdate {
                    node: c.node,
                    time: c.time,
                    now: self.now,
                });
            }
            let bound = self.spec.disturbance_bound(c.node, self.now);
            if c.time > bound && c.value != 0.0 {
                return Err(Error::HorizonViolation {
                    node: c.node,
                    time: c.time,
                    bound,
                });
            }
            if !c.value.is_finite() {
                return Err(Error::NonFinite {
                    field: "disturbance",
                });
            }
        }

        let mut changed: Vec<BTreeSet<i64>> = vec![BTreeSet::new(); n];
        for c in changes {
            let old = self.plan.get(c.node, c.time);
            if old.to_bits() != c.value.to_bits() && !(old == 0.0 && c.value == 0.0) {
                self.plan.set(c.node, c.time, c.value);
                if c.time <= self.spec.disturbance_bound(c.node, self.now) {
                    changed[c.node].insert(c.time);
                }
            }
        }

        let mut messages = Vec::new();
        let mut received: Vec<(i64, f64)> = Vec::new();
        for i in 0..n {
            let sigma = self.spec.sigma()[i] as i64;
            let forward_from = (i + 1 < n).then(|| self.now + self.spec.sigma()[i + 1] as i64);
            let plan = &self.plan;
            let forwarded = refresh_window(
                &mut self.windows[i],
                sigma,
                |t| plan.get(i, t),
                std::mem::take(&mut received),
                &changed[i],
                forward_from,
            );
            for &(t, v) in &forwarded {
                messages.push(LedgerMessage {
                    from: i,
                    to: i + 1,
                    kind: LedgerMessageKind::Update,
                    time: t,
                    value: v,
                });
            }
            received = forwarded;
        }
        Ok(messages)
    }
}

/// One node's share of an update pass.
///
/// `received` holds `D_{i-1}[t]` values sent by the downstream neighbour and
/// `changed` the plan times of this node's own modified entries. Every
/// affected entry is recomputed as `base + d`, and the refreshed values from
/// `forward_from` on are returned for the upstream neighbour, whose window
/// starts there.
pub fn refresh_window(
    window: &mut NodeWindow,
    sigma: i64,
    d: impl Fn(i64) -> f64,
    received: Vec<(i64, f64)>,
    changed: &BTreeSet<i64>,
    forward_from: Option<i64>,
) -> Vec<(i64, f64)> {
    let mut affected: BTreeMap<i64, Option<f64>> =
        received.into_iter().map(|(t, v)| (t, Some(v))).collect();
    for &t in changed {
        affected.entry(t + sigma).or_insert(None);
    }
    let mut forwarded = Vec::new();
    for (t, incoming) in affected {
        let local = d(t - sigma);
        let v = match incoming {
            Some(base) => window.refresh(t, base, local),
            None => window.refresh_local(t, local),
        }
        .expect("affected time inside window");
        if forward_from.is_some_and(|from| t >= from) {
            forwarded.push((t, v));
        }
    }
    forwarded
}
