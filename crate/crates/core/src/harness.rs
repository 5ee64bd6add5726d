//! Message-passing execution of the controller and the disturbance ledger.
//!
//! Each [`NodeUnit`] owns one node's parameters, measurements, shifted-sum
//! window and planned disturbances, and talks to the rest of the network only
//! through its two neighbour links. The [`Network`] moves messages between
//! explicit queues and decides which ready node runs next; it never reads a
//! unit's private state on the unit's behalf.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::io::Write;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controller::{carry_delta, carry_mu, local_actions, local_phi, local_pi, LocalView};
use crate::error::{Error, Result};
use crate::ledger::{refresh_window, DisturbancePlan, NodeWindow, PlanChange};
use crate::model::{ControlDecision, GraphSpec, PlantState};
use crate::oracle::Trajectory;
use crate::sim::{announcements, Knowledge};
use crate::synthesis::{ControllerParams, NodeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MessageKind {
    #[serde(rename = "delta")]
    Delta,
    #[serde(rename = "mu")]
    Mu,
    #[serde(rename = "d-shift")]
    DShift,
    #[serde(rename = "d-update")]
    DUpdate,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Delta => "delta",
            MessageKind::Mu => "mu",
            MessageKind::DShift => "d-shift",
            MessageKind::DUpdate => "d-update",
        }
    }

    pub fn is_sweep(self) -> bool {
        matches!(self, MessageKind::Delta | MessageKind::Mu)
    }
}

/// One delivered message. Node ids are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MessageRecord {
    pub round: i64,
    pub from: usize,
    pub to: usize,
    pub kind: MessageKind,
    /// Time stamp of the shifted sum carried by ledger messages.
    pub time: Option<i64>,
    pub value: f64,
}

/// Records in the order they were sent.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MessageLog {
    pub records: Vec<MessageRecord>,
}

impl MessageLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: MessageLog) {
        self.records.extend(other.records);
    }

    pub fn count(&self, round: i64, kind: MessageKind) -> usize {
        self.records
            .iter()
            .filter(|r| r.round == round && r.kind == kind)
            .count()
    }

    /// CSV with columns `round,from,to,kind,value`; nodes are one-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Config(format!("writing message log: {e}"));
        w.write_record(["round", "from", "to", "kind", "value"])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                (r.from + 1).to_string(),
                (r.to + 1).to_string(),
                r.kind.as_str().to_string(),
                r.value.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Config(format!("writing message log: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Toward the top node.
    Up,
    /// Toward node 0.
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Envelope {
    kind: MessageKind,
    time: Option<i64>,
    value: f64,
}

/// How the two sweeps of a control round are interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Upstream sweep to completion, then the downstream sweep.
    Sequential,
    /// Repeatedly picks a uniformly random ready node task.
    Randomized(u64),
    /// One OS thread per node and sweep, blocking on channel receives.
    Threaded,
}

/// Local measurements of one node at the start of a round.
#[derive(Debug, Clone, PartialEq)]
struct Measurement {
    z: f64,
    pipeline: Vec<f64>,
}

/// One node of the network.
#[derive(Debug, Clone)]
pub struct NodeUnit {
    id: usize,
    params: NodeParams,
    has_down: bool,
    has_up: bool,
    /// Own aggregate delay.
    sigma: i64,
    /// Aggregate delay of the upstream neighbour; decides which refreshed
    /// entries that neighbour needs.
    up_sigma: Option<i64>,
    /// `sigma_N + H`, the common look-ahead reach.
    reach: i64,
    now: i64,
    window: NodeWindow,
    plan: BTreeMap<i64, f64>,
    measurement: Measurement,
}

/// Per-round scratch of one node.
#[derive(Debug, Clone, Default)]
struct RoundScratch {
    delta_down: Option<f64>,
    delta: Option<f64>,
    mu_up: Option<f64>,
    mu: Option<f64>,
}

impl NodeUnit {
    fn new(id: usize, spec: &GraphSpec, params: &ControllerParams, now: i64) -> Self {
        let n = spec.n();
        let sigma = spec.sigma()[id] as i64;
        let reach = (spec.sigma_top() + spec.horizon()) as i64;
        let mut window = NodeWindow::empty(now + sigma);
        for _ in now + sigma..=now + reach {
            window.push(0.0, 0.0);
        }
        Self {
            id,
            params: params.nodes[id].clone(),
            has_down: id > 0,
            has_up: id + 1 < n,
            sigma,
            up_sigma: (id + 1 < n).then(|| spec.sigma()[id + 1] as i64),
            reach,
            now,
            window,
            plan: BTreeMap::new(),
            measurement: Measurement {
                z: 0.0,
                pipeline: vec![0.0; if id + 1 < n { spec.tau()[id] } else { 0 }],
            },
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn params(&self) -> &NodeParams {
        &self.params
    }

    pub fn window(&self) -> &NodeWindow {
        &self.window
    }

    fn d(&self, t: i64) -> f64 {
        self.plan.get(&t).copied().unwrap_or(0.0)
    }

    fn shifted(&self) -> Result<Vec<f64>> {
        let from = self.now + self.sigma;
        self.window
            .range(from, self.params.span)
            .ok_or(Error::LedgerRange {
                node: self.id,
                time: from,
            })
    }

    fn with_view<T>(&self, f: impl FnOnce(&LocalView) -> T) -> Result<T> {
        let shifted = self.shifted()?;
        let view = LocalView {
            z: self.measurement.z,
            pipeline: &self.measurement.pipeline,
            shifted: &shifted,
            d_now: self.d(self.now),
        };
        Ok(f(&view))
    }

    fn upstream_step(&self, delta_down: f64) -> Result<f64> {
        let phi = self.with_view(|v| local_phi(&self.params, v))?;
        Ok(carry_delta(&self.params, phi, delta_down))
    }

    fn downstream_step(&self, mu_up: f64) -> Result<f64> {
        let pi = self.with_view(|v| local_pi(&self.params, v))?;
        Ok(carry_mu(&self.params, pi, mu_up))
    }

    fn actuate(&self, delta_down: f64, mu: f64) -> Result<(Option<f64>, f64)> {
        self.with_view(|v| local_actions(&self.params, v, delta_down, mu, self.has_down))
    }

    fn validate_change(&self, time: i64, value: f64) -> Result<()> {
        if time < self.now {
            return Err(Error::PastUpdate {
                node: self.id,
                time,
                now: self.now,
            });
        }
        let bound = self.now + self.reach - self.sigma;
        if time > bound && value != 0.0 {
            return Err(Error::HorizonViolation {
                node: self.id,
                time,
                bound,
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                field: "disturbance",
            });
        }
        Ok(())
    }

    /// Stores local plan changes; returns the plan times that need a refresh.
    fn store_changes(&mut self, changes: &[(i64, f64)]) -> BTreeSet<i64> {
        let bound = self.now + self.reach - self.sigma;
        let mut changed = BTreeSet::new();
        for &(time, value) in changes {
            let old = self.d(time);
            if old.to_bits() != value.to_bits() && !(old == 0.0 && value == 0.0) {
                if value == 0.0 {
                    self.plan.remove(&time);
                } else {
                    self.plan.insert(time, value);
                }
                if time <= bound {
                    changed.insert(time);
                }
            }
        }
        changed
    }
}

/// A path of [`NodeUnit`]s joined by neighbour links with explicit queues.
#[derive(Debug, Clone)]
pub struct Network {
    units: Vec<NodeUnit>,
    /// Queue into node `i` from below and from above.
    from_below: Vec<VecDeque<Envelope>>,
    from_above: Vec<VecDeque<Envelope>>,
    failed: HashSet<usize>,
    now: i64,
}

struct Outbox<'a> {
    round: i64,
    from: usize,
    n: usize,
    failed: &'a HashSet<usize>,
    sent: Vec<(usize, Direction, Envelope)>,
    log: Vec<MessageRecord>,
}

impl<'a> Outbox<'a> {
    fn new(round: i64, from: usize, n: usize, failed: &'a HashSet<usize>) -> Self {
        Self {
            round,
            from,
            n,
            failed,
            sent: Vec::new(),
            log: Vec::new(),
        }
    }

    fn send(&mut self, dir: Direction, env: Envelope) -> Result<()> {
        let to = match dir {
            Direction::Up if self.from + 1 < self.n => self.from + 1,
            Direction::Down if self.from > 0 => self.from - 1,
            _ => unreachable!("boundary nodes never send outward"),
        };
        if self.failed.contains(&self.from.min(to)) {
            return Err(Error::LinkFailure {
                from: self.from,
                to,
            });
        }
        self.log.push(MessageRecord {
            round: self.round,
            from: self.from,
            to,
            kind: env.kind,
            time: env.time,
            value: env.value,
        });
        self.sent.push((to, dir, env));
        Ok(())
    }
}

impl Network {
    /// Units with empty windows at time `now`. Plans arrive through
    /// [`Network::apply_plan_updates`].
    pub fn new(spec: &GraphSpec, params: &ControllerParams, now: i64) -> Result<Self> {
        if params.n() != spec.n() {
            return Err(Error::Shape {
                field: "params",
                expected: spec.n(),
                found: params.n(),
            });
        }
        let n = spec.n();
        Ok(Self {
            units: (0..n)
                .map(|i| NodeUnit::new(i, spec, params, now))
                .collect(),
            from_below: vec![VecDeque::new(); n],
            from_above: vec![VecDeque::new(); n],
            failed: HashSet::new(),
            now,
        })
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn now(&self) -> i64 {
        self.now
    }

    pub fn units(&self) -> &[NodeUnit] {
        &self.units
    }

    /// Marks the link on edge `edge` (between nodes `edge` and `edge + 1`)
    /// as failed or restores it.
    pub fn set_link_failed(&mut self, edge: usize, failed: bool) {
        if failed {
            self.failed.insert(edge);
        } else {
            self.failed.remove(&edge);
        }
    }

    fn deliver(&mut self, sent: Vec<(usize, Direction, Envelope)>) {
        for (to, dir, env) in sent {
            match dir {
                Direction::Up => self.from_below[to].push_back(env),
                Direction::Down => self.from_above[to].push_back(env),
            }
        }
    }

    fn clear_queues(&mut self) {
        self.from_below.iter_mut().for_each(VecDeque::clear);
        self.from_above.iter_mut().for_each(VecDeque::clear);
    }

    /// Hands each node its own level and inbound pipeline.
    fn measure(&mut self, state: &PlantState) -> Result<()> {
        if state.t != self.now {
            return Err(Error::Config(format!(
                "measurement at t={} but network is at t={}",
                state.t, self.now
            )));
        }
        if state.z.len() != self.n() {
            return Err(Error::Shape {
                field: "z",
                expected: self.n(),
                found: state.z.len(),
            });
        }
        for unit in &mut self.units {
            unit.measurement = Measurement {
                z: state.z[unit.id],
                pipeline: state.pipelines.get(unit.id).cloned().unwrap_or_default(),
            };
            if unit.measurement.pipeline.len() != unit.params.span && unit.has_up {
                return Err(Error::Shape {
                    field: "pipeline",
                    expected: unit.params.span,
                    found: unit.measurement.pipeline.len(),
                });
            }
        }
        Ok(())
    }

    /// One control round: both sweeps, then every node actuates. On any
    /// failure nothing is actuated and the queues are discarded.
    pub fn run_control_round(
        &mut self,
        state: &PlantState,
        schedule: Schedule,
    ) -> Result<(ControlDecision, MessageLog)> {
        self.measure(state)?;
        let result = match schedule {
            Schedule::Sequential => self.sweeps_queued(None),
            Schedule::Randomized(seed) => self.sweeps_queued(Some(ChaCha8Rng::seed_from_u64(seed))),
            Schedule::Threaded => self.sweeps_threaded(),
        };
        self.clear_queues();
        let (scratch, log) = result?;
        let n = self.n();
        let mut decision = ControlDecision {
            u: vec![0.0; n - 1],
            v: vec![0.0; n],
        };
        for (unit, s) in self.units.iter().zip(&scratch) {
            let delta_down = s.delta_down.unwrap_or(0.0);
            let mu = s.mu.expect("downstream sweep completed");
            let (flow, prod) = unit.actuate(delta_down, mu)?;
            if let Some(f) = flow {
                decision.u[unit.id - 1] = f;
            }
            decision.v[unit.id] = prod;
        }
        Ok((decision, log))
    }

    fn sweeps_queued(
        &mut self,
        mut rng: Option<ChaCha8Rng>,
    ) -> Result<(Vec<RoundScratch>, MessageLog)> {
        let n = self.n();
        let mut scratch = vec![RoundScratch::default(); n];
        let mut log = MessageLog::default();
        #[derive(Clone, Copy, PartialEq)]
        enum Task {
            Up(usize),
            Down(usize),
        }
        loop {
            // a task is ready when its input has arrived (or it has none)
            let mut ready = Vec::new();
            for i in 0..n {
                if scratch[i].delta.is_none() && (i == 0 || !self.from_below[i].is_empty()) {
                    ready.push(Task::Up(i));
                }
                if scratch[i].mu.is_none() && (i + 1 == n || !self.from_above[i].is_empty()) {
                    ready.push(Task::Down(i));
                }
            }
            let task = match (&mut rng, ready.first()) {
                (_, None) => break,
                (Some(rng), _) => *ready.choose(rng).expect("nonempty"),
                (None, _) => *ready
                    .iter()
                    .find(|t| matches!(t, Task::Up(_)))
                    .unwrap_or(&ready[0]),
            };
            let (i, mut out) = match task {
                Task::Up(i) => (i, Outbox::new(self.now, i, n, &self.failed)),
                Task::Down(i) => (i, Outbox::new(self.now, i, n, &self.failed)),
            };
            match task {
                Task::Up(_) => {
                    let down = if i > 0 {
                        let env = self.from_below[i].pop_front().expect("ready");
                        debug_assert_eq!(env.kind, MessageKind::Delta);
                        Some(env.value)
                    } else {
                        None
                    };
                    let delta = self.units[i].upstream_step(down.unwrap_or(0.0))?;
                    if self.units[i].has_up {
                        out.send(
                            Direction::Up,
                            Envelope {
                                kind: MessageKind::Delta,
                                time: None,
                                value: delta,
                            },
                        )?;
                    }
                    scratch[i].delta_down = down;
                    scratch[i].delta = Some(delta);
                }
                Task::Down(_) => {
                    let up = if i + 1 < n {
                        let env = self.from_above[i].pop_front().expect("ready");
                        debug_assert_eq!(env.kind, MessageKind::Mu);
                        Some(env.value)
                    } else {
                        None
                    };
                    let mu = self.units[i].downstream_step(up.unwrap_or(0.0))?;
                    if self.units[i].has_down {
                        out.send(
                            Direction::Down,
                            Envelope {
                                kind: MessageKind::Mu,
                                time: None,
                                value: mu,
                            },
                        )?;
                    }
                    scratch[i].mu_up = up;
                    scratch[i].mu = Some(mu);
                }
            }
            let Outbox {
                sent, log: records, ..
            } = out;
            log.records.extend(records);
            self.deliver(sent);
        }
        Ok((scratch, log))
    }

    fn sweeps_threaded(&mut self) -> Result<(Vec<RoundScratch>, MessageLog)> {
        let n = self.n();
        let round = self.now;
        // channel i carries messages across edge i
        let (up_tx, up_rx): (Vec<_>, Vec<_>) = (0..n.saturating_sub(1))
            .map(|_| mpsc::channel::<f64>())
            .unzip();
        let (down_tx, down_rx): (Vec<_>, Vec<_>) = (0..n.saturating_sub(1))
            .map(|_| mpsc::channel::<f64>())
            .unzip();
        let (log_tx, log_rx) = mpsc::channel::<MessageRecord>();
        let failed = &self.failed;
        let units = &self.units;

        let mut up_tx: Vec<Option<_>> = up_tx.into_iter().map(Some).collect();
        let mut up_rx: Vec<Option<_>> = up_rx.into_iter().map(Some).collect();
        let mut down_tx: Vec<Option<_>> = down_tx.into_iter().map(Some).collect();
        let mut down_rx: Vec<Option<_>> = down_rx.into_iter().map(Some).collect();

        let results = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(2 * n);
            for unit in units {
                let i = unit.id;
                let inbound = if i > 0 { up_rx[i - 1].take() } else { None };
                let outbound = if i + 1 < n { up_tx[i].take() } else { None };
                let log = log_tx.clone();
                handles.push(scope.spawn(move || -> Result<(Option<f64>, f64)> {
                    let down = match inbound {
                        Some(rx) => Some(
                            rx.recv()
                                .map_err(|_| Error::LinkFailure { from: i - 1, to: i })?,
                        ),
                        None => None,
                    };
                    let delta = unit.upstream_step(down.unwrap_or(0.0))?;
                    if let Some(tx) = outbound {
                        if failed.contains(&i) {
                            return Err(Error::LinkFailure { from: i, to: i + 1 });
                        }
                        let _ = log.send(MessageRecord {
                            round,
                            from: i,
                            to: i + 1,
                            kind: MessageKind::Delta,
                            time: None,
                            value: delta,
                        });
                        tx.send(delta)
                            .map_err(|_| Error::LinkFailure { from: i, to: i + 1 })?;
                    }
                    Ok((down, delta))
                }));
            }
            for unit in units {
                let i = unit.id;
                let inbound = if i + 1 < n { down_rx[i].take() } else { None };
                let outbound = if i > 0 { down_tx[i - 1].take() } else { None };
                let log = log_tx.clone();
                handles.push(scope.spawn(move || -> Result<(Option<f64>, f64)> {
                    let up = match inbound {
                        Some(rx) => Some(
                            rx.recv()
                                .map_err(|_| Error::LinkFailure { from: i + 1, to: i })?,
                        ),
                        None => None,
                    };
                    let mu = unit.downstream_step(up.unwrap_or(0.0))?;
                    if let Some(tx) = outbound {
                        if failed.contains(&(i - 1)) {
                            return Err(Error::LinkFailure { from: i, to: i - 1 });
                        }
                        let _ = log.send(MessageRecord {
                            round,
                            from: i,
                            to: i - 1,
                            kind: MessageKind::Mu,
                            time: None,
                            value: mu,
                        });
                        tx.send(mu)
                            .map_err(|_| Error::LinkFailure { from: i, to: i - 1 })?;
                    }
                    Ok((up, mu))
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("node task panicked"))
                .collect::<Vec<_>>()
        });
        drop(log_tx);

        // a failed link also starves every task behind it; report the link itself
        let mut first_error: Option<Error> = None;
        let mut scratch = vec![RoundScratch::default(); n];
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok((input, out)) if k < n => {
                    scratch[k].delta_down = input;
                    scratch[k].delta = Some(out);
                }
                Ok((input, out)) => {
                    scratch[k - n].mu_up = input;
                    scratch[k - n].mu = Some(out);
                }
                Err(e) => {
                    let at_origin = matches!(e, Error::LinkFailure { from, to }
                        if failed.contains(&from.min(to)));
                    if first_error.is_none() || at_origin {
                        first_error = Some(e);
                    }
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        Ok((
            scratch,
            MessageLog {
                records: log_rx.into_iter().collect(),
            },
        ))
    }

    /// Moves every unit to `now + 1`: expiring heads travel one edge down as
    /// shift messages, then the new tail entries are built upward from node 0.
    pub fn advance_time(&mut self) -> Result<MessageLog> {
        let n = self.n();
        let mut log = MessageLog::default();
        for i in 0..n {
            let mut out = Outbox::new(self.now, i, n, &self.failed);
            let unit = &mut self.units[i];
            let (t, head) = unit.window.pop_head().expect("windows are never empty");
            if unit.has_down {
                let value = head - unit.d(unit.now);
                out.send(
                    Direction::Down,
                    Envelope {
                        kind: MessageKind::DShift,
                        time: Some(t),
                        value,
                    },
                )?;
            }
            let Outbox {
                sent, log: records, ..
            } = out;
            log.records.extend(records);
            self.deliver(sent);
        }
        // the receiver already holds this entry in its wider window
        for i in 0..n {
            while let Some(env) = self.from_above[i].pop_front() {
                debug_assert_eq!(env.kind, MessageKind::DShift);
                debug_assert!(self.units[i]
                    .window
                    .get(env.time.expect("stamped"))
                    .is_some_and(|held| (held - env.value).abs() <= 1e-9 * (1.0 + held.abs())));
            }
        }
        self.now += 1;
        for i in 0..n {
            let mut out = Outbox::new(self.now, i, n, &self.failed);
            let unit = &mut self.units[i];
            unit.now += 1;
            let tail = unit.now + unit.reach;
            let mut base = 0.0;
            while let Some(env) = self.from_below[i].pop_front() {
                if env.time == Some(tail) {
                    base = env.value;
                }
            }
            let v = unit.window.push(base, unit.d(tail - unit.sigma));
            if unit.has_up && v != 0.0 {
                out.send(
                    Direction::Up,
                    Envelope {
                        kind: MessageKind::DUpdate,
                        time: Some(tail),
                        value: v,
                    },
                )?;
            }
            let Outbox {
                sent, log: records, ..
            } = out;
            log.records.extend(records);
            self.deliver(sent);
        }
        self.clear_queues();
        Ok(log)
    }

    /// Routes each change to its node and refreshes the affected shifted
    /// sums with one upstream pass. Either every change is accepted or the
    /// network is left untouched.
    pub fn apply_plan_updates(&mut self, changes: &[PlanChange]) -> Result<MessageLog> {
        let n = self.n();
        let mut per_node: Vec<Vec<(i64, f64)>> = vec![Vec::new(); n];
        for c in changes {
            if c.node >= n {
                return Err(Error::NodeOutOfRange { node: c.node, n });
            }
            self.units[c.node].validate_change(c.time, c.value)?;
            per_node[c.node].push((c.time, c.value));
        }
        if changes.is_empty() {
            return Ok(MessageLog::default());
        }
        let mut log = MessageLog::default();
        let snapshot = self.units.clone();
        for i in 0..n {
            let changed = self.units[i].store_changes(&per_node[i]);
            let received: Vec<(i64, f64)> = self.from_below[i]
                .drain(..)
                .map(|env| (env.time.expect("stamped"), env.value))
                .collect();
            let unit = &mut self.units[i];
            let forward_from = unit.up_sigma.map(|s| unit.now + s);
            let plan = &unit.plan;
            let forwarded = refresh_window(
                &mut unit.window,
                unit.sigma,
                |t| plan.get(&t).copied().unwrap_or(0.0),
                received,
                &changed,
                forward_from,
            );
            let mut out = Outbox::new(self.now, i, n, &self.failed);
            let mut sent_ok = Ok(());
            for (t, v) in forwarded {
                sent_ok = out.send(
                    Direction::Up,
                    Envelope {
                        kind: MessageKind::DUpdate,
                        time: Some(t),
                        value: v,
                    },
                );
                if sent_ok.is_err() {
                    break;
                }
            }
            if let Err(e) = sent_ok {
                self.units = snapshot;
                self.clear_queues();
                return Err(e);
            }
            let Outbox {
                sent, log: records, ..
            } = out;
            log.records.extend(records);
            self.deliver(sent);
        }
        Ok(log)
    }
}

/// Outcome of [`audit_message_log`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub records: usize,
    /// Indices of records between non-adjacent or nonexistent nodes.
    pub non_neighbor: Vec<usize>,
    /// Indices of records sent in the wrong direction for their kind.
    pub wrong_direction: Vec<usize>,
    /// Indices of sweep records sent before the sender had its input.
    pub causality: Vec<usize>,
    /// Rounds whose sweep message count differs from `2 (N - 1)`.
    pub sweep_count: Vec<(i64, usize)>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.non_neighbor.is_empty()
            && self.wrong_direction.is_empty()
            && self.causality.is_empty()
            && self.sweep_count.is_empty()
    }
}

/// Checks locality, direction and sweep causality of a log.
pub fn audit_message_log(log: &MessageLog, spec: &GraphSpec) -> AuditReport {
    let n = spec.n();
    let mut report = AuditReport {
        records: log.len(),
        ..AuditReport::default()
    };
    let mut delta_seen: BTreeSet<(i64, usize)> = BTreeSet::new();
    let mut mu_seen: BTreeSet<(i64, usize)> = BTreeSet::new();
    let mut sweeps: BTreeMap<i64, usize> = BTreeMap::new();
    for (k, r) in log.records.iter().enumerate() {
        if r.from >= n || r.to >= n || r.from.abs_diff(r.to) != 1 {
            report.non_neighbor.push(k);
            continue;
        }
        let upward = r.to == r.from + 1;
        let expect_up = matches!(r.kind, MessageKind::Delta | MessageKind::DUpdate);
        if upward != expect_up {
            report.wrong_direction.push(k);
            continue;
        }
        match r.kind {
            MessageKind::Delta => {
                // delta_i needs delta_{i-1}, which arrives from below
                if r.from > 0 && !delta_seen.contains(&(r.round, r.from)) {
                    report.causality.push(k);
                }
                delta_seen.insert((r.round, r.to));
            }
            MessageKind::Mu => {
                if r.from + 1 < n && !mu_seen.contains(&(r.round, r.from)) {
                    report.causality.push(k);
                }
                mu_seen.insert((r.round, r.to));
            }
            _ => {}
        }
        if r.kind.is_sweep() {
            *sweeps.entry(r.round).or_default() += 1;
        }
    }
    let expected = 2 * (n - 1);
    for (round, count) in sweeps {
        if count != expected {
            report.sweep_count.push((round, count));
        }
    }
    report
}

/// Closed loop driven by the network, with the plant simulated centrally.
#[derive(Debug, Clone)]
pub struct DistributedRun {
    pub trajectory: Trajectory,
    pub decisions: Vec<ControlDecision>,
    pub log: MessageLog,
}

/// Runs `steps` control rounds. Mirrors [`crate::sim::run_closed_loop`] with
/// every ledger operation and sweep carried out by message passing.
pub fn run_distributed(
    spec: &GraphSpec,
    params: &ControllerParams,
    init: &PlantState,
    plan: &DisturbancePlan,
    knowledge: Knowledge,
    steps: usize,
    schedule: Schedule,
) -> Result<DistributedRun> {
    let mut net = Network::new(spec, params, init.t)?;
    let mut log = MessageLog::default();
    match knowledge {
        Knowledge::Upfront => {
            crate::ledger::validate_horizon_at(plan, spec, init.t)?;
            let all: Vec<PlanChange> = plan
                .iter()
                .map(|(node, time, value)| PlanChange { node, time, value })
                .collect();
            log.extend(net.apply_plan_updates(&all)?);
        }
        Knowledge::Receding => {
            log.extend(net.apply_plan_updates(&announcements(plan, spec, init.t, true))?);
        }
        Knowledge::None => {}
    }
    let mut traj = Trajectory::new(spec, init)?;
    let mut decisions = Vec::with_capacity(steps);
    let mut state = init.clone();
    for step in 0..steps {
        let sched = match schedule {
            Schedule::Randomized(seed) => Schedule::Randomized(seed.wrapping_add(step as u64)),
            other => other,
        };
        let (decision, round_log) = net.run_control_round(&state, sched)?;
        log.extend(round_log);
        let d = plan.at(spec.n(), state.t);
        state = traj.push(&decision, &d)?.clone();
        decisions.push(decision);
        log.extend(net.advance_time()?);
        if knowledge == Knowledge::Receding {
            log.extend(net.apply_plan_updates(&announcements(plan, spec, state.t, false))?);
        }
    }
    Ok(DistributedRun {
        trajectory: traj,
        decisions,
        log,
    })
}
