//! Morsel-level replay of a planned query against true cardinalities.
//!
//! Each pipeline consumes its true input in morsels of `hw.morsel_rows`.
//! Every `check_every_morsels` morsels a monitor compares what the pipeline
//! has seen with what the plan assumed and either leaves it alone, resizes
//! that pipeline alone ([`local_adjust`]) or replans everything that has not
//! finished yet. Resizes take effect after `hw.resize_delay_s`; during that
//! window the old and the new allocation are both charged.
//!
//! A pipeline's nodes are acquired at its planned start or when it becomes
//! ready, whichever is first, so a late upstream shows up as blocked time.

mod monitor;
mod report;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{ops_time, simulate_workload, AllocationPolicy, EstimateError, HardwareProfile, OpWork, Workload};
use crate::plan::pipeline::source_input_rows;
use crate::plan::{PipelineId, PlanDAG, PlanError, PlanSource};
use crate::planner::{plan_workload, Bound, DOPAssignment, UserConstraint};

pub use monitor::{local_adjust, monitor_step, symmetric_ratio, Action, AdjustInput, Deviation, MonitorPolicy};
pub use report::{ExecReport, MonitorRecord, OpRun, PipelineTrace, ResizeEvent, ResizeReason, TimelineEvent};

/// Relative per-morsel timing jitter when a non-zero seed is given.
const JITTER: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub plan: PlanDAG,
    /// Actual output rows per operator id.
    pub true_rows: BTreeMap<String, f64>,
    /// 0 disables timing jitter.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("no true row count for operator {0}")]
    MissingTruth(String),
    #[error("true row count for {0} is negative or not finite")]
    BadTruth(String),
    #[error("true row count given for unknown operator {0}")]
    UnknownOperator(String),
    #[error("invalid monitor policy: {0}")]
    Policy(String),
    #[error("assignment has no DOP for pipeline {0}")]
    Unassigned(PipelineId),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

impl Scenario {
    /// A scenario whose truth is the plan's own estimates.
    pub fn exact(plan: &PlanDAG) -> Scenario {
        Scenario {
            true_rows: plan.operators().iter().map(|o| (o.id.clone(), o.est_out_rows)).collect(),
            plan: plan.with_pipelines(),
            seed: 0,
        }
    }

    /// Multiplies the true output rows of every operator in `pipeline` by `factor`.
    pub fn scale_pipeline(&mut self, pipeline: PipelineId, factor: f64) {
        let plan = self.plan.with_pipelines();
        if let Some(p) = plan.pipeline(pipeline) {
            for id in &p.operators {
                if let Some(r) = self.true_rows.get_mut(id) {
                    *r *= factor;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        for op in self.plan.operators() {
            match self.true_rows.get(&op.id) {
                None => return Err(ExecError::MissingTruth(op.id.clone())),
                Some(r) if !(r.is_finite() && *r >= 0.0) => return Err(ExecError::BadTruth(op.id.clone())),
                _ => {}
            }
        }
        if let Some(id) = self.true_rows.keys().find(|id| self.plan.get(id).is_none()) {
            return Err(ExecError::UnknownOperator(id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub plan: PlanSource,
    /// Missing operators default to their estimates.
    #[serde(default)]
    pub true_rows: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario, PlanError> {
        let plan = self.plan.into_plan()?;
        let mut s = Scenario::exact(&plan);
        s.seed = self.seed;
        for (id, rows) in self.true_rows {
            s.true_rows.insert(id, rows);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pending,
    Allocated,
    Running,
    Done,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Alloc { p: usize, version: u64 },
    Morsel { p: usize, version: u64 },
    ResizeEffect { p: usize },
}

struct Queued {
    t: f64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Min-heap on (time, sequence).
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

struct Pipe {
    id: PipelineId,
    truth: Vec<OpWork>,
    baseline: Vec<OpWork>,
    /// Output rows of the terminal operator.
    truth_out: f64,
    baseline_out: f64,
    input: f64,
    deps: Vec<usize>,
    dependents: Vec<usize>,
    deps_left: usize,
    dop: u32,
    status: Status,
    planned_start: f64,
    planned_finish: f64,
    alloc_s: Option<f64>,
    start_s: Option<f64>,
    finish_s: Option<f64>,
    total_morsels: u64,
    morsels: u64,
    since_check: u32,
    window: Option<(f64, f64)>,
    morsel_left: f64,
    speed: f64,
    last_t: f64,
    version: u64,
    alloc_version: u64,
    pending: Option<(f64, u32)>,
    charged: f64,
    charge_since: f64,
    node_seconds: f64,
    blocked: f64,
    /// Input rows processed at each DOP.
    rows_at: BTreeMap<u32, f64>,
}

impl Pipe {
    fn processed(&self, morsel_rows: f64) -> f64 {
        (self.morsels as f64 * morsel_rows).min(self.input)
    }

    fn recharge(&mut self, now: f64, charged: f64) {
        self.node_seconds += self.charged * (now - self.charge_since);
        self.charge_since = now;
        self.charged = charged;
    }

    fn spent(&self, now: f64) -> f64 {
        self.node_seconds + self.charged * (now - self.charge_since)
    }
}

struct Sim<'a> {
    plan: &'a PlanDAG,
    hw: &'a HardwareProfile,
    constraint: UserConstraint,
    policy: MonitorPolicy,
    pipes: Vec<Pipe>,
    index: BTreeMap<PipelineId, usize>,
    heap: BinaryHeap<Queued>,
    seq: u64,
    rng: Option<ChaCha8Rng>,
    true_rows: &'a BTreeMap<String, f64>,
    report: ExecReport,
}

/// Replays `scenario` under `assignment`, monitoring and resizing as the
/// truth diverges from the plan's estimates.
pub fn run(
    scenario: &Scenario,
    assignment: &DOPAssignment,
    constraint: &UserConstraint,
    policy: &MonitorPolicy,
    hw: &HardwareProfile,
) -> Result<ExecReport, ExecError> {
    scenario.validate()?;
    policy.validate().map_err(ExecError::Policy)?;
    let plan = scenario.plan.with_pipelines();
    let truth = Workload::from_plan_rows(&plan, |id| scenario.true_rows[id]);
    let estimated = Workload::from_plan(&plan);
    for p in &estimated.pipelines {
        if !assignment.dops.contains_key(&p.id) {
            return Err(ExecError::Unassigned(p.id));
        }
    }
    let planned = simulate_workload(&estimated, &assignment.dops, hw, AllocationPolicy::Predicted)?;
    simulate_workload(&truth, &assignment.dops, hw, AllocationPolicy::Predicted)?;

    let index: BTreeMap<PipelineId, usize> = plan.pipelines().iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let mut pipes: Vec<Pipe> = plan
        .pipelines()
        .iter()
        .zip(truth.pipelines.iter().zip(&estimated.pipelines))
        .map(|(p, (t, e))| {
            let timing = planned.per_pipeline[&p.id];
            let input = t.input_rows();
            Pipe {
                id: p.id,
                truth: t.ops.clone(),
                baseline: e.ops.clone(),
                truth_out: scenario.true_rows[p.terminal()],
                baseline_out: plan.op(p.terminal()).est_out_rows,
                input,
                deps: p.deps.iter().map(|d| index[d]).collect(),
                dependents: Vec::new(),
                deps_left: p.deps.len(),
                dop: assignment.dops[&p.id],
                status: Status::Pending,
                planned_start: timing.start_s,
                planned_finish: timing.finish_s,
                alloc_s: None,
                start_s: None,
                finish_s: None,
                total_morsels: (input / hw.morsel_rows).ceil() as u64,
                morsels: 0,
                since_check: 0,
                window: None,
                morsel_left: 0.0,
                speed: 0.0,
                last_t: 0.0,
                version: 0,
                alloc_version: 0,
                pending: None,
                charged: 0.0,
                charge_since: 0.0,
                node_seconds: 0.0,
                blocked: 0.0,
                rows_at: BTreeMap::new(),
            }
        })
        .collect();
    for i in 0..pipes.len() {
        for d in pipes[i].deps.clone() {
            pipes[d].dependents.push(i);
        }
    }

    let mut sim = Sim {
        plan: &plan,
        hw,
        constraint: *constraint,
        policy: *policy,
        pipes,
        index,
        heap: BinaryHeap::new(),
        seq: 0,
        rng: (scenario.seed != 0).then(|| ChaCha8Rng::seed_from_u64(scenario.seed)),
        true_rows: &scenario.true_rows,
        report: ExecReport::default(),
    };
    sim.execute()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn push(&mut self, t: f64, ev: Event) {
        self.seq += 1;
        self.heap.push(Queued { t, seq: self.seq, ev });
    }

    fn timeline(&mut self, t: f64, p: usize, kind: &str, detail: String) {
        let pipe = &self.pipes[p];
        self.report.timeline.push(TimelineEvent {
            time_s: t,
            pipeline: Some(pipe.id),
            event: kind.to_string(),
            dop: Some(pipe.dop),
            detail,
        });
    }

    fn execute(&mut self) -> Result<(), ExecError> {
        for p in 0..self.pipes.len() {
            let t = self.pipes[p].planned_start;
            self.push(t, Event::Alloc { p, version: 0 });
        }
        for p in 0..self.pipes.len() {
            if self.pipes[p].deps_left == 0 {
                self.start(p, 0.0)?;
            }
        }
        while let Some(Queued { t, ev, .. }) = self.heap.pop() {
            match ev {
                Event::Alloc { p, version } => {
                    if self.pipes[p].status == Status::Pending && self.pipes[p].alloc_version == version {
                        self.allocate(p, t);
                    }
                }
                Event::Morsel { p, version } => {
                    if self.pipes[p].status == Status::Running && self.pipes[p].version == version {
                        self.morsel_done(p, t)?;
                    }
                }
                Event::ResizeEffect { p } => self.resize_effect(p, t)?,
            }
        }
        Ok(())
    }

    fn allocate(&mut self, p: usize, t: f64) {
        let pipe = &mut self.pipes[p];
        pipe.status = Status::Allocated;
        pipe.alloc_s = Some(t);
        let d = pipe.dop as f64;
        pipe.recharge(t, d);
        self.timeline(t, p, "alloc", String::new());
    }

    fn true_time(&self, p: usize, dop: u32) -> Result<f64, EstimateError> {
        ops_time(&self.pipes[p].truth, dop, self.hw)
    }

    fn start(&mut self, p: usize, t: f64) -> Result<(), ExecError> {
        if self.pipes[p].status == Status::Pending {
            self.allocate(p, t);
        }
        let time = self.true_time(p, self.pipes[p].dop)?;
        let pipe = &mut self.pipes[p];
        pipe.status = Status::Running;
        pipe.start_s = Some(t);
        pipe.blocked = pipe.spent(t);
        pipe.window = Some((t, 0.0));
        pipe.speed = if time > 0.0 { pipe.input / time } else { f64::INFINITY };
        self.timeline(t, p, "start", String::new());
        if self.pipes[p].total_morsels == 0 {
            return self.complete(p, t);
        }
        self.next_morsel(p, t);
        Ok(())
    }

    fn next_morsel(&mut self, p: usize, t: f64) {
        let morsel_rows = self.hw.morsel_rows;
        let factor = match self.rng.as_mut() {
            Some(rng) => 1.0 + rng.gen_range(-JITTER..JITTER),
            None => 1.0,
        };
        let pipe = &mut self.pipes[p];
        let size = morsel_rows.min(pipe.input - pipe.morsels as f64 * morsel_rows);
        pipe.morsel_left = size * factor;
        pipe.last_t = t;
        pipe.version += 1;
        let ev = Event::Morsel { p, version: pipe.version };
        let at = t + pipe.morsel_left / pipe.speed;
        self.push(at, ev);
    }

    fn morsel_done(&mut self, p: usize, t: f64) -> Result<(), ExecError> {
        let morsel_rows = self.hw.morsel_rows;
        let pipe = &mut self.pipes[p];
        let before = pipe.processed(morsel_rows);
        pipe.morsels += 1;
        let size = pipe.processed(morsel_rows) - before;
        *pipe.rows_at.entry(pipe.dop).or_insert(0.0) += size;
        if pipe.morsels == pipe.total_morsels {
            return self.complete(p, t);
        }
        pipe.since_check += 1;
        if pipe.since_check >= self.policy.check_every_morsels {
            pipe.since_check = 0;
            self.check(p, t)?;
        }
        self.next_morsel(p, t);
        Ok(())
    }

    fn complete(&mut self, p: usize, t: f64) -> Result<(), ExecError> {
        let pipe = &mut self.pipes[p];
        pipe.status = Status::Done;
        pipe.finish_s = Some(t);
        pipe.pending = None;
        pipe.recharge(t, 0.0);
        self.timeline(t, p, "finish", String::new());
        self.final_check(p, t)?;
        for q in self.pipes[p].dependents.clone() {
            self.pipes[q].deps_left -= 1;
            if self.pipes[q].deps_left == 0 {
                self.start(q, t)?;
            }
        }
        Ok(())
    }

    fn request_resize(&mut self, p: usize, t: f64, new_dop: u32, reason: ResizeReason) -> Result<(), ExecError> {
        let old = self.pipes[p].dop;
        if new_dop == old || self.pipes[p].pending.is_some() {
            return Ok(());
        }
        self.report.resize_events.push(ResizeEvent {
            time_s: t,
            pipeline: self.pipes[p].id,
            old_dop: old,
            new_dop,
            reason,
        });
        match self.pipes[p].status {
            Status::Pending => {
                self.pipes[p].dop = new_dop;
                self.timeline(t, p, "dop", format!("{old}->{new_dop} {reason}"));
            }
            Status::Done => {}
            Status::Allocated | Status::Running => {
                let effect = t + self.hw.resize_delay_s;
                let pipe = &mut self.pipes[p];
                pipe.pending = Some((effect, new_dop));
                let both = (old + new_dop) as f64;
                pipe.recharge(t, both);
                self.timeline(t, p, "resize_request", format!("{old}->{new_dop} {reason}"));
                if self.hw.resize_delay_s == 0.0 {
                    self.resize_effect(p, t)?;
                } else {
                    self.push(effect, Event::ResizeEffect { p });
                }
            }
        }
        Ok(())
    }

    fn resize_effect(&mut self, p: usize, t: f64) -> Result<(), ExecError> {
        let Some((_, new_dop)) = self.pipes[p].pending.take() else {
            return Ok(());
        };
        let time = self.true_time(p, new_dop)?;
        let pipe = &mut self.pipes[p];
        pipe.dop = new_dop;
        pipe.recharge(t, new_dop as f64);
        if pipe.status == Status::Running {
            pipe.morsel_left -= (t - pipe.last_t) * pipe.speed;
            pipe.morsel_left = pipe.morsel_left.max(0.0);
            pipe.last_t = t;
            pipe.speed = if time > 0.0 { pipe.input / time } else { f64::INFINITY };
            pipe.version += 1;
            pipe.window = None;
            let ev = Event::Morsel { p, version: pipe.version };
            let at = t + pipe.morsel_left / pipe.speed;
            self.push(at, ev);
        }
        self.timeline(t, p, "resize_effect", String::new());
        Ok(())
    }

    fn deviation(&mut self, p: usize, t: f64) -> Result<Deviation, ExecError> {
        let pipe = &self.pipes[p];
        let rows_ratio = pipe
            .truth
            .iter()
            .zip(&pipe.baseline)
            .map(|(a, b)| symmetric_ratio(a.rows, b.rows))
            .chain([symmetric_ratio(pipe.truth_out, pipe.baseline_out)])
            .fold(1.0, f64::max);
        let processed = pipe.processed(self.hw.morsel_rows);
        let rate_ratio = match pipe.window {
            Some((t0, r0)) if t > t0 => {
                let observed = (processed - r0) / (t - t0);
                let planned_time = ops_time(&pipe.baseline, pipe.dop, self.hw)?;
                let planned_input = pipe.baseline.first().map_or(0.0, |o| o.rows);
                if planned_time > 0.0 {
                    symmetric_ratio(observed, planned_input / planned_time)
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        let remaining = ops_time(&pipe.truth, pipe.dop, self.hw)? * (1.0 - processed / pipe.input);
        let left = self.deadline(p) - t;
        let schedule_ratio = if remaining <= 0.0 {
            1.0
        } else if left > 0.0 {
            remaining / left
        } else {
            f64::INFINITY
        };
        self.pipes[p].window = Some((t, processed));
        Ok(Deviation {
            rows_ratio,
            rate_ratio,
            schedule_ratio,
        })
    }

    /// The planned finish, pulled earlier by however far the plan overshoots
    /// the latency target.
    fn deadline(&self, p: usize) -> f64 {
        let overshoot = match self.constraint.bound {
            Bound::LatencySla { latency_s } => self
                .pipes
                .iter()
                .filter(|q| q.status != Status::Done)
                .map(|q| q.planned_finish - latency_s)
                .fold(0.0, f64::max),
            Bound::Budget { .. } => 0.0,
        };
        self.pipes[p].planned_finish - overshoot
    }

    /// A pipeline too short to reach a periodic check still reports its
    /// deviation once it finishes, so downstream pipelines can be replanned
    /// before they start.
    fn final_check(&mut self, p: usize, t: f64) -> Result<(), ExecError> {
        if self.pipes.iter().all(|q| q.status == Status::Done) {
            return Ok(());
        }
        let dev = self.deviation(p, t)?;
        if monitor_step(&dev, &self.policy) != Action::Replan {
            return Ok(());
        }
        self.report.monitor_actions.push(MonitorRecord {
            time_s: t,
            pipeline: self.pipes[p].id,
            rows_ratio: dev.rows_ratio,
            rate_ratio: dev.rate_ratio,
            schedule_ratio: dev.schedule_ratio,
            action: Action::Replan,
        });
        self.report.replans += 1;
        self.replan(t)
    }

    fn check(&mut self, p: usize, t: f64) -> Result<(), ExecError> {
        if self.pipes[p].pending.is_some() {
            return Ok(());
        }
        let dev = self.deviation(p, t)?;
        let action = monitor_step(&dev, &self.policy);
        if action == Action::None {
            return Ok(());
        }
        let record = MonitorRecord {
            time_s: t,
            pipeline: self.pipes[p].id,
            rows_ratio: dev.rows_ratio,
            rate_ratio: dev.rate_ratio,
            schedule_ratio: dev.schedule_ratio,
            action,
        };
        match action {
            Action::None => {}
            Action::LocalAdjust => {
                let remaining_fraction = 1.0 - self.pipes[p].processed(self.hw.morsel_rows) / self.pipes[p].input;
                let remaining: Vec<OpWork> = self.pipes[p]
                    .truth
                    .iter()
                    .map(|o| OpWork {
                        rows: o.rows * remaining_fraction,
                        ..o.clone()
                    })
                    .collect();
                let allowance = match self.constraint.bound {
                    Bound::LatencySla { .. } => f64::INFINITY,
                    Bound::Budget { budget_dollars } => self.allowance(p, t, budget_dollars)?,
                };
                let input = AdjustInput {
                    remaining,
                    current_dop: self.pipes[p].dop,
                    time_left_s: self.deadline(p) - t,
                    node_seconds_allowance: allowance,
                };
                let d = local_adjust(&input, &self.constraint, self.hw)?;
                // A pipeline that is only late and already runs as fast as
                // it can is not worth a record at every check.
                if dev.rho() > self.policy.theta_local || d != self.pipes[p].dop {
                    self.report.monitor_actions.push(record);
                }
                self.pipes[p].baseline = self.pipes[p].truth.clone();
                self.pipes[p].baseline_out = self.pipes[p].truth_out;
                self.request_resize(p, t, d, ResizeReason::Local)?;
            }
            Action::Replan => {
                self.report.monitor_actions.push(record);
                self.report.replans += 1;
                self.replan(t)?;
            }
        }
        Ok(())
    }

    fn spent(&self, t: f64) -> f64 {
        self.pipes.iter().map(|p| p.spent(t)).sum()
    }

    /// Row counts for every operator under what is known at time `t`:
    /// started pipelines contribute their true counts, unstarted ones their
    /// estimates scaled by how far their input has drifted.
    fn corrected_rows(&self) -> HashMap<String, f64> {
        let mut rows: HashMap<String, f64> = HashMap::new();
        for (i, p) in self.plan.pipelines().iter().enumerate() {
            let started = matches!(self.pipes[i].status, Status::Running | Status::Done);
            if started {
                for id in &p.operators {
                    rows.insert(id.clone(), self.true_rows[id]);
                }
                continue;
            }
            let lookup = |id: &str| rows.get(id).copied().unwrap_or_else(|| self.plan.op(id).est_out_rows);
            let known = source_input_rows(self.plan, p.source(), lookup);
            let est = source_input_rows(self.plan, p.source(), |id| self.plan.op(id).est_out_rows);
            let ratio = if est > 0.0 { known / est } else { 1.0 };
            for id in &p.operators {
                rows.insert(id.clone(), self.plan.op(id).est_out_rows * ratio);
            }
        }
        rows
    }

    /// The unfinished part of the query as seen at time `t`.
    fn residual(&self) -> (Workload, Workload, HashMap<String, f64>) {
        let corrected = self.corrected_rows();
        let full = Workload::from_plan_rows(self.plan, |id| corrected[id]);
        let mut pipelines = Vec::new();
        for (i, w) in full.pipelines.iter().enumerate() {
            let pipe = &self.pipes[i];
            match pipe.status {
                Status::Done => {}
                Status::Running => {
                    let fraction = if pipe.input > 0.0 {
                        1.0 - pipe.processed(self.hw.morsel_rows) / pipe.input
                    } else {
                        0.0
                    };
                    let mut r = w.clone();
                    for o in &mut r.ops {
                        o.rows *= fraction;
                    }
                    r.deps.clear();
                    r.pinned_dop = pipe.pending.map(|(_, d)| d);
                    pipelines.push(r);
                }
                Status::Pending | Status::Allocated => {
                    let mut r = w.clone();
                    r.deps.retain(|d| self.pipes[self.index[d]].status != Status::Done);
                    r.pinned_dop = pipe.pending.map(|(_, d)| d);
                    pipelines.push(r);
                }
            }
        }
        (Workload { pipelines }, full, corrected)
    }

    fn current_dops(&self, w: &Workload) -> BTreeMap<PipelineId, u32> {
        w.pipelines.iter().map(|p| (p.id, self.pipes[self.index[&p.id]].dop)).collect()
    }

    fn allowance(&self, p: usize, t: f64, budget: f64) -> Result<f64, ExecError> {
        let (residual, ..) = self.residual();
        let est = simulate_workload(&residual, &self.current_dops(&residual), self.hw, AllocationPolicy::Predicted)?;
        let own = est.per_pipeline.get(&self.pipes[p].id).map_or(0.0, |x| x.node_seconds);
        let left = (budget - self.hw.dollars(self.spent(t))) * 3600.0 / self.hw.node_price_per_hour;
        Ok(left - (est.machine_time_s - own))
    }

    fn replan(&mut self, t: f64) -> Result<(), ExecError> {
        let (residual, full, corrected) = self.residual();
        let bound = match self.constraint.bound {
            Bound::LatencySla { latency_s } => Bound::LatencySla {
                latency_s: latency_s - t - self.hw.resize_delay_s,
            },
            Bound::Budget { budget_dollars } => Bound::Budget {
                budget_dollars: budget_dollars - self.hw.dollars(self.spent(t)),
            },
        };
        let c = UserConstraint {
            bound,
            dop_max: self.constraint.dop_max,
        };
        let a = plan_workload(&residual, &c, self.hw)?;
        for w in &residual.pipelines {
            let i = self.index[&w.id];
            let timing = a.estimate.per_pipeline[&w.id];
            self.pipes[i].planned_start = t + timing.start_s;
            self.pipes[i].planned_finish = t + timing.finish_s;
            self.pipes[i].baseline = full.pipelines[i].ops.clone();
            self.pipes[i].baseline_out = corrected[self.plan.pipelines()[i].terminal()];
            self.request_resize(i, t, a.dops[&w.id], ResizeReason::Replan)?;
            if self.pipes[i].status == Status::Pending {
                self.pipes[i].alloc_version += 1;
                let ev = Event::Alloc {
                    p: i,
                    version: self.pipes[i].alloc_version,
                };
                let at = self.pipes[i].planned_start;
                self.push(at, ev);
            }
        }
        let detail = format!("residual latency {:.6} s", a.estimate.latency_s);
        self.report.timeline.push(TimelineEvent {
            time_s: t,
            pipeline: None,
            event: "replan".into(),
            dop: None,
            detail,
        });
        Ok(())
    }

    fn finish(mut self) -> ExecReport {
        let mut machine = 0.0;
        let mut blocked = 0.0;
        let mut latency: f64 = 0.0;
        for (i, pipe) in self.pipes.iter().enumerate() {
            machine += pipe.node_seconds;
            blocked += pipe.blocked;
            let finish = pipe.finish_s.unwrap_or(0.0);
            latency = latency.max(finish);
            let p = &self.plan.pipelines()[i];
            let ops = pipe
                .truth
                .iter()
                .map(|o| {
                    let share = if pipe.input > 0.0 { o.rows / pipe.input } else { 0.0 };
                    let busy_s = pipe
                        .rows_at
                        .iter()
                        .map(|(&d, &r)| {
                            let rate = self.hw.model(o.kind).map(|m| m.rate(d)).unwrap_or(f64::INFINITY);
                            r * share / rate
                        })
                        .sum();
                    let dop = pipe
                        .rows_at
                        .iter()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map_or(pipe.dop, |(&d, _)| d);
                    OpRun {
                        id: o.id.clone(),
                        kind: o.kind,
                        rows_in: o.rows,
                        est_out_rows: self.plan.op(&o.id).est_out_rows,
                        actual_out_rows: self.true_rows[&o.id],
                        dop,
                        busy_s,
                    }
                })
                .collect();
            self.report.trace.push(PipelineTrace {
                pipeline: pipe.id,
                operators: p.operators.clone(),
                alloc_s: pipe.alloc_s.unwrap_or(0.0),
                start_s: pipe.start_s.unwrap_or(0.0),
                finish_s: finish,
                planned_finish_s: pipe.planned_finish,
                input_rows: pipe.input,
                morsels: pipe.morsels,
                final_dop: pipe.dop,
                node_seconds: pipe.node_seconds,
                blocked_s: pipe.blocked,
                ops,
            });
        }
        let r = &mut self.report;
        r.actual_latency_s = latency;
        r.machine_time_s = machine;
        r.blocked_s = blocked;
        r.actual_dollars = self.hw.dollars(machine);
        r.sla_met = self.constraint.is_met_by(latency, r.actual_dollars);
        r.timeline.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        std::mem::take(&mut self.report)
    }
}
