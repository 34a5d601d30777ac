//! Workload statistics.
//!
//! A [`WorkloadSummary`] is a left fold over execution traces. Every weighted
//! count decays by `2^(-age / half_life)`; each key stores its value as of
//! its last touch, so reading it at the summary clock is one multiplication.

mod template;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{fit_model, CalibrationSample, HardwareProfile};
use crate::exec::ExecReport;
use crate::plan::{OperatorKind, PlanDAG};

pub use template::template_signature;

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HALF_LIFE_HOURS: f64 = 24.0;
/// How far behind the newest ingested record a record may arrive.
pub const REORDER_TOLERANCE_S: f64 = 60.0;
/// Throughput samples kept per operator kind; the oldest are dropped first.
pub const MAX_SAMPLES_PER_KIND: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOp {
    pub op_kind: OperatorKind,
    /// `table.attribute` references; for a join, consecutive pairs of keys.
    #[serde(default)]
    pub attribute_refs: Vec<String>,
    /// Estimated output rows.
    pub est_rows: f64,
    /// Observed output rows.
    pub actual_rows: f64,
    /// Rows the operator processed.
    pub input_rows: f64,
    pub dop: u32,
    pub duration_s: f64,
    pub node_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub template_id: String,
    pub timestamp_s: f64,
    pub ops: Vec<TraceOp>,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.query_id.is_empty() {
            return Err("empty query_id".into());
        }
        if self.template_id.is_empty() {
            return Err("empty template_id".into());
        }
        if !self.timestamp_s.is_finite() {
            return Err("timestamp_s is not finite".into());
        }
        for (i, op) in self.ops.iter().enumerate() {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(op.duration_s) || !ok(op.node_seconds) {
                return Err(format!("op {i}: negative duration or node_seconds"));
            }
            if !ok(op.actual_rows) || !ok(op.input_rows) || !ok(op.est_rows) {
                return Err(format!("op {i}: negative row count"));
            }
            if op.dop < 1 {
                return Err(format!("op {i}: dop must be at least 1"));
            }
            if op.attribute_refs.iter().any(|a| !a.contains('.')) {
                return Err(format!("op {i}: attribute refs must be table.attribute"));
            }
        }
        Ok(())
    }

    /// Trace of a replayed execution. Attribute references come from the
    /// plan's operator keys.
    pub fn from_report(
        query_id: impl Into<String>,
        timestamp_s: f64,
        plan: &PlanDAG,
        report: &ExecReport,
    ) -> TraceRecord {
        let ops = report
            .trace
            .iter()
            .flat_map(|p| p.ops.iter())
            .map(|o| TraceOp {
                op_kind: o.kind,
                attribute_refs: plan.get(&o.id).map(|n| n.keys.clone()).unwrap_or_default(),
                est_rows: o.est_out_rows,
                actual_rows: o.actual_out_rows,
                input_rows: o.rows_in,
                dop: o.dop,
                duration_s: o.busy_s,
                node_seconds: o.busy_s * o.dop as f64,
            })
            .collect();
        TraceRecord {
            query_id: query_id.into(),
            template_id: template_signature(plan),
            timestamp_s,
            ops,
        }
    }
}

/// A count that halves every half-life.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decayed {
    /// Value as of `last_touch_s`.
    pub value: f64,
    pub last_touch_s: f64,
}

fn decay(age_s: f64, half_life_s: f64) -> f64 {
    (-age_s / half_life_s).exp2()
}

impl Decayed {
    pub fn at(&self, t: f64, half_life_s: f64) -> f64 {
        self.value * decay(t - self.last_touch_s, half_life_s)
    }

    /// Adds one unit of weight observed at `t`. An event older than the last
    /// touch is decayed onto it instead, which gives the same value.
    fn bump(&mut self, t: f64, half_life_s: f64) {
        if t >= self.last_touch_s {
            self.value = self.value * decay(t - self.last_touch_s, half_life_s) + 1.0;
            self.last_touch_s = t;
        } else {
            self.value += decay(self.last_touch_s - t, half_life_s);
        }
    }

    fn new(t: f64) -> Decayed {
        Decayed {
            value: 1.0,
            last_touch_s: t,
        }
    }
}

fn bump(map: &mut BTreeMap<String, Decayed>, key: &str, t: f64, hl: f64) {
    match map.get_mut(key) {
        Some(d) => d.bump(t, hl),
        None => {
            map.insert(key.to_string(), Decayed::new(t));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    pub half_life_hours: f64,
    /// Timestamp of the first and newest ingested record.
    pub first_s: Option<f64>,
    pub clock_s: Option<f64>,
    pub attr_access: BTreeMap<String, Decayed>,
    /// Adjacency with `a < b`.
    pub join_graph: BTreeMap<String, BTreeMap<String, Decayed>>,
    pub throughput_samples: BTreeMap<OperatorKind, Vec<CalibrationSample>>,
    pub template_arrivals: BTreeMap<String, Decayed>,
    pub seen_queries: BTreeSet<String>,
}

impl Default for WorkloadSummary {
    fn default() -> Self {
        Self::with_half_life(DEFAULT_HALF_LIFE_HOURS)
    }
}

/// What one ingest call did with its records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub duplicates: usize,
    /// Records more than the reorder tolerance behind the newest one.
    pub late: usize,
    /// `(position, reason)` of every skipped malformed record.
    pub malformed: Vec<(usize, String)>,
}

impl WorkloadSummary {
    pub fn with_half_life(half_life_hours: f64) -> Self {
        WorkloadSummary {
            half_life_hours,
            first_s: None,
            clock_s: None,
            attr_access: BTreeMap::new(),
            join_graph: BTreeMap::new(),
            throughput_samples: BTreeMap::new(),
            template_arrivals: BTreeMap::new(),
            seen_queries: BTreeSet::new(),
        }
    }

    fn half_life_s(&self) -> f64 {
        self.half_life_hours * 3600.0
    }

    pub fn is_empty(&self) -> bool {
        self.seen_queries.is_empty()
    }

    /// Folds `records` into the summary. Records are applied in timestamp
    /// order; ones too far behind the newest timestamp seen so far, repeated
    /// query ids and malformed records are skipped and counted.
    pub fn ingest(&mut self, records: impl IntoIterator<Item = TraceRecord>) -> IngestReport {
        let mut report = IngestReport::default();
        let mut newest = self.clock_s.unwrap_or(f64::NEG_INFINITY);
        let mut batch_ids = BTreeSet::new();
        let mut keep = Vec::new();
        for (i, r) in records.into_iter().enumerate() {
            if let Err(e) = r.validate() {
                report.malformed.push((i, e));
                continue;
            }
            if self.seen_queries.contains(&r.query_id) || !batch_ids.insert(r.query_id.clone()) {
                report.duplicates += 1;
                continue;
            }
            if r.timestamp_s < newest - REORDER_TOLERANCE_S {
                report.late += 1;
                batch_ids.remove(&r.query_id);
                continue;
            }
            newest = newest.max(r.timestamp_s);
            keep.push(r);
        }
        keep.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
        for r in &keep {
            self.apply(r);
        }
        report.accepted = keep.len();
        report
    }

    fn apply(&mut self, r: &TraceRecord) {
        let hl = self.half_life_s();
        let t = r.timestamp_s;
        self.first_s = Some(self.first_s.map_or(t, |f| f.min(t)));
        self.clock_s = Some(self.clock_s.map_or(t, |c| c.max(t)));
        self.seen_queries.insert(r.query_id.clone());
        bump(&mut self.template_arrivals, &r.template_id, t, hl);
        for op in &r.ops {
            for a in &op.attribute_refs {
                bump(&mut self.attr_access, a, t, hl);
            }
            if op.op_kind == OperatorKind::HashProbe {
                for pair in op.attribute_refs.chunks_exact(2) {
                    let (a, b) = if pair[0] <= pair[1] { (&pair[0], &pair[1]) } else { (&pair[1], &pair[0]) };
                    if a != b {
                        bump(self.join_graph.entry(a.clone()).or_default(), b, t, hl);
                    }
                }
            }
            if op.dop >= 1 && op.input_rows > 0.0 && op.duration_s > 0.0 {
                let samples = self.throughput_samples.entry(op.op_kind).or_default();
                samples.push(CalibrationSample {
                    op_kind: op.op_kind,
                    dop: op.dop,
                    rows: op.input_rows,
                    measured_seconds: op.duration_s,
                });
                if samples.len() > MAX_SAMPLES_PER_KIND {
                    samples.remove(0);
                }
            }
        }
    }

    fn now(&self) -> f64 {
        self.clock_s.unwrap_or(0.0)
    }

    /// Access weight of an attribute at the summary clock.
    pub fn attr_weight(&self, attr: &str) -> f64 {
        self.attr_access.get(attr).map_or(0.0, |d| d.at(self.now(), self.half_life_s()))
    }

    /// Join weight between two attributes at the summary clock; symmetric.
    pub fn edge_weight(&self, a: &str, b: &str) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.join_graph
            .get(a)
            .and_then(|m| m.get(b))
            .map_or(0.0, |d| d.at(self.now(), self.half_life_s()))
    }

    pub fn edges(&self) -> Vec<JoinEdge> {
        let (now, hl) = (self.now(), self.half_life_s());
        self.join_graph
            .iter()
            .flat_map(|(a, m)| {
                m.iter().map(move |(b, d)| JoinEdge {
                    a: a.clone(),
                    b: b.clone(),
                    weight: d.at(now, hl),
                })
            })
            .collect()
    }

    /// Arrivals per hour of each template.
    ///
    /// A Poisson stream of rate `λ` observed for `T` hours leaves a decayed
    /// count of `λ h (1 - 2^(-T/h)) / ln 2` in expectation, `h` being the
    /// half-life; the rate is the count divided by that window. A summary
    /// spanning a single instant uses the stationary window `h / ln 2`.
    pub fn template_rates(&self) -> BTreeMap<String, f64> {
        let (now, hl) = (self.now(), self.half_life_s());
        let h = self.half_life_hours;
        let span_h = (now - self.first_s.unwrap_or(now)) / 3600.0;
        let mut window = h / std::f64::consts::LN_2;
        if span_h > 0.0 {
            window *= 1.0 - (-span_h / h).exp2();
        }
        self.template_arrivals
            .iter()
            .map(|(t, d)| (t.clone(), d.at(now, hl) / window))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = SummaryFileRef {
            format_version: SUMMARY_FORMAT_VERSION,
            summary: self,
        };
        serde_json::to_string_pretty(&file).expect("summary serializes")
    }

    pub fn from_json(text: &str) -> Result<WorkloadSummary, StatsError> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let h: Header = serde_json::from_str(text).map_err(|e| StatsError::Parse(e.to_string()))?;
        if h.format_version > SUMMARY_FORMAT_VERSION {
            return Err(StatsError::NewerFormat(h.format_version));
        }
        let f: SummaryFile = serde_json::from_str(text).map_err(|e| StatsError::Parse(e.to_string()))?;
        Ok(f.summary)
    }
}

#[derive(Serialize)]
struct SummaryFileRef<'a> {
    format_version: u32,
    summary: &'a WorkloadSummary,
}

#[derive(Deserialize)]
struct SummaryFile {
    #[allow(dead_code)]
    format_version: u32,
    summary: WorkloadSummary,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("summary format version {0} is newer than the supported {SUMMARY_FORMAT_VERSION}")]
    NewerFormat(u32),
    #[error("cannot parse summary: {0}")]
    Parse(String),
}

/// Pure form of [`WorkloadSummary::ingest`].
pub fn ingest(
    summary: &WorkloadSummary,
    records: impl IntoIterator<Item = TraceRecord>,
) -> (WorkloadSummary, IngestReport) {
    let mut s = summary.clone();
    let r = s.ingest(records);
    (s, r)
}

/// Parses a newline-delimited trace log. Blank lines are ignored; lines
/// that fail to parse come back as `(line number, message)`.
pub fn parse_trace_log(text: &str) -> (Vec<TraceRecord>, Vec<(usize, String)>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    (records, errors)
}

pub fn to_trace_line(record: &TraceRecord) -> String {
    serde_json::to_string(record).expect("record serializes")
}

/// Expected executions per template over a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedWorkload {
    pub horizon_hours: f64,
    pub executions: BTreeMap<String, f64>,
}

impl PredictedWorkload {
    pub fn rate_per_hour(&self, template: &str) -> f64 {
        match self.executions.get(template) {
            Some(&n) if self.horizon_hours > 0.0 => n / self.horizon_hours,
            _ => 0.0,
        }
    }
}

/// Extrapolates each template's current arrival rate over the horizon.
pub fn predict(summary: &WorkloadSummary, horizon_hours: f64) -> PredictedWorkload {
    PredictedWorkload {
        horizon_hours,
        executions: summary
            .template_rates()
            .into_iter()
            .map(|(t, rate)| (t, rate * horizon_hours))
            .collect(),
    }
}

/// Refits the model of every operator kind with at least three samples over
/// at least two DOPs. Other kinds, and kinds whose fit fails, keep their
/// prior model.
pub fn refit_models(summary: &WorkloadSummary, hw: &HardwareProfile) -> HardwareProfile {
    let mut out = hw.clone();
    for samples in summary.throughput_samples.values() {
        let dops: BTreeSet<u32> = samples.iter().map(|s| s.dop).collect();
        if samples.len() < 3 || dops.len() < 2 {
            continue;
        }
        if let Ok(m) = fit_model(samples) {
            out.set_model(m);
        }
    }
    out
}
