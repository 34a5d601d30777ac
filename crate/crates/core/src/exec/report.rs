use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Action;
use crate::plan::{OperatorKind, PipelineId};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeReason {
    Local,
    Replan,
}

impl fmt::Display for ResizeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResizeReason::Local => "local",
            ResizeReason::Replan => "replan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizeEvent {
    pub time_s: f64,
    pub pipeline: PipelineId,
    pub old_dop: u32,
    pub new_dop: u32,
    pub reason: ResizeReason,
}

/// A monitor check that called for action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub time_s: f64,
    pub pipeline: PipelineId,
    pub rows_ratio: f64,
    pub rate_ratio: f64,
    pub schedule_ratio: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRun {
    pub id: String,
    pub kind: OperatorKind,
    pub rows_in: f64,
    pub est_out_rows: f64,
    pub actual_out_rows: f64,
    /// The DOP that processed most of the operator's input.
    pub dop: u32,
    /// Time the operator alone would have needed for its input at the DOPs
    /// it actually ran with.
    pub busy_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub pipeline: PipelineId,
    pub operators: Vec<String>,
    pub alloc_s: f64,
    pub start_s: f64,
    pub finish_s: f64,
    pub planned_finish_s: f64,
    pub input_rows: f64,
    pub morsels: u64,
    pub final_dop: u32,
    pub node_seconds: f64,
    pub blocked_s: f64,
    pub ops: Vec<OpRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time_s: f64,
    /// Absent for query-wide events such as a replan.
    pub pipeline: Option<PipelineId>,
    pub event: String,
    pub dop: Option<u32>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub schema_version: u32,
    pub actual_latency_s: f64,
    pub actual_dollars: f64,
    pub machine_time_s: f64,
    pub blocked_s: f64,
    pub resize_events: Vec<ResizeEvent>,
    pub monitor_actions: Vec<MonitorRecord>,
    pub replans: usize,
    pub sla_met: bool,
    pub trace: Vec<PipelineTrace>,
    pub timeline: Vec<TimelineEvent>,
}

impl Default for ExecReport {
    fn default() -> Self {
        ExecReport {
            schema_version: REPORT_SCHEMA_VERSION,
            actual_latency_s: 0.0,
            actual_dollars: 0.0,
            machine_time_s: 0.0,
            blocked_s: 0.0,
            resize_events: Vec::new(),
            monitor_actions: Vec::new(),
            replans: 0,
            sla_met: false,
            trace: Vec::new(),
            timeline: Vec::new(),
        }
    }
}

impl ExecReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per timeline event.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,pipeline,event,dop,detail\n");
        for e in &self.timeline {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.time_s,
                e.pipeline.map(|p| p.to_string()).unwrap_or_default(),
                e.event,
                e.dop.map(|d| d.to_string()).unwrap_or_default(),
                e.detail,
            );
        }
        out
    }

    pub fn local_adjusts(&self) -> usize {
        self.monitor_actions.iter().filter(|m| m.action == Action::LocalAdjust).count()
    }
}
