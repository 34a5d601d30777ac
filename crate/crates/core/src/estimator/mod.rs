//! Time and dollar cost estimation.
//!
//! Each operator kind has a [`ScalabilityModel`] in the Universal Scalability
//! Law family:
//!
//! ```text
//! throughput(d) = r * d / (1 + sigma * (d - 1) + kappa * d * (d - 1))
//! ```
//!
//! `r` is the single-node rate in rows per second, `sigma` models contention
//! and `kappa` coherency (cross-node coordination, e.g. shuffles). With
//! `kappa > 0` throughput peaks at `d* = sqrt((1 - sigma) / kappa)` and falls
//! afterwards.
//!
//! A pipeline runs its operators concurrently, so its duration is the slowest
//! operator's `rows / throughput(dop)`. The query simulator in [`sim`] strings
//! pipelines together and charges every allocated node-second, including time
//! spent waiting on upstream pipelines.

mod fit;
pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{per_operator_rows, OperatorKind, Pipeline, PlanDAG};

pub use fit::{fit_model, CalibrationSample, FitError};
pub use sim::{
    simulate_query, simulate_query_with, simulate_workload, AllocationPolicy, OpWork, PipelineTiming,
    PipelineWork, SimEstimate, Workload,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("degree of parallelism must be at least 1")]
    InvalidDop,
    #[error("no scalability model for operator kind {0}")]
    MissingModel(OperatorKind),
    #[error("pipeline {0} has no DOP assigned")]
    Unassigned(crate::plan::PipelineId),
    #[error("pipeline dependencies contain a cycle")]
    CyclicDeps,
    #[error("pipeline {0} depends on an unknown pipeline")]
    UnknownDep(crate::plan::PipelineId),
}

/// Throughput model for one operator kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityModel {
    pub op_kind: OperatorKind,
    /// Rows per second on a single node.
    pub r: f64,
    pub sigma: f64,
    pub kappa: f64,
}

impl ScalabilityModel {
    pub fn linear(op_kind: OperatorKind, r: f64) -> Self {
        ScalabilityModel {
            op_kind,
            r,
            sigma: 0.0,
            kappa: 0.0,
        }
    }

    pub fn new(op_kind: OperatorKind, r: f64, sigma: f64, kappa: f64) -> Self {
        ScalabilityModel {
            op_kind,
            r,
            sigma,
            kappa,
        }
    }

    /// Rows per second at `dop` nodes.
    pub fn throughput(&self, dop: u32) -> Result<f64, EstimateError> {
        op_throughput(self, dop)
    }

    pub(crate) fn rate(&self, dop: u32) -> f64 {
        let d = dop as f64;
        self.r * d / (1.0 + self.sigma * (d - 1.0) + self.kappa * d * (d - 1.0))
    }

    /// The DOP of peak throughput, `round(sqrt((1 - sigma) / kappa))`, when
    /// the model is retrograde.
    pub fn peak_dop(&self) -> Option<u32> {
        (self.kappa > 0.0).then(|| ((1.0 - self.sigma).max(0.0) / self.kappa).sqrt().round().max(1.0) as u32)
    }

    pub fn is_linear(&self) -> bool {
        self.sigma == 0.0 && self.kappa == 0.0
    }
}

pub fn op_throughput(model: &ScalabilityModel, dop: u32) -> Result<f64, EstimateError> {
    if dop < 1 {
        return Err(EstimateError::InvalidDop);
    }
    Ok(model.rate(dop))
}

/// Calibrated cluster parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Dollars per node-hour.
    pub node_price_per_hour: f64,
    /// Seconds between a resize request and its effect.
    #[serde(default)]
    pub resize_delay_s: f64,
    /// Rows per morsel in the execution simulator.
    pub morsel_rows: f64,
    pub models: Vec<ScalabilityModel>,
}

impl HardwareProfile {
    pub fn new(node_price_per_hour: f64, models: Vec<ScalabilityModel>) -> Self {
        HardwareProfile {
            node_price_per_hour,
            resize_delay_s: 0.0,
            morsel_rows: 100_000.0,
            models,
        }
    }

    /// Same linear model for every operator kind.
    pub fn uniform_linear(node_price_per_hour: f64, r: f64) -> Self {
        Self::new(
            node_price_per_hour,
            OperatorKind::ALL.iter().map(|&k| ScalabilityModel::linear(k, r)).collect(),
        )
    }

    /// Model for `kind`. A view scan without its own model reuses the table
    /// scan model.
    pub fn model(&self, kind: OperatorKind) -> Result<&ScalabilityModel, EstimateError> {
        self.models
            .iter()
            .find(|m| m.op_kind == kind)
            .or_else(|| {
                (kind == OperatorKind::MVScan)
                    .then(|| self.models.iter().find(|m| m.op_kind == OperatorKind::TableScan))
                    .flatten()
            })
            .ok_or(EstimateError::MissingModel(kind))
    }

    /// Replaces (or adds) the model for its kind.
    pub fn set_model(&mut self, model: ScalabilityModel) {
        match self.models.iter_mut().find(|m| m.op_kind == model.op_kind) {
            Some(slot) => *slot = model,
            None => self.models.push(model),
        }
    }

    pub fn dollars(&self, node_seconds: f64) -> f64 {
        node_seconds * self.node_price_per_hour / 3600.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.node_price_per_hour > 0.0) {
            return Err("node_price_per_hour must be positive".into());
        }
        if !(self.resize_delay_s >= 0.0) {
            return Err("resize_delay_s must be non-negative".into());
        }
        if !(self.morsel_rows > 0.0) {
            return Err("morsel_rows must be positive".into());
        }
        for m in &self.models {
            if !(m.r > 0.0) || !(m.sigma >= 0.0) || !(m.kappa >= 0.0) {
                return Err(format!("model for {} needs r > 0, sigma >= 0, kappa >= 0", m.op_kind));
            }
        }
        Ok(())
    }
}

/// Bottleneck duration of a pipeline at `dop`.
pub fn pipeline_time(
    plan: &PlanDAG,
    pipeline: &Pipeline,
    dop: u32,
    hw: &HardwareProfile,
) -> Result<f64, EstimateError> {
    let ops: Vec<OpWork> = per_operator_rows(plan, pipeline)
        .into_iter()
        .map(|(id, rows)| OpWork {
            kind: plan.op(&id).kind,
            id,
            rows,
        })
        .collect();
    ops_time(&ops, dop, hw)
}

pub(crate) fn ops_time(ops: &[OpWork], dop: u32, hw: &HardwareProfile) -> Result<f64, EstimateError> {
    if dop < 1 {
        return Err(EstimateError::InvalidDop);
    }
    let mut worst: f64 = 0.0;
    for op in ops {
        let model = hw.model(op.kind)?;
        if op.rows > 0.0 {
            worst = worst.max(op.rows / model.rate(dop));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{extract_pipelines, parse_plan};

    #[test]
    fn throughput_identity_and_linear() {
        let m = ScalabilityModel::linear(OperatorKind::TableScan, 1e6);
        assert_eq!(m.throughput(1).unwrap(), 1e6);
        assert_eq!(m.throughput(100).unwrap(), 1e8);
        assert_eq!(m.throughput(0), Err(EstimateError::InvalidDop));
    }

    #[test]
    fn throughput_with_contention_and_coherency() {
        let m = ScalabilityModel::new(OperatorKind::Exchange, 1e6, 0.1, 0.001);
        // 1e7 / (1 + 0.9 + 0.09)
        let expected = 1e7 / 1.99;
        let got = m.throughput(10).unwrap();
        assert!((got - expected).abs() / expected < 1e-12);
        assert!((got - 5.025e6).abs() / 5.025e6 < 1e-3);
    }

    fn probe_fixture() -> (PlanDAG, HardwareProfile) {
        let plan = extract_pipelines(parse_plan("probe(build(scan(A, rows=10)), scan(B, rows=1e6), out=1e6)").unwrap());
        let hw = HardwareProfile::new(
            3.6,
            vec![
                ScalabilityModel::linear(OperatorKind::TableScan, 1e6),
                ScalabilityModel::new(OperatorKind::HashProbe, 2e5, 0.2, 0.0),
                ScalabilityModel::linear(OperatorKind::HashBuild, 1e6),
            ],
        );
        (plan, hw)
    }

    #[test]
    fn pipeline_time_is_the_bottleneck() {
        let (plan, hw) = probe_fixture();
        let probe = &plan.pipelines()[1];
        // scan: 1e6 / 4e6 = 0.25 s; probe: 1e6 / (8e5 / 1.6) = 2.0 s
        let t = pipeline_time(&plan, probe, 4, &hw).unwrap();
        assert!((t - 2.0).abs() < 1e-12, "{t}");
    }

    #[test]
    fn linear_scan_pipeline_time() {
        let plan = extract_pipelines(parse_plan("scan(T, rows=1e6)").unwrap());
        let hw = HardwareProfile::uniform_linear(3.6, 1e6);
        let p = &plan.pipelines()[0];
        assert_eq!(pipeline_time(&plan, p, 1, &hw).unwrap(), 1.0);
        assert_eq!(pipeline_time(&plan, p, 100, &hw).unwrap(), 0.01);
    }

    #[test]
    fn missing_model_is_reported() {
        let (plan, mut hw) = probe_fixture();
        hw.models.retain(|m| m.op_kind != OperatorKind::HashProbe);
        let err = pipeline_time(&plan, &plan.pipelines()[1], 1, &hw).unwrap_err();
        assert_eq!(err, EstimateError::MissingModel(OperatorKind::HashProbe));
    }

    #[test]
    fn mvscan_falls_back_to_scan_model() {
        let hw = HardwareProfile::new(1.0, vec![ScalabilityModel::linear(OperatorKind::TableScan, 5.0)]);
        assert_eq!(hw.model(OperatorKind::MVScan).unwrap().r, 5.0);
        assert!(hw.model(OperatorKind::Sort).is_err());
    }

    #[test]
    fn peak_dop_for_retrograde_model() {
        let m = ScalabilityModel::new(OperatorKind::Exchange, 1e6, 0.0, 0.01);
        assert_eq!(m.peak_dop(), Some(10));
        assert_eq!(ScalabilityModel::linear(OperatorKind::Exchange, 1.0).peak_dop(), None);
    }
}
