//! Latency/dollar trade-off curves.
//!
//! A sweep plans the query once per latency target and keeps the achieved
//! `(latency, dollars)` points that no other point dominates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::estimator::{EstimateError, HardwareProfile};
use crate::plan::{PipelineId, PlanDAG};
use crate::planner::{plan_with_variants, UserConstraint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub latency_s: f64,
    pub dollars: f64,
    pub dops: BTreeMap<PipelineId, u32>,
    pub variant_index: usize,
}

/// `a` is no worse than `b` in both objectives and better in one.
pub fn dominates(a: &FrontierPoint, b: &FrontierPoint) -> bool {
    a.latency_s <= b.latency_s
        && a.dollars <= b.dollars
        && (a.latency_s < b.latency_s || a.dollars < b.dollars)
}

/// Non-dominated points with distinct `(latency, dollars)`, by latency.
pub fn pareto_filter(points: Vec<FrontierPoint>) -> Vec<FrontierPoint> {
    let mut kept: Vec<FrontierPoint> = Vec::new();
    for p in points {
        if kept.iter().any(|k| dominates(k, &p) || (k.latency_s == p.latency_s && k.dollars == p.dollars)) {
            continue;
        }
        kept.retain(|k| !dominates(&p, k));
        kept.push(p);
    }
    kept.sort_by(|a, b| a.latency_s.total_cmp(&b.latency_s).then(a.dollars.total_cmp(&b.dollars)));
    kept
}

/// True when no point dominates another.
pub fn is_non_dominated(points: &[FrontierPoint]) -> bool {
    points
        .iter()
        .enumerate()
        .all(|(i, a)| points.iter().enumerate().all(|(j, b)| i == j || !dominates(a, b)))
}

/// Plans every distinct latency target and returns the frontier of the
/// feasible outcomes. Infeasible targets contribute nothing.
pub fn sweep(
    plan: &PlanDAG,
    hw: &HardwareProfile,
    slas: &[f64],
    dop_max: u32,
    k_max: usize,
) -> Result<Vec<FrontierPoint>, EstimateError> {
    let mut targets = slas.to_vec();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    let mut points = Vec::new();
    for sla in targets {
        let c = UserConstraint::sla(sla).with_dop_max(dop_max);
        let choice = plan_with_variants(plan, &c, hw, k_max)?;
        if choice.assignment.feasible {
            points.push(FrontierPoint {
                latency_s: choice.assignment.estimate.latency_s,
                dollars: choice.assignment.estimate.dollars,
                dops: choice.assignment.dops,
                variant_index: choice.variant_index,
            });
        }
    }
    Ok(pareto_filter(points))
}

/// `latency_s,dollars,variant_index,dops` with DOPs as `p0=4;p1=2`.
pub fn to_csv(points: &[FrontierPoint]) -> String {
    let mut out = String::from("latency_s,dollars,variant_index,dops\n");
    for p in points {
        let dops: Vec<String> = p.dops.iter().map(|(id, d)| format!("{id}={d}")).collect();
        let _ = writeln!(out, "{},{},{},{}", p.latency_s, p.dollars, p.variant_index, dops.join(";"));
    }
    out
}

/// Reads the first two columns of a frontier CSV back.
pub fn parse_csv(text: &str) -> Result<Vec<(f64, f64)>, String> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut f = l.split(',');
            let mut num = || {
                f.next()
                    .and_then(|x| x.parse::<f64>().ok())
                    .ok_or_else(|| format!("row {}: expected numeric latency and dollars", i + 1))
            };
            Ok((num()?, num()?))
        })
        .collect()
}
