//! Dollar-rate evaluation of tuning proposals.
//!
//! A proposal is worth `x` dollars per hour (the predicted workload's cost
//! saving) and costs `y` dollars per hour (storage, maintenance, and one-time
//! work amortized over a horizon). It is accepted when `x - y > 0`.
//!
//! Query dollars are estimated at DOP 1 for every pipeline. Under linear
//! scaling that equals the cost at any DOP; otherwise it is the cost floor.

mod rewrite;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{simulate_query, EstimateError, HardwareProfile};
use crate::plan::{PlanDAG, PlanError, PlanSource};
use crate::stats::PredictedWorkload;

pub const TUNING_REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_AMORTIZATION_HOURS: f64 = 720.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum TuningProposal {
    CreateMV {
        /// Name of the view; view scans refer to it as their table.
        name: String,
        subtree: PlanSource,
        est_mv_rows: f64,
        row_bytes: f64,
        refresh_per_write_batch_node_s: f64,
        /// Node-seconds of the initial build. Defaults to the estimated cost
        /// of running the subtree at DOP 1.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_build_node_s: Option<f64>,
    },
    Recluster {
        table: String,
        attribute: String,
        table_bytes: f64,
        expected_scan_fraction: f64,
        repopulation_node_s: f64,
    },
}

impl TuningProposal {
    pub fn validate(&self) -> Result<(), WhatIfError> {
        let bad = |m: &str| Err(WhatIfError::InvalidProposal(m.to_string()));
        match self {
            TuningProposal::CreateMV {
                subtree,
                est_mv_rows,
                row_bytes,
                refresh_per_write_batch_node_s,
                initial_build_node_s,
                ..
            } => {
                subtree.to_plan()?;
                if !(*est_mv_rows > 0.0 && *row_bytes > 0.0) {
                    return bad("view rows and row width must be positive");
                }
                if !(*refresh_per_write_batch_node_s >= 0.0) || initial_build_node_s.is_some_and(|b| !(b >= 0.0)) {
                    return bad("maintenance and build node-seconds must be non-negative");
                }
            }
            TuningProposal::Recluster {
                table_bytes,
                expected_scan_fraction: f,
                repopulation_node_s,
                ..
            } => {
                if !(*table_bytes > 0.0) {
                    return bad("table_bytes must be positive");
                }
                if !(*f > 0.0 && *f <= 1.0) {
                    return bad("expected_scan_fraction must lie in (0, 1]");
                }
                if !(*repopulation_node_s >= 0.0) {
                    return bad("repopulation_node_s must be non-negative");
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            TuningProposal::CreateMV { name, .. } => format!("create view {name}"),
            TuningProposal::Recluster { table, attribute, .. } => format!("recluster {table} by {attribute}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WhatIfError {
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
    #[error("invalid price book: {0}")]
    InvalidPrices(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// The plan with the proposal applied, or `None` when it does not apply.
/// The input plan is left untouched.
pub fn rewrite(plan: &PlanDAG, proposal: &TuningProposal) -> Option<PlanDAG> {
    match proposal {
        TuningProposal::CreateMV {
            name,
            subtree,
            est_mv_rows,
            row_bytes,
            ..
        } => {
            let pattern = subtree.to_plan().ok()?;
            rewrite::substitute_view(plan, &pattern, name, *est_mv_rows, *row_bytes)
        }
        TuningProposal::Recluster {
            table,
            attribute,
            expected_scan_fraction,
            ..
        } => rewrite::scale_scans(plan, table, attribute, *expected_scan_fraction),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceBook {
    pub node_price_per_hour: f64,
    pub storage_price_per_gb_hour: f64,
    pub write_batches_per_hour: f64,
    #[serde(default = "default_amortization")]
    pub amortization_hours: f64,
}

fn default_amortization() -> f64 {
    DEFAULT_AMORTIZATION_HOURS
}

impl PriceBook {
    pub fn validate(&self) -> Result<(), WhatIfError> {
        let ok = self.node_price_per_hour > 0.0
            && self.storage_price_per_gb_hour >= 0.0
            && self.write_batches_per_hour >= 0.0
            && self.amortization_hours > 0.0;
        if ok {
            Ok(())
        } else {
            Err(WhatIfError::InvalidPrices(
                "prices and write rate must be non-negative, node price and horizon positive".into(),
            ))
        }
    }

    fn node_dollars(&self, node_seconds: f64) -> f64 {
        node_seconds * self.node_price_per_hour / 3600.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "accept",
            Verdict::Reject => "reject",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBenefit {
    pub template_id: String,
    pub rate_per_hour: f64,
    pub matched: bool,
    pub dollars_before: f64,
    pub dollars_after: f64,
    /// `rate * (before - after)`; negative when the proposal hurts.
    pub x_dollars_per_hour: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub storage_dollars_per_hour: f64,
    pub maintenance_dollars_per_hour: f64,
    pub amortized_one_time_dollars_per_hour: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub schema_version: u32,
    pub proposal: String,
    pub x_dollars_per_hour: f64,
    pub y_dollars_per_hour: f64,
    pub net_dollars_per_hour: f64,
    pub verdict: Verdict,
    pub one_time_dollars: f64,
    /// One-time dollars over the net rate; present only when net > 0.
    pub payback_hours: Option<f64>,
    pub templates: Vec<TemplateBenefit>,
    pub costs: CostBreakdown,
    /// Predicted templates without a plan; they contribute nothing to `x`.
    pub missing_plans: Vec<String>,
}

impl TuningReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "proposal: {}", self.proposal);
        let _ = writeln!(out, "{:<18} {:>10} {:>7} {:>14} {:>14} {:>14}", "template", "rate/h", "match", "$ before", "$ after", "x $/h");
        for t in &self.templates {
            let _ = writeln!(
                out,
                "{:<18} {:>10.4} {:>7} {:>14.6} {:>14.6} {:>14.6}",
                t.template_id, t.rate_per_hour, t.matched, t.dollars_before, t.dollars_after, t.x_dollars_per_hour
            );
        }
        for m in &self.missing_plans {
            let _ = writeln!(out, "{m:<18} (no plan, excluded)");
        }
        let c = &self.costs;
        let _ = writeln!(out, "storage        {:>14.6} $/h", c.storage_dollars_per_hour);
        let _ = writeln!(out, "maintenance    {:>14.6} $/h", c.maintenance_dollars_per_hour);
        let _ = writeln!(out, "one-time (am.) {:>14.6} $/h", c.amortized_one_time_dollars_per_hour);
        let _ = writeln!(out, "x = {:.6} $/h, y = {:.6} $/h, net = {:.6} $/h", self.x_dollars_per_hour, self.y_dollars_per_hour, self.net_dollars_per_hour);
        match self.payback_hours {
            Some(h) => {
                let _ = writeln!(out, "verdict: {} (one-time ${:.6}, payback {:.3} h)", self.verdict, self.one_time_dollars, h);
            }
            None => {
                let _ = writeln!(out, "verdict: {} (one-time ${:.6})", self.verdict, self.one_time_dollars);
            }
        }
        out
    }
}

/// Dollars of one execution at DOP 1 everywhere, priced per the price book.
pub fn query_dollars(plan: &PlanDAG, hw: &HardwareProfile, prices: &PriceBook) -> Result<f64, EstimateError> {
    let mut hw = hw.clone();
    hw.node_price_per_hour = prices.node_price_per_hour;
    let plan = plan.with_pipelines();
    let dops = plan.pipelines().iter().map(|p| (p.id, 1)).collect();
    Ok(simulate_query(&plan, &dops, &hw)?.dollars)
}

fn one_time_node_s(proposal: &TuningProposal, hw: &HardwareProfile) -> Result<f64, WhatIfError> {
    Ok(match proposal {
        TuningProposal::CreateMV {
            initial_build_node_s: Some(b),
            ..
        } => *b,
        TuningProposal::CreateMV { subtree, .. } => {
            let plan = subtree.to_plan()?.with_pipelines();
            let dops = plan.pipelines().iter().map(|p| (p.id, 1)).collect();
            simulate_query(&plan, &dops, hw)?.machine_time_s
        }
        TuningProposal::Recluster { repopulation_node_s, .. } => *repopulation_node_s,
    })
}

pub fn evaluate(
    proposal: &TuningProposal,
    predicted: &PredictedWorkload,
    plans: &BTreeMap<String, PlanDAG>,
    hw: &HardwareProfile,
    prices: &PriceBook,
) -> Result<TuningReport, WhatIfError> {
    proposal.validate()?;
    prices.validate()?;

    let mut templates = Vec::new();
    let mut missing_plans = Vec::new();
    for template in predicted.executions.keys() {
        let Some(plan) = plans.get(template) else {
            missing_plans.push(template.clone());
            continue;
        };
        let rate = predicted.rate_per_hour(template);
        let before = query_dollars(plan, hw, prices)?;
        let rewritten = rewrite(plan, proposal);
        let after = match &rewritten {
            Some(p) => query_dollars(p, hw, prices)?,
            None => before,
        };
        templates.push(TemplateBenefit {
            template_id: template.clone(),
            rate_per_hour: rate,
            matched: rewritten.is_some(),
            dollars_before: before,
            dollars_after: after,
            x_dollars_per_hour: if rewritten.is_some() { rate * (before - after) } else { 0.0 },
        });
    }
    let x = templates.iter().fold(0.0, |acc, t| acc + t.x_dollars_per_hour);

    let (storage_gb, maintenance_node_s) = match proposal {
        TuningProposal::CreateMV {
            est_mv_rows,
            row_bytes,
            refresh_per_write_batch_node_s,
            ..
        } => (est_mv_rows * row_bytes / 1e9, *refresh_per_write_batch_node_s),
        TuningProposal::Recluster { .. } => (0.0, 0.0),
    };
    let one_time_dollars = prices.node_dollars(one_time_node_s(proposal, hw)?);
    let costs = CostBreakdown {
        storage_dollars_per_hour: storage_gb * prices.storage_price_per_gb_hour,
        maintenance_dollars_per_hour: prices.write_batches_per_hour * prices.node_dollars(maintenance_node_s),
        amortized_one_time_dollars_per_hour: one_time_dollars / prices.amortization_hours,
    };
    let y = costs.storage_dollars_per_hour + costs.maintenance_dollars_per_hour + costs.amortized_one_time_dollars_per_hour;
    let net = x - y;
    Ok(TuningReport {
        schema_version: TUNING_REPORT_SCHEMA_VERSION,
        proposal: proposal.label(),
        x_dollars_per_hour: x,
        y_dollars_per_hour: y,
        net_dollars_per_hour: net,
        verdict: if net > 0.0 { Verdict::Accept } else { Verdict::Reject },
        one_time_dollars,
        payback_hours: (net > 0.0).then(|| one_time_dollars / net),
        templates,
        costs,
        missing_plans,
    })
}

#[cfg(test)]
mod tests;
