//! Degree-of-parallelism planning.
//!
//! The latency/dollar trade-off is handled as a constrained single-objective
//! problem: minimise dollars under a latency target, or minimise latency
//! under a budget. [`plan_dop`] runs a greedy marginal-rate ascent from
//! DOP 1, restricted to critical-path pipelines, followed by a descent pass
//! that hands back nodes which do not pay for themselves, and a sibling
//! balancing pass ([`balance_siblings`]).
//!
//! [`plan_with_variants`] repeats this for progressively bushier rewrites of a
//! left-deep join plan ([`bushy_variants`]) and keeps the best. The exhaustive
//! [`brute_force_oracle`] exists to measure the greedy gap on small inputs.

mod balance;
mod bushy;
mod oracle;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::estimator::{simulate_workload, AllocationPolicy, EstimateError, HardwareProfile, SimEstimate, Workload};
use crate::plan::{PipelineId, PlanDAG};

pub use balance::{balance_siblings, balance_workload};
pub use bushy::{bushy_variants, BushyError};
pub use oracle::{brute_force_oracle, oracle_workload, OracleError};

pub const DEFAULT_DOP_MAX: u32 = 256;

/// Relative slack under which two dollar or latency values count as equal.
pub(crate) const REL_EPS: f64 = 1e-12;

pub(crate) fn strictly_less(a: f64, b: f64) -> bool {
    a < b - REL_EPS * a.abs().max(b.abs())
}

/// The single active bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    /// Minimise dollars subject to latency <= `latency_s`.
    LatencySla { latency_s: f64 },
    /// Minimise latency subject to dollars <= `budget_dollars`.
    Budget { budget_dollars: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserConstraint {
    pub bound: Bound,
    pub dop_max: u32,
}

impl UserConstraint {
    pub fn sla(latency_s: f64) -> Self {
        UserConstraint {
            bound: Bound::LatencySla { latency_s },
            dop_max: DEFAULT_DOP_MAX,
        }
    }

    pub fn budget(budget_dollars: f64) -> Self {
        UserConstraint {
            bound: Bound::Budget { budget_dollars },
            dop_max: DEFAULT_DOP_MAX,
        }
    }

    pub fn with_dop_max(mut self, dop_max: u32) -> Self {
        self.dop_max = dop_max.max(1);
        self
    }

    pub fn is_met(&self, est: &SimEstimate) -> bool {
        self.is_met_by(est.latency_s, est.dollars)
    }

    pub fn is_met_by(&self, latency_s: f64, dollars: f64) -> bool {
        match self.bound {
            Bound::LatencySla { latency_s: sla } => latency_s <= sla,
            Bound::Budget { budget_dollars } => dollars <= budget_dollars,
        }
    }

    /// The quantity being minimised.
    pub fn primary(&self, est: &SimEstimate) -> f64 {
        match self.bound {
            Bound::LatencySla { .. } => est.dollars,
            Bound::Budget { .. } => est.latency_s,
        }
    }
}

/// On-disk constraint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_dollars: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dop_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
}

impl ConstraintFile {
    /// Returns the constraint and the bushy-variant limit (default 0).
    pub fn resolve(&self) -> Result<(UserConstraint, usize), String> {
        let bound = match (self.mode.as_str(), self.latency_s, self.budget_dollars) {
            ("sla", Some(l), None) if l > 0.0 => Bound::LatencySla { latency_s: l },
            ("budget", None, Some(b)) if b > 0.0 => Bound::Budget { budget_dollars: b },
            ("sla", ..) => return Err("mode \"sla\" needs a positive latency_s and no budget_dollars".into()),
            ("budget", ..) => {
                return Err("mode \"budget\" needs a positive budget_dollars and no latency_s".into())
            }
            (m, ..) => return Err(format!("unknown mode {m:?}; expected \"sla\" or \"budget\"")),
        };
        let dop_max = self.dop_max.unwrap_or(DEFAULT_DOP_MAX);
        if dop_max < 1 {
            return Err("dop_max must be at least 1".into());
        }
        Ok((UserConstraint { bound, dop_max }, self.k_max.unwrap_or(0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DOPAssignment {
    pub dops: BTreeMap<PipelineId, u32>,
    pub estimate: SimEstimate,
    pub feasible: bool,
}

/// Orders two evaluated assignments: feasible before infeasible, then the
/// primary objective, then blocked node-time, then lexicographic DOPs.
/// Infeasible assignments rank by how close they come to the bound.
pub(crate) fn compare_outcomes(
    c: &UserConstraint,
    a: (&SimEstimate, &BTreeMap<PipelineId, u32>),
    b: (&SimEstimate, &BTreeMap<PipelineId, u32>),
) -> Ordering {
    let (fa, fb) = (c.is_met(a.0), c.is_met(b.0));
    if fa != fb {
        return if fa { Ordering::Less } else { Ordering::Greater };
    }
    let keys = |e: &SimEstimate| -> [f64; 3] {
        match (fa, c.bound) {
            (true, _) => [c.primary(e), e.blocked_s, 0.0],
            (false, Bound::LatencySla { .. }) => [e.latency_s, e.dollars, e.blocked_s],
            (false, Bound::Budget { .. }) => [e.dollars, e.latency_s, e.blocked_s],
        }
    };
    let (ka, kb) = (keys(a.0), keys(b.0));
    for (x, y) in ka.iter().zip(&kb) {
        if strictly_less(*x, *y) {
            return Ordering::Less;
        }
        if strictly_less(*y, *x) {
            return Ordering::Greater;
        }
    }
    a.1.values().cmp(b.1.values())
}

pub(crate) struct Evaluator<'a> {
    pub workload: &'a Workload,
    pub hw: &'a HardwareProfile,
}

impl Evaluator<'_> {
    pub fn eval(&self, dops: &BTreeMap<PipelineId, u32>) -> Result<SimEstimate, EstimateError> {
        simulate_workload(self.workload, dops, self.hw, AllocationPolicy::Predicted)
    }

    pub fn time(&self, id: PipelineId, dop: u32) -> Result<f64, EstimateError> {
        self.workload.get(id).expect("pipeline belongs to the workload").time(dop, self.hw)
    }
}

/// Chooses per-pipeline DOPs for `plan`.
pub fn plan_dop(plan: &PlanDAG, constraint: &UserConstraint, hw: &HardwareProfile) -> Result<DOPAssignment, EstimateError> {
    plan_workload(&Workload::from_plan(plan), constraint, hw)
}

/// [`plan_dop`] on an explicit workload. Pinned pipelines keep their DOP.
pub fn plan_workload(
    workload: &Workload,
    constraint: &UserConstraint,
    hw: &HardwareProfile,
) -> Result<DOPAssignment, EstimateError> {
    let ev = Evaluator { workload, hw };
    let mut dops: BTreeMap<PipelineId, u32> = workload
        .pipelines
        .iter()
        .map(|p| (p.id, p.pinned_dop.unwrap_or(1)))
        .collect();
    let mut est = ev.eval(&dops)?;

    ascend(&ev, constraint, &mut dops, &mut est)?;
    descend(&ev, constraint, &mut dops, &mut est)?;
    refine(&ev, constraint, &mut dops, &mut est)?;
    let balanced = balance_workload(
        workload,
        &DOPAssignment {
            dops,
            feasible: constraint.is_met(&est),
            estimate: est,
        },
        hw,
    )?;
    Ok(DOPAssignment {
        feasible: constraint.is_met(&balanced.estimate),
        ..balanced
    })
}

/// Ranking of a single-step increment. Larger is better.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct StepScore {
    /// 1 when the step shortens the query, 0 when it only shortens its own
    /// pipeline (parallel critical branches of equal length).
    class: u8,
    rate: f64,
    gain: f64,
}

fn step_score(gain: f64, own_gain: f64, extra_dollars: f64, dollars: f64) -> StepScore {
    let free = extra_dollars <= REL_EPS * dollars.abs();
    let (class, g) = if gain > 0.0 { (1, gain) } else { (0, own_gain) };
    StepScore {
        class,
        rate: if free { f64::INFINITY } else { g / extra_dollars },
        gain: g,
    }
}

fn ascend(
    ev: &Evaluator<'_>,
    c: &UserConstraint,
    dops: &mut BTreeMap<PipelineId, u32>,
    est: &mut SimEstimate,
) -> Result<(), EstimateError> {
    if let Bound::Budget { budget_dollars } = c.bound {
        if est.dollars > budget_dollars {
            return Ok(());
        }
    }
    loop {
        if let Bound::LatencySla { latency_s } = c.bound {
            if est.latency_s <= latency_s {
                return Ok(());
            }
        }
        let critical = est.critical_path(ev.workload);
        let mut best: Option<(StepScore, PipelineId, BTreeMap<PipelineId, u32>, SimEstimate)> = None;
        for id in critical {
            if ev.workload.get(id).is_some_and(|p| p.pinned_dop.is_some()) {
                continue;
            }
            let d = dops[&id];
            if d >= c.dop_max {
                continue;
            }
            let own_before = ev.time(id, d)?;
            let own_after = ev.time(id, d + 1)?;
            if !(own_after < own_before) {
                continue;
            }
            let mut trial = dops.clone();
            trial.insert(id, d + 1);
            let e = ev.eval(&trial)?;
            if let Bound::Budget { budget_dollars } = c.bound {
                if e.dollars > budget_dollars {
                    continue;
                }
            }
            let score = step_score(
                est.latency_s - e.latency_s,
                own_before - own_after,
                e.dollars - est.dollars,
                est.dollars,
            );
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, id, trial, e));
            }
        }
        match best {
            Some((_, _, trial, e)) => {
                *dops = trial;
                *est = e;
            }
            None => return Ok(()),
        }
    }
}

/// Gives back nodes that do not pay for themselves. Never worsens the
/// primary objective and never breaks a met bound.
fn descend(
    ev: &Evaluator<'_>,
    c: &UserConstraint,
    dops: &mut BTreeMap<PipelineId, u32>,
    est: &mut SimEstimate,
) -> Result<(), EstimateError> {
    let ids: Vec<PipelineId> = dops.keys().copied().collect();
    loop {
        let mut changed = false;
        for &id in &ids {
            if ev.workload.get(id).is_some_and(|p| p.pinned_dop.is_some()) {
                continue;
            }
            while dops[&id] > 1 {
                let mut trial = dops.clone();
                trial.insert(id, dops[&id] - 1);
                let e = ev.eval(&trial)?;
                let keeps_bound = match c.bound {
                    Bound::LatencySla { latency_s } if est.latency_s <= latency_s => e.latency_s <= latency_s,
                    _ => e.latency_s <= est.latency_s,
                };
                if keeps_bound && strictly_less(e.dollars, est.dollars) {
                    *dops = trial;
                    *est = e;
                    changed = true;
                } else {
                    break;
                }
            }
        }
        if !changed {
            return Ok(());
        }
    }
}

/// Pairwise exchange: moves one node step from one pipeline to another, or
/// one step on a single pipeline, while that strictly improves the outcome.
/// Catches the cases where the greedy path committed nodes to the wrong
/// sibling.
fn refine(
    ev: &Evaluator<'_>,
    c: &UserConstraint,
    dops: &mut BTreeMap<PipelineId, u32>,
    est: &mut SimEstimate,
) -> Result<(), EstimateError> {
    let ids: Vec<PipelineId> = ev
        .workload
        .pipelines
        .iter()
        .filter(|p| p.pinned_dop.is_none())
        .map(|p| p.id)
        .collect();
    let none = BTreeMap::new();
    for _ in 0..REFINE_ROUNDS {
        let mut best: Option<(BTreeMap<PipelineId, u32>, SimEstimate)> = None;
        let moves: Vec<Option<PipelineId>> = ids.iter().copied().map(Some).chain([None]).collect();
        for &up in &moves {
            for &down in &moves {
                if up == down {
                    continue;
                }
                let mut trial = dops.clone();
                if let Some(u) = up {
                    let d = trial[&u];
                    if d >= c.dop_max {
                        continue;
                    }
                    trial.insert(u, d + 1);
                }
                if let Some(w) = down {
                    let d = trial[&w];
                    if d <= 1 {
                        continue;
                    }
                    trial.insert(w, d - 1);
                }
                let e = ev.eval(&trial)?;
                let incumbent = best.as_ref().map_or(&*est, |b| &b.1);
                if compare_outcomes(c, (&e, &none), (incumbent, &none)) == Ordering::Less {
                    best = Some((trial, e));
                }
            }
        }
        match best {
            Some((trial, e)) => {
                *dops = trial;
                *est = e;
            }
            None => break,
        }
    }
    Ok(())
}

const REFINE_ROUNDS: usize = 256;

/// A plan variant together with its DOP assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantChoice {
    pub variant_index: usize,
    pub plan: PlanDAG,
    pub assignment: DOPAssignment,
}

/// Plans every bushy variant (up to `k_max` detached join pairs) and keeps
/// the best under the constraint. Plans that are not left-deep join trees
/// are planned as given.
pub fn plan_with_variants(
    plan: &PlanDAG,
    constraint: &UserConstraint,
    hw: &HardwareProfile,
    k_max: usize,
) -> Result<VariantChoice, EstimateError> {
    let variants = bushy_variants(plan, k_max).unwrap_or_else(|_| vec![plan.with_pipelines()]);
    let mut best: Option<VariantChoice> = None;
    for (i, v) in variants.into_iter().enumerate() {
        let a = plan_dop(&v, constraint, hw)?;
        let better = match &best {
            None => true,
            Some(b) => {
                compare_outcomes(
                    constraint,
                    (&a.estimate, &BTreeMap::new()),
                    (&b.assignment.estimate, &BTreeMap::new()),
                ) == Ordering::Less
            }
        };
        if better {
            best = Some(VariantChoice {
                variant_index: i,
                plan: v,
                assignment: a,
            });
        }
    }
    Ok(best.expect("variant 0 is always present"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{OpWork, PipelineWork, ScalabilityModel};
    use crate::plan::{parse_plan, OperatorKind};

    fn linear_hw() -> HardwareProfile {
        HardwareProfile::uniform_linear(3.6, 1e6)
    }

    /// 100 node-minutes of perfectly linear work.
    fn hundred_node_minutes() -> PlanDAG {
        parse_plan("scan(T, rows=6e9)").unwrap()
    }

    #[test]
    fn linear_pipeline_reaches_one_minute_at_equal_cost() {
        let hw = linear_hw();
        let a = plan_dop(&hundred_node_minutes(), &UserConstraint::sla(60.0), &hw).unwrap();
        assert!(a.feasible);
        assert_eq!(a.dops[&PipelineId(0)], 100);
        assert_eq!(a.estimate.latency_s, 60.0);
        let one = simulate_workload(
            &Workload::from_plan(&hundred_node_minutes()),
            &BTreeMap::from([(PipelineId(0), 1)]),
            &hw,
            AllocationPolicy::Predicted,
        )
        .unwrap();
        assert!((a.estimate.dollars - one.dollars).abs() <= 1e-9 * one.dollars);
    }

    #[test]
    fn unreachable_sla_is_infeasible_at_dop_max() {
        let a = plan_dop(&hundred_node_minutes(), &UserConstraint::sla(6.0), &linear_hw()).unwrap();
        assert!(!a.feasible);
        assert_eq!(a.dops[&PipelineId(0)], 256);
        assert!((a.estimate.latency_s - 6000.0 / 256.0).abs() < 1e-9);
    }

    #[test]
    fn budget_mode_stops_before_overspending() {
        let hw = HardwareProfile::new(
            3.6,
            vec![ScalabilityModel::new(OperatorKind::TableScan, 1e6, 0.1, 0.0)],
        );
        let plan = parse_plan("scan(T, rows=1e8)").unwrap();
        let base = plan_dop(&plan, &UserConstraint::budget(1e9), &hw).unwrap();
        assert!(base.feasible);
        let cheap = plan_dop(&plan, &UserConstraint::budget(0.2), &hw).unwrap();
        assert!(cheap.feasible);
        assert!(cheap.estimate.dollars <= 0.2);
        assert!(cheap.estimate.latency_s >= base.estimate.latency_s);
        let broke = plan_dop(&plan, &UserConstraint::budget(1e-6), &hw).unwrap();
        assert!(!broke.feasible);
        assert_eq!(broke.dops[&PipelineId(0)], 1);
    }

    #[test]
    fn equal_parallel_branches_do_not_stall_the_ascent() {
        let hw = HardwareProfile::new(1.0, vec![ScalabilityModel::linear(OperatorKind::TableScan, 1.0)]);
        let op = |rows| {
            vec![OpWork {
                id: "x".into(),
                kind: OperatorKind::TableScan,
                rows,
            }]
        };
        let w = Workload {
            pipelines: vec![
                PipelineWork {
                    id: PipelineId(0),
                    ops: op(10.0),
                    deps: Default::default(),
                    pinned_dop: None,
                },
                PipelineWork {
                    id: PipelineId(1),
                    ops: op(10.0),
                    deps: Default::default(),
                    pinned_dop: None,
                },
                PipelineWork {
                    id: PipelineId(2),
                    ops: op(1.0),
                    deps: [PipelineId(0), PipelineId(1)].into(),
                    pinned_dop: None,
                },
            ],
        };
        let a = plan_workload(&w, &UserConstraint::sla(6.0), &hw).unwrap();
        assert!(a.feasible, "{a:?}");
        assert_eq!(a.dops[&PipelineId(0)], 2);
        assert_eq!(a.dops[&PipelineId(1)], 2);
    }

    #[test]
    fn pinned_pipelines_are_left_alone() {
        let hw = linear_hw();
        let mut w = Workload::from_plan(&hundred_node_minutes());
        w.pipelines[0].pinned_dop = Some(7);
        let a = plan_workload(&w, &UserConstraint::sla(60.0), &hw).unwrap();
        assert_eq!(a.dops[&PipelineId(0)], 7);
        assert!(!a.feasible);
    }

    #[test]
    fn constraint_file_resolution() {
        let f: ConstraintFile = serde_json::from_str(r#"{"mode":"sla","latency_s":30,"k_max":2}"#).unwrap();
        let (c, k) = f.resolve().unwrap();
        assert_eq!(c, UserConstraint::sla(30.0));
        assert_eq!(k, 2);
        let f: ConstraintFile = serde_json::from_str(r#"{"mode":"budget","latency_s":30}"#).unwrap();
        assert!(f.resolve().is_err());
        let f: ConstraintFile = serde_json::from_str(r#"{"mode":"fast"}"#).unwrap();
        assert!(f.resolve().is_err());
    }
}
