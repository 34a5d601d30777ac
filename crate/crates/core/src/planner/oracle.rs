use std::cmp::Ordering;
use std::collections::BTreeMap;

use thiserror::Error;

use super::{compare_outcomes, DOPAssignment, Evaluator, UserConstraint};
use crate::estimator::{EstimateError, HardwareProfile, Workload};
use crate::plan::{PipelineId, PlanDAG};

pub const ORACLE_MAX_DOP: u32 = 8;
pub const ORACLE_MAX_PIPELINES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("dop cap {0} exceeds {ORACLE_MAX_DOP}")]
    DopCapTooLarge(u32),
    #[error("{0} pipelines exceed the exhaustive limit of {ORACLE_MAX_PIPELINES}")]
    TooManyPipelines(usize),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// Exhaustive search over `1..=min(dop_cap, dop_max)` for every pipeline,
/// ranked exactly as the planner ranks assignments.
pub fn brute_force_oracle(
    plan: &PlanDAG,
    constraint: &UserConstraint,
    hw: &HardwareProfile,
    dop_cap: u32,
) -> Result<DOPAssignment, OracleError> {
    oracle_workload(&Workload::from_plan(plan), constraint, hw, dop_cap)
}

pub fn oracle_workload(
    workload: &Workload,
    constraint: &UserConstraint,
    hw: &HardwareProfile,
    dop_cap: u32,
) -> Result<DOPAssignment, OracleError> {
    if dop_cap > ORACLE_MAX_DOP {
        return Err(OracleError::DopCapTooLarge(dop_cap));
    }
    let n = workload.pipelines.len();
    if n > ORACLE_MAX_PIPELINES {
        return Err(OracleError::TooManyPipelines(n));
    }
    let cap = dop_cap.min(constraint.dop_max).max(1);
    let ev = Evaluator { workload, hw };
    let free: Vec<PipelineId> = workload
        .pipelines
        .iter()
        .filter(|p| p.pinned_dop.is_none())
        .map(|p| p.id)
        .collect();
    let mut dops: BTreeMap<PipelineId, u32> = workload
        .pipelines
        .iter()
        .map(|p| (p.id, p.pinned_dop.unwrap_or(1)))
        .collect();

    let mut best: Option<(BTreeMap<PipelineId, u32>, _)> = None;
    loop {
        let est = ev.eval(&dops)?;
        let better = match &best {
            None => true,
            Some((bd, be)) => compare_outcomes(constraint, (&est, &dops), (be, bd)) == Ordering::Less,
        };
        if better {
            best = Some((dops.clone(), est));
        }
        // Odometer step over the free pipelines.
        let mut advanced = false;
        for id in &free {
            let d = dops.get_mut(id).expect("present");
            if *d < cap {
                *d += 1;
                advanced = true;
                break;
            }
            *d = 1;
        }
        if !advanced {
            break;
        }
    }
    let (dops, estimate) = best.expect("the grid is never empty");
    Ok(DOPAssignment {
        feasible: constraint.is_met(&estimate),
        dops,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::ScalabilityModel;
    use crate::plan::{parse_plan, OperatorKind};

    #[test]
    fn loose_sla_picks_dop_one() {
        let plan = parse_plan("scan(T, rows=1e6)").unwrap();
        let hw = HardwareProfile::new(3.6, vec![ScalabilityModel::new(OperatorKind::TableScan, 1e6, 0.1, 0.0)]);
        let a = brute_force_oracle(&plan, &UserConstraint::sla(1e6), &hw, 8).unwrap();
        assert_eq!(a.dops[&PipelineId(0)], 1);
        assert!(a.feasible);
    }

    #[test]
    fn two_pipeline_chain_matches_hand_enumeration() {
        // build: 8e6 rows, probe pipeline: 4e6 rows; r = 1e6, sigma = 0.1.
        // T(d) = d / (1 + 0.1 (d - 1)) * 1e6.
        // Latency = 8/T1(d1) + 4/T1(d2) [in units of 1e6 rows]; dollars ∝ d1 t1 + d2 t2.
        // With SLA 7 s the cheapest point is (2, 1): 8 * 1.1/2 + 4 = 8.4 > 7 fails;
        // (2, 2): 4.4 + 2.2 = 6.6 ok, cost 2*4.4 + 2*2.2 = 13.2;
        // (3, 1): 8*1.2/3 + 4 = 7.2 fails; (4, 1): 8*1.3/4 + 4 = 6.6 ok, cost 4*2.6 + 4 = 14.4;
        // (1, d2) needs 8 + ... > 7 fails. So (2, 2).
        let plan = parse_plan("probe(build(scan(A, rows=8e6)), scan(B, rows=4e6), out=1)").unwrap();
        let hw = HardwareProfile::new(
            3600.0,
            vec![
                ScalabilityModel::new(OperatorKind::TableScan, 1e6, 0.1, 0.0),
                ScalabilityModel::new(OperatorKind::HashBuild, 1e6, 0.1, 0.0),
                ScalabilityModel::new(OperatorKind::HashProbe, 1e6, 0.1, 0.0),
            ],
        );
        let a = brute_force_oracle(&plan, &UserConstraint::sla(7.0), &hw, 8).unwrap();
        assert_eq!(a.dops.values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert!((a.estimate.dollars - 13.2).abs() < 1e-9);
    }

    #[test]
    fn too_large_instances_rejected() {
        let plan = parse_plan("scan(T, rows=1)").unwrap();
        let hw = HardwareProfile::uniform_linear(1.0, 1.0);
        assert_eq!(
            brute_force_oracle(&plan, &UserConstraint::sla(1.0), &hw, 9),
            Err(OracleError::DopCapTooLarge(9))
        );
    }
}
