use std::collections::BTreeMap;

use super::{DOPAssignment, Evaluator};
use crate::estimator::{EstimateError, HardwareProfile, Workload};
use crate::plan::{PipelineId, PlanDAG};

/// Siblings whose finish is within this fraction of their own run time of
/// the group maximum are left alone.
const BALANCED_WITHIN: f64 = 0.01;

/// Lowers the DOP of sibling pipelines that would otherwise finish early and
/// wait for the slowest sibling. Never raises a DOP and never increases
/// latency or dollars.
///
/// Siblings are the dependencies of one consumer whose scheduling windows
/// overlap the window of the latest finisher. The latest finish time is held
/// fixed and each other sibling gets the smallest DOP that still meets it.
pub fn balance_siblings(
    plan: &PlanDAG,
    assignment: &DOPAssignment,
    hw: &HardwareProfile,
) -> Result<DOPAssignment, EstimateError> {
    balance_workload(&Workload::from_plan(plan), assignment, hw)
}

pub fn balance_workload(
    workload: &Workload,
    assignment: &DOPAssignment,
    hw: &HardwareProfile,
) -> Result<DOPAssignment, EstimateError> {
    let ev = Evaluator { workload, hw };
    let mut dops = assignment.dops.clone();
    let mut est = ev.eval(&dops)?;

    for i in workload.topo_order()? {
        let consumer = &workload.pipelines[i];
        if consumer.deps.len() < 2 {
            continue;
        }
        let t = &est.per_pipeline;
        let Some(&anchor) = consumer
            .deps
            .iter()
            .max_by(|a, b| t[a].finish_s.total_cmp(&t[b].finish_s).then(b.cmp(a)))
        else {
            continue;
        };
        let (anchor_start, max_finish) = (t[&anchor].start_s, t[&anchor].finish_s);
        let group: Vec<PipelineId> = consumer
            .deps
            .iter()
            .copied()
            .filter(|s| *s != anchor && t[s].start_s < max_finish && anchor_start < t[s].finish_s)
            .collect();

        let mut trial: BTreeMap<PipelineId, u32> = dops.clone();
        let mut lowered = false;
        for s in group {
            if workload.get(s).is_some_and(|p| p.pinned_dop.is_some()) {
                continue;
            }
            let (start, finish) = (t[&s].start_s, t[&s].finish_s);
            if max_finish - finish <= BALANCED_WITHIN * (max_finish - start) {
                continue;
            }
            let current = dops[&s];
            for d in 1..current {
                if start + ev.time(s, d)? <= max_finish {
                    trial.insert(s, d);
                    lowered = true;
                    break;
                }
            }
        }
        if !lowered {
            continue;
        }
        let e = ev.eval(&trial)?;
        if e.latency_s <= est.latency_s && e.dollars <= est.dollars {
            dops = trial;
            est = e;
        }
    }
    Ok(DOPAssignment {
        dops,
        feasible: assignment.feasible,
        estimate: est,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{simulate_query, OpWork, PipelineWork};
    use crate::plan::{parse_plan, OperatorKind};

    fn two_builds() -> PlanDAG {
        parse_plan(
            "probe(build(scan(A, rows=1e9, id=a), id=ba),
                   probe(build(scan(B, rows=2e9, id=b), id=bb), scan(C, rows=1, id=c), out=1, id=p1),
                   out=1, id=p2)",
        )
        .unwrap()
    }

    fn assignment(plan: &PlanDAG, dops: &[(usize, u32)], hw: &HardwareProfile) -> DOPAssignment {
        let dops: BTreeMap<PipelineId, u32> = dops.iter().map(|&(i, d)| (PipelineId(i), d)).collect();
        let estimate = simulate_query(plan, &dops, hw).unwrap();
        DOPAssignment {
            dops,
            estimate,
            feasible: true,
        }
    }

    #[test]
    fn equalises_finish_times() {
        let hw = HardwareProfile::uniform_linear(3.6, 1e6);
        let plan = two_builds().with_pipelines();
        let ids: Vec<(PipelineId, Vec<String>)> =
            plan.pipelines().iter().map(|p| (p.id, p.operators.clone())).collect();
        let small = ids.iter().find(|(_, ops)| ops.contains(&"a".to_string())).unwrap().0;
        let big = ids.iter().find(|(_, ops)| ops.contains(&"b".to_string())).unwrap().0;
        let n = ids.len();
        let mut dops: Vec<(usize, u32)> = (0..n).map(|i| (i, 1)).collect();
        dops[small.0].1 = 4;
        dops[big.0].1 = 4;
        let before = assignment(&plan, &dops, &hw);
        let after = balance_siblings(&plan, &before, &hw).unwrap();
        assert_eq!(after.dops[&small], 2);
        assert_eq!(after.dops[&big], 4);
        let t = &after.estimate.per_pipeline;
        assert_eq!(t[&small].finish_s, 500.0);
        assert_eq!(t[&big].finish_s, 500.0);
        assert!(after.estimate.dollars <= before.estimate.dollars);
        assert_eq!(after.estimate.latency_s, before.estimate.latency_s);
    }

    #[test]
    fn single_child_and_balanced_groups_unchanged() {
        let hw = HardwareProfile::uniform_linear(3.6, 1e6);
        let plan = parse_plan("agg(scan(T, rows=1e9), out=1)").unwrap();
        let a = assignment(&plan, &[(0, 3)], &hw);
        assert_eq!(balance_siblings(&plan, &a, &hw).unwrap().dops, a.dops);

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
                    ops: op(1000.0),
                    deps: Default::default(),
                    pinned_dop: None,
                },
                PipelineWork {
                    id: PipelineId(1),
                    ops: op(1005.0),
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
        let hw = HardwareProfile::uniform_linear(3.6, 1.0);
        let dops = BTreeMap::from([(PipelineId(0), 2), (PipelineId(1), 2), (PipelineId(2), 1)]);
        let a = DOPAssignment {
            estimate: Evaluator { workload: &w, hw: &hw }.eval(&dops).unwrap(),
            dops: dops.clone(),
            feasible: true,
        };
        assert_eq!(balance_workload(&w, &a, &hw).unwrap().dops, dops);
    }
}
