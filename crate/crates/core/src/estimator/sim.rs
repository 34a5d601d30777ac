//! Query-level simulation over pipeline workloads.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ops_time, EstimateError, HardwareProfile};
use crate::plan::pipeline::{rows_with, source_input_rows};
use crate::plan::{OperatorKind, PipelineId, PlanDAG};

/// Rows one operator processes inside a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpWork {
    pub id: String,
    pub kind: OperatorKind,
    pub rows: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineWork {
    pub id: PipelineId,
    pub ops: Vec<OpWork>,
    pub deps: BTreeSet<PipelineId>,
    /// A pipeline whose DOP the planner must not change.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_dop: Option<u32>,
}

impl PipelineWork {
    pub fn input_rows(&self) -> f64 {
        self.ops.first().map_or(0.0, |o| o.rows)
    }

    pub fn time(&self, dop: u32, hw: &HardwareProfile) -> Result<f64, EstimateError> {
        ops_time(&self.ops, dop, hw)
    }
}

/// The cost-relevant view of a plan: pipelines with per-operator row counts
/// and dependencies. The planner and the execution simulator work on this
/// rather than on the operator DAG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub pipelines: Vec<PipelineWork>,
}

impl Workload {
    /// Workload under the plan's estimated cardinalities.
    pub fn from_plan(plan: &PlanDAG) -> Workload {
        Self::from_plan_rows(plan, |id| plan.op(id).est_out_rows)
    }

    /// Workload under arbitrary per-operator output cardinalities.
    pub fn from_plan_rows(plan: &PlanDAG, rows: impl Fn(&str) -> f64) -> Workload {
        let plan = plan.with_pipelines();
        let pipelines = plan
            .pipelines()
            .iter()
            .map(|p| {
                let input = source_input_rows(&plan, p.source(), &rows);
                let rows_of = |id: &str| rows(id);
                PipelineWork {
                    id: p.id,
                    ops: rows_with(p, input, rows_of)
                        .into_iter()
                        .map(|(id, rows)| OpWork {
                            kind: plan.op(&id).kind,
                            id,
                            rows,
                        })
                        .collect(),
                    deps: p.deps.clone(),
                    pinned_dop: None,
                }
            })
            .collect();
        Workload { pipelines }
    }

    pub fn get(&self, id: PipelineId) -> Option<&PipelineWork> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> Vec<PipelineId> {
        self.pipelines.iter().map(|p| p.id).collect()
    }

    /// Indices into `pipelines` in dependency order; ties by pipeline id.
    pub fn topo_order(&self) -> Result<Vec<usize>, EstimateError> {
        let pos: BTreeMap<PipelineId, usize> =
            self.pipelines.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let mut indegree = vec![0usize; self.pipelines.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); self.pipelines.len()];
        for (i, p) in self.pipelines.iter().enumerate() {
            for d in &p.deps {
                let &j = pos.get(d).ok_or(EstimateError::UnknownDep(p.id))?;
                indegree[i] += 1;
                dependents[j].push(i);
            }
        }
        let mut ready: BTreeSet<(PipelineId, usize)> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(i, _)| (self.pipelines[i].id, i))
            .collect();
        let mut order = Vec::with_capacity(self.pipelines.len());
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(i);
            for &j in &dependents[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert((self.pipelines[j].id, j));
                }
            }
        }
        if order.len() != self.pipelines.len() {
            return Err(EstimateError::CyclicDeps);
        }
        Ok(order)
    }
}

/// When a pipeline's nodes are acquired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AllocationPolicy {
    /// At the statically predicted start time.
    #[default]
    Predicted,
    /// Every pipeline at time zero; waiting pipelines accrue blocked time.
    Eager,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineTiming {
    pub alloc_s: f64,
    pub start_s: f64,
    pub finish_s: f64,
    pub dop: u32,
    pub node_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEstimate {
    pub latency_s: f64,
    pub machine_time_s: f64,
    pub blocked_s: f64,
    pub dollars: f64,
    pub per_pipeline: BTreeMap<PipelineId, PipelineTiming>,
}

impl SimEstimate {
    /// Pipelines with zero slack, found by walking back from the last finisher.
    pub fn critical_path(&self, workload: &Workload) -> BTreeSet<PipelineId> {
        let mut critical = BTreeSet::new();
        let mut stack: Vec<PipelineId> = self
            .per_pipeline
            .iter()
            .filter(|(_, t)| t.finish_s == self.latency_s)
            .map(|(&id, _)| id)
            .collect();
        while let Some(id) = stack.pop() {
            if !critical.insert(id) {
                continue;
            }
            let start = self.per_pipeline[&id].start_s;
            if let Some(p) = workload.get(id) {
                for d in &p.deps {
                    if self.per_pipeline[d].finish_s == start {
                        stack.push(*d);
                    }
                }
            }
        }
        critical
    }
}

pub fn simulate_query(
    plan: &PlanDAG,
    dops: &BTreeMap<PipelineId, u32>,
    hw: &HardwareProfile,
) -> Result<SimEstimate, EstimateError> {
    simulate_workload(&Workload::from_plan(plan), dops, hw, AllocationPolicy::Predicted)
}

pub fn simulate_query_with(
    plan: &PlanDAG,
    dops: &BTreeMap<PipelineId, u32>,
    hw: &HardwareProfile,
    policy: AllocationPolicy,
) -> Result<SimEstimate, EstimateError> {
    simulate_workload(&Workload::from_plan(plan), dops, hw, policy)
}

/// Evaluates pipelines in dependency order. A pipeline starts when its last
/// dependency finishes and is charged from allocation to finish.
pub fn simulate_workload(
    workload: &Workload,
    dops: &BTreeMap<PipelineId, u32>,
    hw: &HardwareProfile,
    policy: AllocationPolicy,
) -> Result<SimEstimate, EstimateError> {
    let order = workload.topo_order()?;
    let mut per_pipeline = BTreeMap::new();
    let mut latency: f64 = 0.0;
    let mut machine = 0.0;
    let mut blocked = 0.0;
    for i in order {
        let p = &workload.pipelines[i];
        let dop = p
            .pinned_dop
            .or_else(|| dops.get(&p.id).copied())
            .ok_or(EstimateError::Unassigned(p.id))?;
        let start = p
            .deps
            .iter()
            .map(|d| per_pipeline.get(d).map_or(0.0, |t: &PipelineTiming| t.finish_s))
            .fold(0.0, f64::max);
        let alloc = match policy {
            AllocationPolicy::Predicted => start,
            AllocationPolicy::Eager => 0.0,
        };
        let finish = start + p.time(dop, hw)?;
        let d = dop as f64;
        let node_seconds = d * (finish - alloc);
        machine += node_seconds;
        blocked += d * (start - alloc);
        latency = latency.max(finish);
        per_pipeline.insert(
            p.id,
            PipelineTiming {
                alloc_s: alloc,
                start_s: start,
                finish_s: finish,
                dop,
                node_seconds,
            },
        );
    }
    Ok(SimEstimate {
        latency_s: latency,
        machine_time_s: machine,
        blocked_s: blocked,
        dollars: hw.dollars(machine),
        per_pipeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::ScalabilityModel;
    use crate::plan::parse_plan;

    fn work(id: usize, rows: f64, deps: &[usize]) -> PipelineWork {
        PipelineWork {
            id: PipelineId(id),
            ops: vec![OpWork {
                id: format!("op{id}"),
                kind: OperatorKind::TableScan,
                rows,
            }],
            deps: deps.iter().map(|&d| PipelineId(d)).collect(),
            pinned_dop: None,
        }
    }

    fn ones(w: &Workload) -> BTreeMap<PipelineId, u32> {
        w.ids().into_iter().map(|id| (id, 1)).collect()
    }

    #[test]
    fn one_node_second_at_three_sixty_per_hour() {
        let plan = parse_plan("scan(T, rows=1e6)").unwrap();
        let hw = HardwareProfile::uniform_linear(3.6, 1e6);
        let est = simulate_query(&plan, &BTreeMap::from([(PipelineId(0), 1)]), &hw).unwrap();
        assert_eq!(est.latency_s, 1.0);
        assert!((est.dollars - 0.001).abs() < 1e-15);
        assert_eq!(est.blocked_s, 0.0);
    }

    #[test]
    fn parallel_builds_feeding_a_probe() {
        let hw = HardwareProfile::new(3.6, vec![ScalabilityModel::linear(OperatorKind::TableScan, 1.0)]);
        let w = Workload {
            pipelines: vec![work(0, 2.0, &[]), work(1, 5.0, &[]), work(2, 1.0, &[0, 1])],
        };
        let est = simulate_workload(&w, &ones(&w), &hw, AllocationPolicy::Predicted).unwrap();
        assert_eq!(est.latency_s, 6.0);
        assert_eq!(est.per_pipeline[&PipelineId(2)].alloc_s, 5.0);
        assert_eq!(est.blocked_s, 0.0);
        assert_eq!(est.machine_time_s, 8.0);

        let eager = simulate_workload(&w, &ones(&w), &hw, AllocationPolicy::Eager).unwrap();
        assert_eq!(eager.latency_s, 6.0);
        // build 0 waits for nothing; the probe idles 5 s, build 1 none.
        assert_eq!(eager.blocked_s, 5.0);
        assert_eq!(eager.machine_time_s, 2.0 + 5.0 + 6.0);
    }

    #[test]
    fn unassigned_and_cyclic_rejected() {
        let hw = HardwareProfile::uniform_linear(1.0, 1.0);
        let w = Workload {
            pipelines: vec![work(0, 1.0, &[])],
        };
        assert_eq!(
            simulate_workload(&w, &BTreeMap::new(), &hw, AllocationPolicy::Predicted),
            Err(EstimateError::Unassigned(PipelineId(0)))
        );
        let w = Workload {
            pipelines: vec![work(0, 1.0, &[1]), work(1, 1.0, &[0])],
        };
        assert_eq!(
            simulate_workload(&w, &ones(&w), &hw, AllocationPolicy::Predicted),
            Err(EstimateError::CyclicDeps)
        );
    }

    #[test]
    fn critical_path_follows_the_slow_branch() {
        let hw = HardwareProfile::uniform_linear(1.0, 1.0);
        let w = Workload {
            pipelines: vec![work(0, 2.0, &[]), work(1, 5.0, &[]), work(2, 1.0, &[0, 1])],
        };
        let est = simulate_workload(&w, &ones(&w), &hw, AllocationPolicy::Predicted).unwrap();
        assert_eq!(est.critical_path(&w), BTreeSet::from([PipelineId(1), PipelineId(2)]));
    }
}
