use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{OperatorKind, PlanDAG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PipelineId(pub usize);

impl fmt::Display for PipelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// What terminates a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakerKind {
    HashBuild,
    Aggregate,
    Sort,
    Exchange,
    /// The query root.
    Sink,
    /// A non-blocking chain feeding a `Union`; the union starts a new pipeline.
    UnionInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub id: PipelineId,
    /// Operator ids from source to terminal operator.
    pub operators: Vec<String>,
    pub breaker_kind: BreakerKind,
    pub deps: BTreeSet<PipelineId>,
    pub input_rows_est: f64,
}

impl Pipeline {
    pub fn source(&self) -> &str {
        &self.operators[0]
    }

    pub fn terminal(&self) -> &str {
        self.operators.last().expect("pipelines are never empty")
    }
}

/// True when the edge `parent -> child` blocks: the parent cannot see any
/// row before the child has finished.
fn blocked_edge(parent: OperatorKind, child: OperatorKind) -> bool {
    child.is_breaker() || parent == OperatorKind::Union
}

/// Partitions the plan into maximal non-blocking chains.
///
/// Pipeline ids follow a post-order walk from the root, so every dependency
/// has a smaller id than its dependents and the sink pipeline has the largest.
pub fn extract_pipelines(mut plan: PlanDAG) -> PlanDAG {
    let pipelines = compute(&plan);
    plan.set_pipelines(pipelines);
    plan
}

fn compute(plan: &PlanDAG) -> Vec<Pipeline> {
    // Post-order over terminals.
    let mut order: Vec<&str> = Vec::new();
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    let mut stack: Vec<(&str, bool)> = vec![(plan.root(), false)];
    while let Some((id, expanded)) = stack.pop() {
        if expanded {
            order.push(id);
            continue;
        }
        if !visited.insert(id) {
            continue;
        }
        stack.push((id, true));
        for child in plan.op(id).children.iter().rev() {
            stack.push((child.as_str(), false));
        }
    }

    let mut terminal_kind: HashMap<&str, BreakerKind> = HashMap::new();
    terminal_kind.insert(plan.root(), BreakerKind::Sink);
    for op in plan.operators() {
        for child in &op.children {
            let c = plan.op(child);
            if blocked_edge(op.kind, c.kind) && child != plan.root() {
                let kind = match c.kind {
                    OperatorKind::HashBuild => BreakerKind::HashBuild,
                    OperatorKind::Aggregate => BreakerKind::Aggregate,
                    OperatorKind::Sort => BreakerKind::Sort,
                    OperatorKind::Exchange => BreakerKind::Exchange,
                    _ => BreakerKind::UnionInput,
                };
                terminal_kind.insert(child.as_str(), kind);
            }
        }
    }

    let mut pipeline_of: HashMap<&str, PipelineId> = HashMap::new();
    let mut pipelines = Vec::new();
    for id in order {
        let Some(&breaker_kind) = terminal_kind.get(id) else {
            continue;
        };
        let pid = PipelineId(pipelines.len());
        // Walk down the streaming spine.
        let mut chain = vec![id];
        let mut cur = plan.op(id);
        while let Some(next) = streaming_child(plan, cur.kind, &cur.children) {
            chain.push(next);
            cur = plan.op(next);
        }
        chain.reverse();

        let mut deps = BTreeSet::new();
        for &member in &chain {
            let op = plan.op(member);
            for child in &op.children {
                if blocked_edge(op.kind, plan.op(child).kind) {
                    deps.insert(pipeline_of[child.as_str()]);
                }
            }
        }
        for &member in &chain {
            pipeline_of.insert(member, pid);
        }
        let input_rows_est = source_input_rows(plan, chain[0], |c| plan.op(c).est_out_rows);
        pipelines.push(Pipeline {
            id: pid,
            operators: chain.iter().map(|s| s.to_string()).collect(),
            breaker_kind,
            deps,
            input_rows_est,
        });
    }
    pipelines
}

fn streaming_child<'a>(plan: &PlanDAG, kind: OperatorKind, children: &'a [String]) -> Option<&'a str> {
    if kind == OperatorKind::Union {
        return None;
    }
    let candidate = match kind {
        OperatorKind::HashProbe => children.get(1),
        _ => children.first(),
    }?;
    (!blocked_edge(kind, plan.op(candidate).kind)).then_some(candidate.as_str())
}

/// Rows entering a pipeline whose source operator is `source`, using `rows`
/// to read cardinalities (estimated or true).
pub(crate) fn source_input_rows(plan: &PlanDAG, source: &str, rows: impl Fn(&str) -> f64) -> f64 {
    let op = plan.op(source);
    match op.kind {
        OperatorKind::TableScan | OperatorKind::MVScan => rows(&op.id),
        OperatorKind::HashProbe => rows(&op.children[1]),
        _ => op.children.iter().map(|c| rows(c)).sum(),
    }
}

/// Rows processed by each operator of `pipeline`: the source sees the
/// pipeline input, every other operator sees its upstream neighbour's output.
pub fn per_operator_rows(plan: &PlanDAG, pipeline: &Pipeline) -> Vec<(String, f64)> {
    rows_with(pipeline, pipeline.input_rows_est, |id| plan.op(id).est_out_rows)
}

pub(crate) fn rows_with(
    pipeline: &Pipeline,
    input: f64,
    rows: impl Fn(&str) -> f64,
) -> Vec<(String, f64)> {
    let mut out = Vec::with_capacity(pipeline.operators.len());
    let mut upstream = input;
    for id in &pipeline.operators {
        out.push((id.clone(), upstream));
        upstream = rows(id);
    }
    out
}
