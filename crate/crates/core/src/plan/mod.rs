//! Distributed plan representation.
//!
//! A [`PlanDAG`] is an operator DAG with a single root (the query sink).
//! Cardinalities are inputs: every operator carries its own estimated
//! output row count, and nothing in this crate re-derives them.
//!
//! Plans are partitioned into [`Pipeline`]s at blocking operators. A pipeline
//! is the unit of scheduling and of degree-of-parallelism assignment.

mod dsl;
pub(crate) mod pipeline;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dsl::{parse_plan, parse_shorthand, PlanDocument, PlanSource};
pub use pipeline::{extract_pipelines, per_operator_rows, BreakerKind, Pipeline, PipelineId};

/// Physical operator kinds understood by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    TableScan,
    Filter,
    Project,
    HashBuild,
    HashProbe,
    Aggregate,
    Sort,
    Exchange,
    Union,
    MVScan,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 10] = [
        OperatorKind::TableScan,
        OperatorKind::Filter,
        OperatorKind::Project,
        OperatorKind::HashBuild,
        OperatorKind::HashProbe,
        OperatorKind::Aggregate,
        OperatorKind::Sort,
        OperatorKind::Exchange,
        OperatorKind::Union,
        OperatorKind::MVScan,
    ];

    /// Operators that must consume all of their input before emitting output.
    pub fn is_breaker(self) -> bool {
        matches!(
            self,
            OperatorKind::HashBuild
                | OperatorKind::Aggregate
                | OperatorKind::Sort
                | OperatorKind::Exchange
        )
    }

    pub fn is_leaf(self) -> bool {
        matches!(self, OperatorKind::TableScan | OperatorKind::MVScan)
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            OperatorKind::TableScan | OperatorKind::MVScan => n == 0,
            OperatorKind::HashProbe => n == 2,
            OperatorKind::Union => n >= 2,
            _ => n == 1,
        }
    }

    fn arity_label(self) -> &'static str {
        match self {
            OperatorKind::TableScan | OperatorKind::MVScan => "0",
            OperatorKind::HashProbe => "2",
            OperatorKind::Union => ">= 2",
            _ => "1",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One operator of a physical plan.
///
/// `table` names the base table of a scan (or the view of an `MVScan`);
/// `keys` lists the `table.attribute` references the operator uses: join
/// keys for a probe (as consecutive pairs), predicate attributes for a
/// filter, grouping keys for an aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    pub kind: OperatorKind,
    pub est_out_rows: f64,
    pub row_bytes: f64,
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate operator id `{0}`")]
    DuplicateId(String),
    #[error("operator `{node}` lists unknown child `{child}`")]
    DanglingChild { node: String, child: String },
    #[error("cycle detected through operator `{0}`")]
    Cycle(String),
    #[error("operator `{node}` ({kind}) has {found} children, expected {expected}")]
    Arity {
        node: String,
        kind: OperatorKind,
        expected: &'static str,
        found: usize,
    },
    #[error("operator `{0}` has a negative or non-finite cardinality")]
    BadCardinality(String),
    #[error("operator `{0}` has a non-positive or non-finite row width")]
    BadRowWidth(String),
    #[error("root `{0}` is not a known operator")]
    UnknownRoot(String),
    #[error("root `{0}` is consumed by another operator")]
    RootHasParent(String),
    #[error("operator `{0}` is not reachable from the root")]
    Unreachable(String),
    #[error("streaming operator `{0}` has more than one consumer")]
    SharedStream(String),
    #[error("hash probe `{0}` must have a HashBuild as its first (build-side) child")]
    BuildSide(String),
}

/// A validated operator DAG, optionally with its pipeline decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanDAG {
    operators: Vec<OperatorNode>,
    index: HashMap<String, usize>,
    root: String,
    pipelines: Vec<Pipeline>,
}

impl PlanDAG {
    /// Builds and validates a plan. Operators keep their given order.
    pub fn new(operators: Vec<OperatorNode>, root: impl Into<String>) -> Result<Self, PlanError> {
        let root = root.into();
        let mut index = HashMap::with_capacity(operators.len());
        for (i, op) in operators.iter().enumerate() {
            if index.insert(op.id.clone(), i).is_some() {
                return Err(PlanError::DuplicateId(op.id.clone()));
            }
        }
        let plan = PlanDAG {
            operators,
            index,
            root,
            pipelines: Vec::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<(), PlanError> {
        for op in &self.operators {
            if !op.est_out_rows.is_finite() || op.est_out_rows < 0.0 {
                return Err(PlanError::BadCardinality(op.id.clone()));
            }
            if !op.row_bytes.is_finite() || op.row_bytes <= 0.0 {
                return Err(PlanError::BadRowWidth(op.id.clone()));
            }
            for child in &op.children {
                if !self.index.contains_key(child) {
                    return Err(PlanError::DanglingChild {
                        node: op.id.clone(),
                        child: child.clone(),
                    });
                }
            }
        }
        self.check_acyclic()?;
        for op in &self.operators {
            if !op.kind.arity_ok(op.children.len()) {
                return Err(PlanError::Arity {
                    node: op.id.clone(),
                    kind: op.kind,
                    expected: op.kind.arity_label(),
                    found: op.children.len(),
                });
            }
            if op.kind == OperatorKind::HashProbe
                && self.op(&op.children[0]).kind != OperatorKind::HashBuild
            {
                return Err(PlanError::BuildSide(op.id.clone()));
            }
        }
        if !self.index.contains_key(&self.root) {
            return Err(PlanError::UnknownRoot(self.root.clone()));
        }

        let mut parents = vec![0usize; self.operators.len()];
        for op in &self.operators {
            for child in &op.children {
                parents[self.index[child]] += 1;
            }
        }
        if parents[self.index[&self.root]] > 0 {
            return Err(PlanError::RootHasParent(self.root.clone()));
        }
        for (op, &n) in self.operators.iter().zip(&parents) {
            if n > 1 && !op.kind.is_breaker() {
                return Err(PlanError::SharedStream(op.id.clone()));
            }
        }
        let mut seen = vec![false; self.operators.len()];
        let mut stack = vec![self.index[&self.root]];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            for child in &self.operators[i].children {
                stack.push(self.index[child]);
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PlanError::Unreachable(self.operators[i].id.clone()));
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), PlanError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.operators.len()];
        for start in 0..self.operators.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let children = &self.operators[node].children;
                if *next < children.len() {
                    let child = self.index[&children[*next]];
                    *next += 1;
                    match state[child] {
                        0 => {
                            state[child] = 1;
                            stack.push((child, 0));
                        }
                        1 => return Err(PlanError::Cycle(self.operators[child].id.clone())),
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    pub fn operators(&self) -> &[OperatorNode] {
        &self.operators
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn root_op(&self) -> &OperatorNode {
        self.op(&self.root)
    }

    pub fn get(&self, id: &str) -> Option<&OperatorNode> {
        self.index.get(id).map(|&i| &self.operators[i])
    }

    /// Looks up an operator known to exist in this plan.
    ///
    /// Panics on an unknown id.
    pub fn op(&self, id: &str) -> &OperatorNode {
        &self.operators[self.index[id]]
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Pipelines populated by [`extract_pipelines`]; empty before that.
    pub fn pipelines(&self) -> &[Pipeline] {
        &self.pipelines
    }

    pub fn pipeline(&self, id: PipelineId) -> Option<&Pipeline> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    /// Returns a copy with pipelines extracted, reusing them if present.
    pub fn with_pipelines(&self) -> PlanDAG {
        if self.pipelines.is_empty() {
            extract_pipelines(self.clone())
        } else {
            self.clone()
        }
    }

    /// Ids of operators that consume `id`.
    pub fn parents_of(&self, id: &str) -> Vec<&str> {
        self.operators
            .iter()
            .filter(|op| op.children.iter().any(|c| c == id))
            .map(|op| op.id.as_str())
            .collect()
    }

    /// All operator ids in the subtree rooted at `id`, including `id`.
    pub fn subtree_ids(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            if out.insert(cur.to_string()) {
                stack.extend(self.op(cur).children.iter().map(String::as_str));
            }
        }
        out
    }

    /// Replaces estimated cardinalities, e.g. with observed values.
    /// Unknown ids are ignored; pipelines are re-extracted.
    pub fn with_cardinalities(&self, rows: &HashMap<String, f64>) -> Result<PlanDAG, PlanError> {
        let mut ops = self.operators.clone();
        for op in &mut ops {
            if let Some(&r) = rows.get(&op.id) {
                op.est_out_rows = r;
            }
        }
        let plan = PlanDAG::new(ops, self.root.clone())?;
        Ok(if self.pipelines.is_empty() {
            plan
        } else {
            extract_pipelines(plan)
        })
    }

    pub fn to_document(&self) -> PlanDocument {
        PlanDocument {
            operators: self.operators.clone(),
            root: self.root.clone(),
        }
    }

    /// Canonical JSON form; parsing it back yields an identical plan.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("plan documents always serialize")
    }

    pub(crate) fn set_pipelines(&mut self, pipelines: Vec<Pipeline>) {
        self.pipelines = pipelines;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, kind: OperatorKind, rows: f64, children: &[&str]) -> OperatorNode {
        OperatorNode {
            id: id.into(),
            kind,
            est_out_rows: rows,
            row_bytes: 100.0,
            children: children.iter().map(|c| c.to_string()).collect(),
            table: None,
            keys: vec![],
        }
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let err = PlanDAG::new(vec![node("f", OperatorKind::Filter, 1.0, &["f"])], "f").unwrap_err();
        assert_eq!(err, PlanError::Cycle("f".into()));
    }

    #[test]
    fn longer_cycle_names_a_member() {
        let ops = vec![
            node("a", OperatorKind::Filter, 1.0, &["b"]),
            node("b", OperatorKind::Filter, 1.0, &["a"]),
        ];
        match PlanDAG::new(ops, "a").unwrap_err() {
            PlanError::Cycle(n) => assert!(n == "a" || n == "b"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn arity_and_dangling_errors_name_the_node() {
        let err = PlanDAG::new(vec![node("p", OperatorKind::Project, 1.0, &[])], "p").unwrap_err();
        assert!(matches!(err, PlanError::Arity { ref node, .. } if node == "p"));

        let err = PlanDAG::new(vec![node("p", OperatorKind::Project, 1.0, &["zz"])], "p").unwrap_err();
        assert_eq!(
            err,
            PlanError::DanglingChild {
                node: "p".into(),
                child: "zz".into()
            }
        );
    }

    #[test]
    fn negative_cardinality_rejected() {
        let err = PlanDAG::new(vec![node("s", OperatorKind::TableScan, -1.0, &[])], "s").unwrap_err();
        assert_eq!(err, PlanError::BadCardinality("s".into()));
        let err = PlanDAG::new(vec![node("s", OperatorKind::TableScan, f64::NAN, &[])], "s").unwrap_err();
        assert_eq!(err, PlanError::BadCardinality("s".into()));
    }

    #[test]
    fn unreachable_and_shared_streams_rejected() {
        let ops = vec![
            node("s", OperatorKind::TableScan, 1.0, &[]),
            node("t", OperatorKind::TableScan, 1.0, &[]),
        ];
        assert_eq!(PlanDAG::new(ops, "s").unwrap_err(), PlanError::Unreachable("t".into()));

        let ops = vec![
            node("s", OperatorKind::TableScan, 1.0, &[]),
            node("f1", OperatorKind::Filter, 1.0, &["s"]),
            node("f2", OperatorKind::Filter, 1.0, &["s"]),
            node("u", OperatorKind::Union, 2.0, &["f1", "f2"]),
        ];
        assert_eq!(PlanDAG::new(ops, "u").unwrap_err(), PlanError::SharedStream("s".into()));
    }

    #[test]
    fn probe_requires_build_child() {
        let ops = vec![
            node("a", OperatorKind::TableScan, 1.0, &[]),
            node("b", OperatorKind::TableScan, 1.0, &[]),
            node("p", OperatorKind::HashProbe, 1.0, &["a", "b"]),
        ];
        assert_eq!(PlanDAG::new(ops, "p").unwrap_err(), PlanError::BuildSide("p".into()));
    }
}
