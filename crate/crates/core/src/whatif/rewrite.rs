use std::collections::BTreeSet;

use crate::plan::{OperatorKind, OperatorNode, PlanDAG};

/// Same operator kinds, tables and keys, child by child. Row counts, widths
/// and ids are ignored.
fn same_shape(plan: &PlanDAG, id: &str, pattern: &PlanDAG, pid: &str) -> bool {
    let (a, b) = (plan.op(id), pattern.op(pid));
    a.kind == b.kind
        && a.table == b.table
        && a.keys == b.keys
        && a.children.len() == b.children.len()
        && a.children.iter().zip(&b.children).all(|(c, pc)| same_shape(plan, c, pattern, pc))
}

/// Topmost operator (in plan order) whose subtree matches `pattern` and is
/// not consumed from outside the match.
pub(super) fn find_match(plan: &PlanDAG, pattern: &PlanDAG) -> Option<(String, BTreeSet<String>)> {
    plan.operators().iter().find_map(|op| {
        if !same_shape(plan, &op.id, pattern, pattern.root()) {
            return None;
        }
        let inner = plan.subtree_ids(&op.id);
        let leaks = inner
            .iter()
            .filter(|&i| *i != op.id)
            .any(|i| plan.parents_of(i).iter().any(|p| !inner.contains(*p)));
        (!leaks).then(|| (op.id.clone(), inner))
    })
}

/// Collapses the matched subtree into one view scan that keeps the match
/// root's id, so consumers need no rewiring.
pub(super) fn substitute_view(
    plan: &PlanDAG,
    pattern: &PlanDAG,
    view: &str,
    view_rows: f64,
    row_bytes: f64,
) -> Option<PlanDAG> {
    let (root, inner) = find_match(plan, pattern)?;
    let ops: Vec<OperatorNode> = plan
        .operators()
        .iter()
        .filter(|o| o.id == root || !inner.contains(&o.id))
        .map(|o| {
            if o.id == root {
                OperatorNode {
                    id: o.id.clone(),
                    kind: OperatorKind::MVScan,
                    est_out_rows: view_rows,
                    row_bytes,
                    children: Vec::new(),
                    table: Some(view.to_string()),
                    keys: Vec::new(),
                }
            } else {
                o.clone()
            }
        })
        .collect();
    PlanDAG::new(ops, plan.root()).ok()
}

/// Scans of `table` whose own keys, or a filter directly above them, use
/// `table.attribute`.
fn reclustered_scans(plan: &PlanDAG, table: &str, attribute: &str) -> Vec<String> {
    let key = format!("{table}.{attribute}");
    plan.operators()
        .iter()
        .filter(|o| o.kind == OperatorKind::TableScan && o.table.as_deref() == Some(table))
        .filter(|o| {
            if o.keys.contains(&key) {
                return true;
            }
            let mut cur = o.id.as_str();
            loop {
                let parents = plan.parents_of(cur);
                let [p] = parents.as_slice() else { return false };
                let p = plan.op(p);
                match p.kind {
                    OperatorKind::Filter if p.keys.contains(&key) => return true,
                    OperatorKind::Filter | OperatorKind::Project => cur = &p.id,
                    _ => return false,
                }
            }
        })
        .map(|o| o.id.clone())
        .collect()
}

pub(super) fn scale_scans(plan: &PlanDAG, table: &str, attribute: &str, fraction: f64) -> Option<PlanDAG> {
    let hits = reclustered_scans(plan, table, attribute);
    if hits.is_empty() {
        return None;
    }
    let ops = plan
        .operators()
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if hits.contains(&o.id) {
                o.est_out_rows *= fraction;
            }
            o
        })
        .collect();
    PlanDAG::new(ops, plan.root()).ok()
}
