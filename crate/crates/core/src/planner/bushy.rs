//! Bushy rewrites of left-deep join trees.
//!
//! A left-deep spine `P1 .. Pn` (bottom-up) has probes `Pi = probe(build(Xi), below)`.
//! Detaching the adjacent pair `(i, i+1)` turns
//!
//! ```text
//! P(i+1)( build(X(i+1)), Pi( build(Xi), below ) )
//! ```
//!
//! into
//!
//! ```text
//! Pi'( build( J( build(Xi), X(i+1) ) ), below )
//! ```
//!
//! so the `Xi ⋈ X(i+1)` subtree can run concurrently with the other build
//! sides. The output of `J` is estimated from the selectivity implied by the
//! original estimates; the rewrite is admitted only when that join is
//! non-expanding.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::plan::{OperatorKind, OperatorNode, PlanDAG, PlanError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BushyError {
    #[error("plan is not a left-deep join tree: {0}")]
    NotLeftDeep(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

struct Link {
    probe: String,
    build: String,
    /// Top of the build-side scan chain.
    input: String,
    table: String,
}

/// Bottom-up probes of the left-deep spine. Empty for join-free plans.
fn spine(plan: &PlanDAG) -> Result<Vec<Link>, BushyError> {
    let mut cur = plan.root_op();
    while cur.kind != OperatorKind::HashProbe {
        match cur.kind {
            OperatorKind::Filter | OperatorKind::Project | OperatorKind::Aggregate | OperatorKind::Sort
            | OperatorKind::Exchange => cur = plan.op(&cur.children[0]),
            OperatorKind::TableScan | OperatorKind::MVScan => return Ok(Vec::new()),
            k => return Err(BushyError::NotLeftDeep(format!("{k} {} above the join spine", cur.id))),
        }
    }
    let mut links = Vec::new();
    loop {
        let build = plan.op(&cur.children[0]);
        let input = plan.op(&build.children[0]);
        let Some(table) = scan_chain_table(plan, input) else {
            return Err(BushyError::NotLeftDeep(format!("build side of {} is not a scan", cur.id)));
        };
        links.push(Link {
            probe: cur.id.clone(),
            build: build.id.clone(),
            input: input.id.clone(),
            table,
        });
        let next = plan.op(&cur.children[1]);
        if next.kind == OperatorKind::HashProbe {
            cur = next;
        } else if scan_chain_table(plan, next).is_some() {
            break;
        } else {
            return Err(BushyError::NotLeftDeep(format!("probe side of {} is neither a join nor a scan", cur.id)));
        }
    }
    links.reverse();
    Ok(links)
}

/// The base table under a chain of filters and projections over a scan.
fn scan_chain_table<'a>(plan: &'a PlanDAG, mut op: &'a OperatorNode) -> Option<String> {
    loop {
        match op.kind {
            OperatorKind::TableScan | OperatorKind::MVScan => {
                return Some(op.table.clone().unwrap_or_else(|| op.id.clone()))
            }
            OperatorKind::Filter | OperatorKind::Project => op = plan.op(&op.children[0]),
            _ => return None,
        }
    }
}

fn key_table(key: &str) -> Option<&str> {
    key.split_once('.').map(|(t, _)| t)
}

struct Pair {
    lower: usize,
    est_join: f64,
}

fn admissible(plan: &PlanDAG, links: &[Link], i: usize) -> Option<Pair> {
    let (lo, hi) = (&links[i], &links[i + 1]);
    let p_lo = plan.op(&lo.probe);
    let p_hi = plan.op(&hi.probe);
    if p_hi.children[1] != p_lo.id {
        return None;
    }
    if !p_hi.keys.is_empty() && !p_hi.keys.iter().any(|k| key_table(k) == Some(lo.table.as_str())) {
        return None;
    }
    let rows_lo = plan.op(&lo.input).est_out_rows;
    let rows_hi = plan.op(&hi.input).est_out_rows;
    if !(p_lo.est_out_rows > 0.0) || !(rows_hi > 0.0) {
        return None;
    }
    let selectivity = p_hi.est_out_rows / (p_lo.est_out_rows * rows_hi);
    let est_join = rows_lo * rows_hi * selectivity;
    (est_join <= rows_lo.max(rows_hi)).then_some(Pair { lower: i, est_join })
}

fn fresh_id(taken: &BTreeSet<String>, base: String) -> String {
    if !taken.contains(&base) {
        return base;
    }
    (2..).map(|n| format!("{base}{n}")).find(|c| !taken.contains(c)).expect("unbounded")
}

fn detach(ops: &mut Vec<OperatorNode>, original: &PlanDAG, links: &[Link], pair: &Pair) {
    let (lo, hi) = (&links[pair.lower], &links[pair.lower + 1]);
    let taken: BTreeSet<String> = ops.iter().map(|o| o.id.clone()).collect();
    let j_id = fresh_id(&taken, format!("{}_j", hi.probe));
    let mut taken = taken;
    taken.insert(j_id.clone());
    let bj_id = fresh_id(&taken, format!("{}_bj", hi.probe));

    let p_hi = original.op(&hi.probe);
    let bytes = original.op(&lo.input).row_bytes + original.op(&hi.input).row_bytes;
    let join = OperatorNode {
        id: j_id.clone(),
        kind: OperatorKind::HashProbe,
        est_out_rows: pair.est_join,
        row_bytes: bytes,
        children: vec![lo.build.clone(), hi.input.clone()],
        table: None,
        keys: p_hi.keys.clone(),
    };
    let build = OperatorNode {
        id: bj_id.clone(),
        kind: OperatorKind::HashBuild,
        est_out_rows: pair.est_join,
        row_bytes: bytes,
        children: vec![j_id],
        table: None,
        keys: Vec::new(),
    };

    ops.retain(|o| o.id != hi.probe && o.id != hi.build);
    for o in ops.iter_mut() {
        if o.id == lo.probe {
            o.children[0] = bj_id.clone();
            o.est_out_rows = p_hi.est_out_rows;
            o.row_bytes = p_hi.row_bytes;
        }
        for c in o.children.iter_mut() {
            if *c == hi.probe {
                *c = lo.probe.clone();
            }
        }
    }
    ops.push(join);
    ops.push(build);
}

/// Progressively bushier variants of a left-deep join plan. Variant `k`
/// detaches the first `k` admissible adjacent pairs of the spine, counted
/// bottom-up; variant 0 is the input plan. At most `k_max + 1` plans.
pub fn bushy_variants(plan: &PlanDAG, k_max: usize) -> Result<Vec<PlanDAG>, BushyError> {
    let links = spine(plan)?;
    let mut pairs = Vec::new();
    let mut i = 0;
    while i + 1 < links.len() && pairs.len() < k_max {
        match admissible(plan, &links, i) {
            Some(p) => {
                pairs.push(p);
                i += 2;
            }
            None => i += 1,
        }
    }

    let mut variants = vec![plan.with_pipelines()];
    let mut ops = plan.operators().to_vec();
    let mut root = plan.root().to_string();
    for pair in &pairs {
        detach(&mut ops, plan, &links, pair);
        if root == links[pair.lower + 1].probe {
            root = links[pair.lower].probe.clone();
        }
        variants.push(PlanDAG::new(ops.clone(), root.clone())?.with_pipelines());
    }
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::parse_plan;

    /// probe chain over D with build sides A, B, C (bottom-up).
    fn four_table(ab_out: f64) -> PlanDAG {
        parse_plan(&format!(
            "agg(
               probe(build(scan(C, rows=1e3, id=c), id=bc),
                 probe(build(scan(B, rows=1e4, id=b), id=bb),
                   probe(build(scan(A, rows=1e5, id=a), id=ba), scan(D, rows=1e7, id=d), out=1e6, id=p1),
                   out={ab_out}, id=p2),
                 out=1e5, id=p3),
               out=10, id=top)"
        ))
        .unwrap()
    }

    #[test]
    fn two_table_join_has_nothing_to_detach() {
        let plan = parse_plan("probe(build(scan(A, rows=10)), scan(B, rows=100), out=50)").unwrap();
        assert_eq!(bushy_variants(&plan, 3).unwrap().len(), 1);
    }

    #[test]
    fn non_expanding_pair_is_detached() {
        // sel = 1e5 / (1e6 * 1e4) = 1e-5; est(A ⋈ B) = 1e5 * 1e4 * 1e-5 = 1e4.
        let plan = four_table(1e5);
        let vs = bushy_variants(&plan, 3).unwrap();
        assert_eq!(vs.len(), 2);
        let v1 = &vs[1];
        assert!(v1.get("p2").is_none());
        let j = v1.get("p2_j").unwrap();
        assert_eq!(j.children, vec!["ba".to_string(), "b".to_string()]);
        assert!((j.est_out_rows - 1e4).abs() < 1e-6);
        assert_eq!(v1.op("p1").children[0], "p2_bj");
        assert_eq!(v1.op("p1").est_out_rows, 1e5);
        assert_eq!(v1.op("p3").children[1], "p1");

        // The spine now waits on two build-side subtrees instead of three builds.
        let sink = |v: &PlanDAG| v.pipelines().last().unwrap().deps.len();
        assert_eq!(sink(&vs[0]), 3);
        assert_eq!(sink(v1), 2);
    }

    #[test]
    fn expanding_pair_is_rejected() {
        // est(A ⋈ B) = 1e5 * 1e4 * (1e8 / (1e6 * 1e4)) = 1e7 > 1e5.
        let plan = four_table(1e8);
        let vs = bushy_variants(&plan, 3).unwrap();
        // (A,B) expands; (B,C) sel = 1e5/(1e8*1e3) -> est = 1e4*1e3*1e-6 = 10.
        assert_eq!(vs.len(), 2);
        assert!(vs[1].get("p3_j").is_some());

        let plan = parse_plan(
            "probe(build(scan(B, rows=1e4, id=b)),
               probe(build(scan(A, rows=1e5, id=a)), scan(D, rows=1e7), out=1e6, id=p1),
               out=1e8, id=p2)",
        )
        .unwrap();
        assert_eq!(bushy_variants(&plan, 3).unwrap().len(), 1);
    }

    #[test]
    fn k_max_limits_variants() {
        assert_eq!(bushy_variants(&four_table(1e5), 0).unwrap().len(), 1);
    }

    #[test]
    fn non_left_deep_rejected() {
        let plan = parse_plan(
            "probe(build(probe(build(scan(A, rows=1)), scan(B, rows=1))), scan(C, rows=1))",
        )
        .unwrap();
        assert!(matches!(bushy_variants(&plan, 1), Err(BushyError::NotLeftDeep(_))));
    }

    #[test]
    fn unrelated_keys_block_the_rewrite() {
        let plan = parse_plan(
            "probe(build(scan(B, rows=1e4, id=b)),
               probe(build(scan(A, rows=1e5, id=a)), scan(D, rows=1e7), out=1e6, id=p1, keys=[A.k, D.k]),
               out=1e5, id=p2, keys=[B.k, D.k2])",
        )
        .unwrap();
        assert_eq!(bushy_variants(&plan, 1).unwrap().len(), 1);
    }
}
