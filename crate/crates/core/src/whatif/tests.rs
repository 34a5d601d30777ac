use super::*;
use crate::estimator::simulate_query;
use crate::plan::parse_plan;

/// $1 per node-second; every operator processes 1e6 rows/s.
fn hw() -> HardwareProfile {
    HardwareProfile::uniform_linear(3600.0, 1e6)
}

fn prices() -> PriceBook {
    PriceBook {
        node_price_per_hour: 3600.0,
        storage_price_per_gb_hour: 1.0,
        write_batches_per_hour: 1.0,
        amortization_hours: 720.0,
    }
}

const JOIN: &str = "join(scan(A, rows=2e6), scan(B, rows=3e6), out=1e6, keys=[A.x, B.y])";

fn mv(rows: f64) -> TuningProposal {
    TuningProposal::CreateMV {
        name: "ab".into(),
        subtree: PlanSource::Text(JOIN.into()),
        est_mv_rows: rows,
        row_bytes: 1000.0,
        refresh_per_write_batch_node_s: 1.0,
        initial_build_node_s: Some(720.0),
    }
}

fn workload(template: &str, executions: f64) -> PredictedWorkload {
    PredictedWorkload {
        horizon_hours: 720.0,
        executions: BTreeMap::from([(template.to_string(), executions)]),
    }
}

#[test]
fn five_minus_three_is_accepted() {
    // Before: build side 2 s + probe side 3 s = $5. After: view scan of 1e6
    // rows feeding the aggregate, $1. Saving $4 at 1.25/h gives x = 5.
    // y = 1 GB storage ($1/h) + 1 batch/h * 1 node-s ($1/h) + $720 / 720 h.
    let plans = BTreeMap::from([("q".to_string(), parse_plan(&format!("agg({JOIN}, out=10)")).unwrap())]);
    let r = evaluate(&mv(1e6), &workload("q", 900.0), &plans, &hw(), &prices()).unwrap();
    assert_eq!(r.x_dollars_per_hour, 5.0);
    assert_eq!(r.y_dollars_per_hour, 3.0);
    assert_eq!(r.net_dollars_per_hour, 2.0);
    assert_eq!(r.verdict, Verdict::Accept);
    assert_eq!(r.payback_hours, Some(360.0));
    assert!(r.to_table().contains("verdict: accept"));
}

#[test]
fn no_queries_no_benefit() {
    let plans = BTreeMap::new();
    let empty = PredictedWorkload {
        horizon_hours: 720.0,
        executions: BTreeMap::new(),
    };
    let r = evaluate(&mv(1e6), &empty, &plans, &hw(), &prices()).unwrap();
    assert_eq!(r.x_dollars_per_hour, 0.0);
    assert!(r.y_dollars_per_hour > 0.0);
    assert_eq!(r.verdict, Verdict::Reject);
    assert_eq!(r.payback_hours, None);
}

#[test]
fn x_matches_an_independent_replay() {
    let q1 = parse_plan(&format!("agg({JOIN}, out=10)")).unwrap();
    let q2 = parse_plan(&format!("sort(filter({JOIN}, out=5e5))")).unwrap();
    let q3 = parse_plan("agg(scan(C, rows=4e6), out=1)").unwrap();
    // Hand-written rewrites.
    let q1_mv = parse_plan("agg(mvscan(ab, rows=1e6), out=10)").unwrap();
    let q2_mv = parse_plan("sort(filter(mvscan(ab, rows=1e6), out=5e5))").unwrap();

    let ones = |p: &PlanDAG| {
        let p = p.with_pipelines();
        let d = p.pipelines().iter().map(|x| (x.id, 1)).collect();
        simulate_query(&p, &d, &hw()).unwrap().dollars
    };
    let (r1, r2, r3) = (3.0, 0.5, 7.0);
    let expected = r1 * (ones(&q1) - ones(&q1_mv)) + r2 * (ones(&q2) - ones(&q2_mv)) + r3 * 0.0;

    let predicted = PredictedWorkload {
        horizon_hours: 10.0,
        executions: BTreeMap::from([
            ("q1".to_string(), r1 * 10.0),
            ("q2".to_string(), r2 * 10.0),
            ("q3".to_string(), r3 * 10.0),
            ("q4".to_string(), 1.0),
        ]),
    };
    let plans = BTreeMap::from([("q1".to_string(), q1), ("q2".to_string(), q2), ("q3".to_string(), q3)]);
    let r = evaluate(&mv(1e6), &predicted, &plans, &hw(), &prices()).unwrap();
    assert!((r.x_dollars_per_hour / expected - 1.0).abs() < 1e-9);
    assert_eq!(r.missing_plans, vec!["q4".to_string()]);
    assert!(!r.templates[2].matched);

    let x: f64 = r.templates.iter().fold(0.0, |a, t| a + t.x_dollars_per_hour);
    assert_eq!(x, r.x_dollars_per_hour);
    let c = r.costs;
    assert_eq!(
        c.storage_dollars_per_hour + c.maintenance_dollars_per_hour + c.amortized_one_time_dollars_per_hour,
        r.y_dollars_per_hour
    );
}

#[test]
fn a_proposal_may_hurt_a_template() {
    let plans = BTreeMap::from([("q".to_string(), parse_plan(&format!("agg({JOIN}, out=10)")).unwrap())]);
    // A view larger than both join inputs costs more to scan than the join.
    let r = evaluate(&mv(1e7), &workload("q", 720.0), &plans, &hw(), &prices()).unwrap();
    assert!(r.templates[0].x_dollars_per_hour < 0.0);
    assert_eq!(r.verdict, Verdict::Reject);
}

#[test]
fn view_substitution_collapses_the_subtree() {
    let plan = parse_plan(&format!("agg({JOIN}, out=10)")).unwrap();
    let out = rewrite(&plan, &mv(1e6)).unwrap();
    // The join subtree holds scan, scan, build, probe.
    assert_eq!(plan.len() - out.len(), 4 - 1);
    let root = out.root_op();
    let view = out.op(&root.children[0]);
    assert_eq!(view.kind, crate::plan::OperatorKind::MVScan);
    assert_eq!(view.table.as_deref(), Some("ab"));
    assert_eq!(view.est_out_rows, 1e6);
    assert_eq!(plan.len(), 5);

    let other = parse_plan("join(scan(A, rows=2e6), scan(B, rows=3e6), out=1e6, keys=[A.x, B.z])").unwrap();
    assert!(rewrite(&other, &mv(1e6)).is_none());
}

fn recluster(f: f64) -> TuningProposal {
    TuningProposal::Recluster {
        table: "T".into(),
        attribute: "d".into(),
        table_bytes: 1e12,
        expected_scan_fraction: f,
        repopulation_node_s: 3600.0,
    }
}

#[test]
fn recluster_scales_matching_scans() {
    let plan = parse_plan("agg(filter(scan(T, rows=1e7), out=1e5, keys=[T.d]), out=1)").unwrap();
    let same = rewrite(&plan, &recluster(1.0)).unwrap();
    assert_eq!(
        query_dollars(&same, &hw(), &prices()).unwrap(),
        query_dollars(&plan, &hw(), &prices()).unwrap()
    );
    let tenth = rewrite(&plan, &recluster(0.1)).unwrap();
    let scan = tenth.operators().iter().find(|o| o.table.as_deref() == Some("T")).unwrap();
    assert!((scan.est_out_rows - 1e6).abs() < 1e-6);

    let unrelated = parse_plan("agg(filter(scan(T, rows=1e7), out=1e5, keys=[T.e]), out=1)").unwrap();
    assert!(rewrite(&unrelated, &recluster(0.1)).is_none());
}

#[test]
fn payback_times_net_is_the_one_time_cost() {
    let plan = parse_plan("agg(filter(scan(T, rows=1e8), out=1e5, keys=[T.d]), out=1)").unwrap();
    let plans = BTreeMap::from([("q".to_string(), plan)]);
    let r = evaluate(&recluster(0.01), &workload("q", 7200.0), &plans, &hw(), &prices()).unwrap();
    assert_eq!(r.verdict, Verdict::Accept);
    let h = r.payback_hours.unwrap();
    assert!((h * r.net_dollars_per_hour / r.one_time_dollars - 1.0).abs() < 1e-9);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(recluster(0.0).validate().is_err());
    assert!(recluster(1.5).validate().is_err());
    let mut p = prices();
    p.amortization_hours = 0.0;
    assert!(p.validate().is_err());
    let text = r#"{"kind": "Recluster", "table": "T", "attribute": "d", "table_bytes": 1, "expected_scan_fraction": 0.5, "repopulation_node_s": 1}"#;
    let parsed: TuningProposal = serde_json::from_str(text).unwrap();
    assert_eq!(parsed.label(), "recluster T by d");
}
