#![allow(dead_code)]

use costintel::estimator::{HardwareProfile, ScalabilityModel};
use costintel::plan::{parse_plan, OperatorKind, PlanDAG};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn rows(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.gen_range(5.0..8.0)).round()
}

/// A random left-deep join plan with at most `max_pipelines` pipelines,
/// optionally shuffled through an exchange before the final aggregate.
pub fn random_plan(rng: &mut ChaCha8Rng, max_pipelines: usize) -> PlanDAG {
    assert!(max_pipelines >= 1);
    let joins = rng.gen_range(0..max_pipelines);
    let exchange = joins + 1 < max_pipelines && rng.gen_bool(0.5);
    let mut cur_rows = rows(rng);
    let mut expr = format!("scan(T0, rows={cur_rows})");
    if rng.gen_bool(0.5) {
        cur_rows = (cur_rows * rng.gen_range(0.1..1.0)).round();
        expr = format!("filter({expr}, out={cur_rows})");
    }
    for j in 1..=joins {
        let build_rows = rows(rng);
        cur_rows = (cur_rows * rng.gen_range(0.2..2.0)).round();
        expr = format!("probe(build(scan(T{j}, rows={build_rows})), {expr}, out={cur_rows})");
    }
    if exchange {
        expr = format!("exchange({expr})");
    }
    parse_plan(&format!("agg({expr}, out=100)")).unwrap()
}

/// USL models for every operator kind with random contention; the exchange
/// gets a coherency term.
pub fn random_hw(rng: &mut ChaCha8Rng) -> HardwareProfile {
    let models = OperatorKind::ALL
        .iter()
        .filter(|k| **k != OperatorKind::MVScan)
        .map(|&k| {
            let r = 10f64.powf(rng.gen_range(5.5..7.0));
            let sigma = rng.gen_range(0.0..0.3);
            let kappa = if k == OperatorKind::Exchange {
                rng.gen_range(0.001..0.02)
            } else if rng.gen_bool(0.2) {
                rng.gen_range(0.0..0.01)
            } else {
                0.0
            };
            ScalabilityModel::new(k, r, sigma, kappa)
        })
        .collect();
    HardwareProfile::new(rng.gen_range(1.0..5.0), models)
}
