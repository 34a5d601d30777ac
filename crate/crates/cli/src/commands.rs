use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use costintel::estimator::{fit_model, CalibrationSample, HardwareProfile};
use costintel::exec::{run, MonitorPolicy, Scenario, ScenarioFile};
use costintel::frontier;
use costintel::plan::{parse_plan, OperatorKind, PipelineId, PlanDAG};
use costintel::planner::{plan_with_variants, ConstraintFile, UserConstraint};
use costintel::stats::{parse_trace_log, predict, template_signature, WorkloadSummary};
use costintel::whatif::{evaluate, PriceBook, TuningProposal, Verdict};
use serde::Serialize;

use crate::state::State;
use crate::{Common, Failure, Format};

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write(c: &Common, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let path = c.out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn read_plan(path: &Path) -> anyhow::Result<PlanDAG> {
    parse_plan(&read(path)?).with_context(|| format!("in plan file {}", path.display()))
}

fn hardware(c: &Common) -> anyhow::Result<HardwareProfile> {
    let path = c.hw.as_deref().ok_or_else(|| anyhow!("--hw is required"))?;
    let hw: HardwareProfile = read_json(path)?;
    hw.validate().map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok(hw)
}

fn constraint(path: &Path) -> anyhow::Result<(UserConstraint, usize)> {
    let file: ConstraintFile = read_json(path)?;
    file.resolve().map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn state_path(c: &Common) -> PathBuf {
    c.state.clone().unwrap_or_else(|| c.out.join("state.json"))
}

pub fn calibrate(c: &Common, samples: &Path, node_price: f64) -> Outcome {
    let samples: Vec<CalibrationSample> = read_json(samples)?;
    let mut hw = match &c.hw {
        Some(_) => hardware(c)?,
        None => HardwareProfile::new(node_price, Vec::new()),
    };
    let mut kinds: BTreeMap<OperatorKind, Vec<CalibrationSample>> = BTreeMap::new();
    for s in samples {
        kinds.entry(s.op_kind).or_default().push(s);
    }
    for (kind, group) in kinds {
        let model = fit_model(&group).with_context(|| format!("fitting {kind}"))?;
        eprintln!("{kind}: r = {:.6e}, sigma = {:.6}, kappa = {:.6}", model.r, model.sigma, model.kappa);
        hw.set_model(model);
    }
    write(c, "hw.json", &(serde_json::to_string_pretty(&hw)? + "\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    schema_version: u32,
    variant_index: usize,
    feasible: bool,
    dops: &'a BTreeMap<PipelineId, u32>,
    estimate: &'a costintel::estimator::SimEstimate,
    plan: costintel::plan::PlanDocument,
}

pub fn plan(c: &Common, plan: &Path, constraint_path: &Path) -> Outcome {
    let hw = hardware(c)?;
    let plan = State::load(Some(&state_path(c)))?.apply(&read_plan(plan)?);
    let (con, k_max) = constraint(constraint_path)?;
    let choice = plan_with_variants(&plan, &con, &hw, k_max)?;
    let a = &choice.assignment;
    let out = PlanOutput {
        schema_version: 1,
        variant_index: choice.variant_index,
        feasible: a.feasible,
        dops: &a.dops,
        estimate: &a.estimate,
        plan: choice.plan.to_document(),
    };
    write(c, "assignment.json", &(serde_json::to_string_pretty(&out)? + "\n"))?;
    println!(
        "variant {} latency {:.6} s dollars {:.6} feasible {}",
        choice.variant_index, a.estimate.latency_s, a.estimate.dollars, a.feasible
    );
    if a.feasible {
        Ok(())
    } else {
        Err(Failure::Missed(format!("best plan reaches {:.6} s / ${:.6}", a.estimate.latency_s, a.estimate.dollars)))
    }
}

/// Carries true cardinalities across a tuning rewrite: a view scan returns
/// what the replaced subtree returned, a reclustered scan reads the same
/// fraction of its true rows as of its estimate.
fn carry_truth(before: &PlanDAG, after: &PlanDAG, truth: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    after
        .operators()
        .iter()
        .filter_map(|op| {
            let t = *truth.get(&op.id)?;
            let old = before.get(&op.id)?;
            let scaled = if op.kind == old.kind && old.est_out_rows > 0.0 {
                t * op.est_out_rows / old.est_out_rows
            } else {
                t
            };
            Some((op.id.clone(), scaled))
        })
        .collect()
}

pub fn simulate(c: &Common, scenario: &Path, constraint_path: &Path, policy: &MonitorPolicy) -> Outcome {
    let hw = hardware(c)?;
    let file: ScenarioFile = read_json(scenario)?;
    let mut sc: Scenario = file.into_scenario().with_context(|| format!("in scenario {}", scenario.display()))?;
    let state = State::load(Some(&state_path(c)))?;
    let tuned = state.apply(&sc.plan);
    if tuned.len() != sc.plan.len() || tuned.to_json() != sc.plan.to_json() {
        sc.true_rows = carry_truth(&sc.plan, &tuned, &sc.true_rows);
        sc.plan = tuned;
    }
    if let Some(seed) = c.seed {
        sc.seed = seed;
    }
    let (con, k_max) = constraint(constraint_path)?;
    let choice = plan_with_variants(&sc.plan, &con, &hw, k_max)?;
    if choice.variant_index != 0 {
        // The chosen variant renames the rewritten joins; their truths
        // default to estimates.
        let mut truth = carry_truth(&sc.plan, &choice.plan, &sc.true_rows);
        for op in choice.plan.operators() {
            truth.entry(op.id.clone()).or_insert(op.est_out_rows);
        }
        sc.true_rows = truth;
        sc.plan = choice.plan.clone();
    }
    let report = run(&sc, &choice.assignment, &con, policy, &hw)?;
    write(c, "report.json", &(report.to_json() + "\n"))?;
    write(c, "timeline.csv", &report.to_csv())?;
    println!(
        "operators {} latency {:.6} s dollars {:.6} resizes {} replans {} met {}",
        sc.plan.len(),
        report.actual_latency_s,
        report.actual_dollars,
        report.resize_events.len(),
        report.replans,
        report.sla_met
    );
    if report.sla_met {
        Ok(())
    } else {
        Err(Failure::Missed(format!(
            "replay took {:.6} s and ${:.6}",
            report.actual_latency_s, report.actual_dollars
        )))
    }
}

pub fn frontier(c: &Common, plan: &Path, slas: &[f64], dop_max: u32, k_max: usize) -> Outcome {
    if slas.iter().any(|s| !(*s > 0.0)) {
        return Err(anyhow!("latency targets must be positive").into());
    }
    let hw = hardware(c)?;
    let plan = State::load(Some(&state_path(c)))?.apply(&read_plan(plan)?);
    let points = frontier::sweep(&plan, &hw, slas, dop_max, k_max)?;
    if points.is_empty() {
        eprintln!("warning: no latency target in the sweep is feasible; the frontier is empty");
    }
    match c.format {
        Format::Csv => write(c, "frontier.csv", &frontier::to_csv(&points))?,
        Format::Json => write(c, "frontier.json", &(serde_json::to_string_pretty(&points)? + "\n"))?,
    };
    Ok(())
}

pub fn ingest(c: &Common, traces: &Path, summary: Option<&Path>) -> Outcome {
    let mut s = match summary {
        Some(p) => WorkloadSummary::from_json(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => WorkloadSummary::default(),
    };
    let (records, parse_errors) = parse_trace_log(&read(traces)?);
    for (line, e) in &parse_errors {
        eprintln!("{}:{line}: skipped: {e}", traces.display());
    }
    let r = s.ingest(records);
    for (i, e) in &r.malformed {
        eprintln!("record {i}: skipped: {e}");
    }
    eprintln!(
        "accepted {}, duplicates {}, late {}, malformed {}",
        r.accepted,
        r.duplicates,
        r.late,
        r.malformed.len() + parse_errors.len()
    );
    write(c, "summary.json", &(s.to_json() + "\n"))?;
    Ok(())
}

/// Plans keyed by template signature and by file stem.
fn template_plans(dir: &Path) -> anyhow::Result<BTreeMap<String, PlanDAG>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("plan" | "json")))
        .collect();
    entries.sort();
    let mut plans = BTreeMap::new();
    for path in entries {
        let plan = read_plan(&path)?;
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            plans.insert(stem.to_string(), plan.clone());
        }
        plans.insert(template_signature(&plan), plan);
    }
    Ok(plans)
}

pub fn advise(
    c: &Common,
    proposal: &Path,
    summary: &Path,
    plans: &Path,
    prices: &Path,
    horizon: Option<f64>,
    approve: bool,
) -> Outcome {
    let hw = hardware(c)?;
    let proposal: TuningProposal = read_json(proposal)?;
    let summary = WorkloadSummary::from_json(&read(summary)?).with_context(|| format!("in {}", summary.display()))?;
    let prices: PriceBook = read_json(prices)?;
    let plans = template_plans(plans)?;
    let predicted = predict(&summary, horizon.unwrap_or(prices.amortization_hours));
    let report = evaluate(&proposal, &predicted, &plans, &hw, &prices)?;
    for m in &report.missing_plans {
        eprintln!("warning: no plan for predicted template {m}; excluded");
    }
    write(c, "tuning_report.json", &(report.to_json() + "\n"))?;
    print!("{}", report.to_table());
    if !approve {
        return Ok(());
    }
    if report.verdict != Verdict::Accept {
        return Err(Failure::Rejected(format!(
            "{} has net {:.6} $/h",
            report.proposal, report.net_dollars_per_hour
        )));
    }
    let path = state_path(c);
    let mut state = State::load(Some(&path))?;
    state.applied.push(proposal);
    fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).ok();
    state.save(&path)?;
    eprintln!("applied; recorded in {}", path.display());
    Ok(())
}
