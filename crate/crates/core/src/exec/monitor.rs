use serde::{Deserialize, Serialize};

use crate::estimator::{ops_time, EstimateError, HardwareProfile, OpWork};
use crate::planner::{Bound, UserConstraint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorPolicy {
    pub theta_local: f64,
    pub theta_replan: f64,
    pub check_every_morsels: u32,
}

impl Default for MonitorPolicy {
    fn default() -> Self {
        MonitorPolicy {
            theta_local: 1.25,
            theta_replan: 2.0,
            check_every_morsels: 4,
        }
    }
}

impl MonitorPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta_local > 1.0 && self.theta_replan > self.theta_local) {
            return Err(format!(
                "need 1 < theta_local < theta_replan, got {} and {}",
                self.theta_local, self.theta_replan
            ));
        }
        if self.check_every_morsels < 1 {
            return Err("check_every_morsels must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    None,
    LocalAdjust,
    Replan,
}

/// `max(a/b, b/a)`; 1 when both are zero, infinite when exactly one is.
pub fn symmetric_ratio(observed: f64, predicted: f64) -> f64 {
    if observed == predicted {
        return 1.0;
    }
    if observed <= 0.0 || predicted <= 0.0 {
        return f64::INFINITY;
    }
    (observed / predicted).max(predicted / observed)
}

/// What the monitor sees for one running pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    /// Worst symmetric ratio of projected to planned rows over the
    /// pipeline's input and operator outputs.
    pub rows_ratio: f64,
    /// Symmetric ratio of the observed input flow rate to the planned one;
    /// 1 when no clean measurement window exists.
    pub rate_ratio: f64,
    /// Projected remaining run time over the time left until the planned
    /// finish. Above 1 the pipeline is behind schedule, typically because
    /// an upstream pipeline finished late.
    pub schedule_ratio: f64,
}

impl Deviation {
    pub fn none() -> Self {
        Deviation {
            rows_ratio: 1.0,
            rate_ratio: 1.0,
            schedule_ratio: 1.0,
        }
    }

    /// Deviation of the pipeline's own measurements from the plan.
    pub fn rho(&self) -> f64 {
        self.rows_ratio.max(self.rate_ratio)
    }
}

/// Replans on large measurement errors, corrects locally on moderate ones
/// or when the pipeline has fallen behind its own schedule. Falling behind
/// alone never triggers a replan: the cause lies upstream and has been
/// handled there.
pub fn monitor_step(deviation: &Deviation, policy: &MonitorPolicy) -> Action {
    let rho = deviation.rho();
    if rho > policy.theta_replan {
        Action::Replan
    } else if rho > policy.theta_local || deviation.schedule_ratio > policy.theta_local {
        Action::LocalAdjust
    } else {
        Action::None
    }
}

/// Inputs to a single-pipeline DOP correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustInput {
    /// Rows each operator still has to process.
    pub remaining: Vec<OpWork>,
    pub current_dop: u32,
    /// Planned finish minus now.
    pub time_left_s: f64,
    /// Budget mode: node-seconds this pipeline may still consume.
    pub node_seconds_allowance: f64,
}

/// New DOP for a pipeline that drifted from its plan.
///
/// Under a latency target: the smallest DOP that still meets the planned
/// finish, counting the resize delay for any change; when none does, the
/// fastest DOP. Under a budget: the largest DOP up to the fastest one whose
/// remaining node-seconds fit the allowance.
pub fn local_adjust(input: &AdjustInput, constraint: &UserConstraint, hw: &HardwareProfile) -> Result<u32, EstimateError> {
    let cur = input.current_dop;
    if input.remaining.first().is_none_or(|o| o.rows <= 0.0) {
        return Ok(cur);
    }
    let mut fastest = (1, f64::INFINITY);
    let mut times = Vec::with_capacity(constraint.dop_max as usize);
    for d in 1..=constraint.dop_max {
        let t = ops_time(&input.remaining, d, hw)?;
        if t < fastest.1 {
            fastest = (d, t);
        }
        times.push(t);
    }
    let delay = |d: u32| if d == cur { 0.0 } else { hw.resize_delay_s };
    match constraint.bound {
        Bound::LatencySla { .. } => Ok((1..=constraint.dop_max)
            .find(|&d| times[d as usize - 1] <= input.time_left_s - delay(d))
            .unwrap_or(fastest.0)),
        Bound::Budget { .. } => {
            let cost = |d: u32| d as f64 * times[d as usize - 1] + if d == cur { 0.0 } else { cur as f64 * hw.resize_delay_s };
            Ok((1..=fastest.0)
                .rev()
                .find(|&d| cost(d) <= input.node_seconds_allowance)
                .unwrap_or(1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::OperatorKind;

    fn dev(rho: f64) -> Deviation {
        Deviation {
            rows_ratio: rho,
            ..Deviation::none()
        }
    }

    #[test]
    fn thresholds() {
        let p = MonitorPolicy::default();
        assert_eq!(monitor_step(&dev(1.0), &p), Action::None);
        assert_eq!(monitor_step(&dev(1.25), &p), Action::None);
        assert_eq!(monitor_step(&dev(1.5), &p), Action::LocalAdjust);
        assert_eq!(monitor_step(&dev(2.0), &p), Action::LocalAdjust);
        assert_eq!(monitor_step(&dev(3.0), &p), Action::Replan);
        let late = Deviation {
            schedule_ratio: 10.0,
            ..Deviation::none()
        };
        assert_eq!(monitor_step(&late, &p), Action::LocalAdjust);
        assert_eq!(symmetric_ratio(0.5, 2.0), 4.0);
        assert_eq!(symmetric_ratio(0.0, 0.0), 1.0);
        assert_eq!(symmetric_ratio(0.0, 1.0), f64::INFINITY);
    }

    fn input(rows: f64, cur: u32, left: f64) -> AdjustInput {
        AdjustInput {
            remaining: vec![OpWork {
                id: "s".into(),
                kind: OperatorKind::TableScan,
                rows,
            }],
            current_dop: cur,
            time_left_s: left,
            node_seconds_allowance: f64::INFINITY,
        }
    }

    #[test]
    fn latency_mode_adjust() {
        let hw = HardwareProfile::uniform_linear(3.6, 1e6);
        let c = UserConstraint::sla(100.0);
        assert_eq!(local_adjust(&input(1e6, 1, 0.5), &c, &hw).unwrap(), 2);
        assert_eq!(local_adjust(&input(1e6, 1, -1.0), &c, &hw).unwrap(), 256);
        assert_eq!(local_adjust(&input(0.0, 3, 0.5), &c, &hw).unwrap(), 3);
        // Ahead of schedule: shrink.
        assert_eq!(local_adjust(&input(1e6, 8, 1.0), &c, &hw).unwrap(), 1);
    }

    #[test]
    fn latency_mode_counts_resize_delay() {
        let mut hw = HardwareProfile::uniform_linear(3.6, 1e6);
        hw.resize_delay_s = 0.25;
        let c = UserConstraint::sla(100.0);
        // 1e6 rows in 0.25 s needs d = 4.
        assert_eq!(local_adjust(&input(1e6, 1, 0.5), &c, &hw).unwrap(), 4);
        // Staying at the current DOP needs no delay.
        assert_eq!(local_adjust(&input(1e6, 2, 0.5), &c, &hw).unwrap(), 2);
    }

    #[test]
    fn budget_mode_takes_largest_affordable() {
        let hw = HardwareProfile::new(
            3.6,
            vec![crate::estimator::ScalabilityModel::new(OperatorKind::TableScan, 1e6, 0.1, 0.0)],
        );
        let c = UserConstraint::budget(1.0).with_dop_max(16);
        // node-seconds at d: d * 1e7 / T(d) = 10 (1 + 0.1 (d - 1)).
        let mut i = input(1e7, 1, 0.0);
        i.node_seconds_allowance = 14.0;
        assert_eq!(local_adjust(&i, &c, &hw).unwrap(), 5);
        i.node_seconds_allowance = 1.0;
        assert_eq!(local_adjust(&i, &c, &hw).unwrap(), 1);
    }
}
