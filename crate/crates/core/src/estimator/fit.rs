//! Least-squares calibration of scalability models.
//!
//! Predicted duration of a sample is
//!
//! ```text
//! seconds = rows * (1 + sigma (d - 1) + kappa d (d - 1)) / (r d)
//! ```
//!
//! which is linear in `a = 1/r`, `b = sigma/r`, `c = kappa/r`. The
//! Gauss-Newton step for a linear residual is the exact least-squares
//! solution, so each active set needs a single solve. Non-negativity of
//! `sigma` and `kappa` is enforced by solving every active set over
//! `{sigma, kappa}` and keeping the feasible one with the smallest residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ScalabilityModel;
use crate::plan::OperatorKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub op_kind: OperatorKind,
    pub dop: u32,
    pub rows: f64,
    pub measured_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples span a single DOP; contention cannot be separated from base rate")]
    SingleDop,
    #[error("samples mix operator kinds {0} and {1}")]
    MixedKinds(OperatorKind, OperatorKind),
    #[error("sample {0} has a non-positive dop, row count or duration")]
    NonPositive(usize),
    #[error("samples admit no model with a positive base rate")]
    Degenerate,
}

/// Columns of the design matrix for one sample: rows/d * [1, d-1, d(d-1)].
fn design_row(s: &CalibrationSample) -> [f64; 3] {
    let d = s.dop as f64;
    let w = s.rows / d;
    [w, w * (d - 1.0), w * d * (d - 1.0)]
}

/// Solves min ||A x - y|| over the given columns; unused columns are zero.
fn solve_subset(rows: &[[f64; 3]], y: &[f64], cols: &[usize]) -> Option<([f64; 3], f64)> {
    let n = rows.len();
    let k = cols.len();
    let mut a = DMatrix::<f64>::zeros(n, k);
    for (i, r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            a[(i, j)] = r[c];
        }
    }
    // Column scaling keeps the solve well conditioned when rows span decades.
    let mut scale = vec![1.0; k];
    for j in 0..k {
        let norm = a.column(j).norm();
        if norm == 0.0 {
            return None;
        }
        scale[j] = norm;
        a.column_mut(j).scale_mut(1.0 / norm);
    }
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-14).ok()?;
    let mut theta = [0.0; 3];
    for (j, &c) in cols.iter().enumerate() {
        theta[c] = sol[j] / scale[j];
    }
    let ssr: f64 = rows
        .iter()
        .zip(y)
        .map(|(r, yi)| {
            let pred = r[0] * theta[0] + r[1] * theta[1] + r[2] * theta[2];
            (pred - yi).powi(2)
        })
        .sum();
    Some((theta, ssr))
}

/// Fits `(r, sigma, kappa)` to measured durations.
///
/// With only two distinct DOPs the coherency term cannot be separated from
/// contention and `kappa` is fixed at zero.
pub fn fit_model(samples: &[CalibrationSample]) -> Result<ScalabilityModel, FitError> {
    if samples.len() < 3 {
        return Err(FitError::TooFewSamples(samples.len()));
    }
    let kind = samples[0].op_kind;
    for (i, s) in samples.iter().enumerate() {
        if s.op_kind != kind {
            return Err(FitError::MixedKinds(kind, s.op_kind));
        }
        if s.dop < 1 || !(s.rows > 0.0) || !(s.measured_seconds > 0.0) || !s.rows.is_finite() {
            return Err(FitError::NonPositive(i));
        }
    }
    let mut dops: Vec<u32> = samples.iter().map(|s| s.dop).collect();
    dops.sort_unstable();
    dops.dedup();
    if dops.len() < 2 {
        return Err(FitError::SingleDop);
    }

    let rows: Vec<[f64; 3]> = samples.iter().map(design_row).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.measured_seconds).collect();
    let subsets: &[&[usize]] = if dops.len() >= 3 {
        &[&[0, 1, 2], &[0, 1], &[0, 2], &[0]]
    } else {
        &[&[0, 1], &[0]]
    };

    let mut best: Option<([f64; 3], f64)> = None;
    for cols in subsets {
        let Some((theta, ssr)) = solve_subset(&rows, &y, cols) else {
            continue;
        };
        if !(theta[0] > 0.0) || theta[1] < 0.0 || theta[2] < 0.0 {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| ssr < *b) {
            best = Some((theta, ssr));
        }
    }
    let (theta, _) = best.ok_or(FitError::Degenerate)?;
    Ok(ScalabilityModel {
        op_kind: kind,
        r: 1.0 / theta[0],
        sigma: theta[1] / theta[0],
        kappa: theta[2] / theta[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples_from(model: &ScalabilityModel, dops: &[u32], rows: f64) -> Vec<CalibrationSample> {
        dops.iter()
            .map(|&d| CalibrationSample {
                op_kind: model.op_kind,
                dop: d,
                rows,
                measured_seconds: rows / model.rate(d),
            })
            .collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn recovers_linear_model() {
        let truth = ScalabilityModel::linear(OperatorKind::TableScan, 1e6);
        let fit = fit_model(&samples_from(&truth, &[1, 2, 4], 1e7)).unwrap();
        assert!(rel(fit.r, 1e6) < 1e-6);
        assert!(fit.sigma.abs() < 1e-6 && fit.kappa.abs() < 1e-6);
    }

    #[test]
    fn recovers_contention_model() {
        let truth = ScalabilityModel::new(OperatorKind::HashProbe, 5e5, 0.15, 0.0);
        let fit = fit_model(&samples_from(&truth, &[1, 2, 4, 8, 16], 2e6)).unwrap();
        assert!(rel(fit.r, 5e5) < 1e-4);
        assert!(rel(fit.sigma, 0.15) < 1e-4);
        assert!(fit.kappa.abs() < 1e-8);
    }

    #[test]
    fn recovers_retrograde_model() {
        let truth = ScalabilityModel::new(OperatorKind::Exchange, 3e5, 0.05, 0.002);
        let fit = fit_model(&samples_from(&truth, &[1, 2, 4, 8, 16, 32], 1e6)).unwrap();
        assert!(rel(fit.r, 3e5) < 1e-6);
        assert!(rel(fit.sigma, 0.05) < 1e-6);
        assert!(rel(fit.kappa, 0.002) < 1e-6);
    }

    #[test]
    fn single_dop_is_degenerate() {
        let truth = ScalabilityModel::linear(OperatorKind::Sort, 1e6);
        let mut s = samples_from(&truth, &[4, 4], 1e6);
        assert_eq!(fit_model(&s), Err(FitError::TooFewSamples(2)));
        s.push(s[0]);
        assert_eq!(fit_model(&s), Err(FitError::SingleDop));
    }

    #[test]
    fn superlinear_data_clamps_to_zero_contention() {
        // Each doubling more than doubles the rate: the unconstrained fit
        // wants sigma < 0.
        let s: Vec<CalibrationSample> = [(1, 10.0), (2, 4.0), (4, 1.8)]
            .iter()
            .map(|&(d, secs)| CalibrationSample {
                op_kind: OperatorKind::Filter,
                dop: d,
                rows: 1e6,
                measured_seconds: secs,
            })
            .collect();
        let fit = fit_model(&s).unwrap();
        assert!(fit.sigma >= 0.0 && fit.kappa >= 0.0 && fit.r > 0.0);
    }
}
