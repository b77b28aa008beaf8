//! Displacement metrics.

use crate::error::{LtnError, Result};
use crate::scene::Point;

fn check(pred: &[Point], truth: &[Point]) -> Result<()> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(LtnError::HorizonMismatch {
            got: pred.len(),
            expected: truth.len(),
        });
    }
    Ok(())
}

/// Mean per-step Euclidean error.
pub fn ade(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, q)| p.distance(*q)).sum::<f64>() / truth.len() as f64)
}

/// Error at the last step.
pub fn fde(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred[pred.len() - 1].distance(truth[truth.len() - 1]))
}

/// 1-based step nearest to `seconds` after the last observation, rounding
/// halves up, or `None` beyond the horizon.
pub fn step_at_seconds(seconds: f64, dt: f64, horizon: usize) -> Option<usize> {
    let t = (seconds / dt + 0.5).floor() as usize;
    (1..=horizon).contains(&t).then_some(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ade: f64,
    pub fde: f64,
    pub k: usize,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    /// FDE at 1, 2, 3 and 4 s; `None` past the horizon.
    pub fde_seconds: [Option<f64>; 4],
}

/// Metrics of one instance. `single` is the designated prediction and
/// `samples` the set the minima range over.
pub fn compute_metrics(single: &[Point], samples: &[Vec<Point>], truth: &[Point], dt: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let ade_single = ade(single, truth)?;
    let fde_single = fde(single, truth)?;
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    for s in samples {
        min_ade = min_ade.min(ade(s, truth)?);
        min_fde = min_fde.min(fde(s, truth)?);
    }
    let mut fde_seconds = [None; 4];
    for (i, slot) in fde_seconds.iter_mut().enumerate() {
        if let Some(t) = step_at_seconds((i + 1) as f64, dt, truth.len()) {
            *slot = Some(single[t - 1].distance(truth[t - 1]));
        }
    }
    Ok(MetricsReport {
        ade: ade_single,
        fde: fde_single,
        k: samples.len(),
        min_ade_k: min_ade,
        min_fde_k: min_fde,
        fde_seconds,
    })
}

/// Column-wise mean of a set of reports; per-second entries average over
/// the reports that have them.
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let n = reports.len();
    if n == 0 {
        return None;
    }
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let mut fde_seconds = [None; 4];
    for (i, slot) in fde_seconds.iter_mut().enumerate() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.fde_seconds[i]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Some(MetricsReport {
        ade: avg(&|r| r.ade),
        fde: avg(&|r| r.fde),
        k: reports[0].k,
        min_ade_k: avg(&|r| r.min_ade_k),
        min_fde_k: avg(&|r| r.min_fde_k),
        fde_seconds,
    })
}
