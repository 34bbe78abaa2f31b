//! Scores a tracker run against the hidden path that produced it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdesim::Path;
use crate::trackers::{Decision, TrackResult};

/// Outcome of the first time the hidden path crosses a critical point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingMetrics {
    /// Time of the first sign change of `x − c`.
    pub crossing_time: f64,
    pub decision: Decision,
    /// The chosen branch holds the hidden state at the decision time.
    pub correct: bool,
    pub ambiguous: bool,
    /// `|statistic|` when the visit closed.
    pub statistic_gap: f64,
    /// Gap in bootstrap standard deviations.
    pub margin: f64,
    /// `max |x̂ − x|` from the decision to the next band entry (or path end).
    /// `NaN` without a decision.
    pub sup_error: f64,
    /// The same maximum taken from the crossing itself, band sojourn included.
    pub sojourn_sup_error: f64,
}

/// First index `k` with `x_k − c` of the opposite sign to `x_0 − c`.
pub fn first_crossing(path: &Path, c: f64) -> Option<usize> {
    let xs = &path.states;
    let side = (xs[0] - c).signum();
    xs.iter().position(|x| (x - c) * side <= 0.0)
}

fn index_of(path: &Path, t: f64) -> usize {
    (((t - path.times[0]) / path.dt).round() as usize).min(path.len() - 1)
}

fn sup_error(path: &Path, res: &TrackResult, from: usize, to: usize) -> f64 {
    (from..to).map(|k| (res.estimates[k] - path.states[k]).abs()).fold(0.0, f64::max)
}

/// Scores the critical-band visit during which the hidden path first crosses
/// critical point number `ci` (at `c`). Branch `ci` lies left of `c` and
/// branch `ci + 1` right of it. Returns `None` when the path never crosses.
pub fn crossing_metrics(path: &Path, res: &TrackResult, ci: usize, c: f64) -> Result<Option<CrossingMetrics>> {
    if path.dim != 1 || path.len() != res.estimates.len() {
        return Err(Error::param("tracker output and path do not match"));
    }
    let Some(kc) = first_crossing(path, c) else { return Ok(None) };
    let tc = path.times[kc];
    let near = |x: f64| (x - c).abs() <= 1e-9 * (1.0 + c.abs());
    // the visit that was open when the crossing happened
    let Some((i, rec)) = res.branch_log.iter().enumerate().rev().find(|(_, r)| near(r.critical) && r.time <= tc + 0.5 * path.dt) else {
        return Err(Error::Model(format!("hidden crossing at t={tc} happened outside every critical band")));
    };
    let next_entry = res.branch_log.get(i + 1).map_or(path.len(), |r| index_of(path, r.time));
    let (correct, sup, sojourn) = match (rec.decision, rec.chosen_branch, rec.decision_time) {
        (Decision::Stay | Decision::Reflect, Some(b), Some(td)) => {
            let kd = index_of(path, td);
            let correct = (b == ci + 1) == (path.states[kd] > c);
            let end = next_entry.max(kd + 1).min(path.len());
            (correct, sup_error(path, res, kd, end), sup_error(path, res, kc, end))
        }
        _ => (false, f64::NAN, f64::NAN),
    };
    Ok(Some(CrossingMetrics {
        crossing_time: tc,
        decision: rec.decision,
        correct,
        ambiguous: rec.decision == Decision::Ambiguous,
        statistic_gap: rec.statistic_gap,
        margin: rec.margin,
        sup_error: sup,
        sojourn_sup_error: sojourn,
    }))
}
