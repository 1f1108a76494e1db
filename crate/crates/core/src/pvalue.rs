//! Conformal p-values for candidate positions and p-value based filtering of
//! unreliable position fixes.

use crate::error::{Error, Result};
use crate::harness::{render_report, ReportFormat};
use crate::risk::Path;
use crate::score::{distance_score, max_aggregate, CalibrationScores, ScoreKind};

/// `(1 + #{i : s_i >= s}) / (n + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValue {
    pub value: f64,
    pub n: usize,
    /// Numerator `1 + #{i : s_i >= s}`, in `1..=n + 1`.
    pub rank: usize,
}

pub fn pvalue(cal: &CalibrationScores, test_score: f64) -> Result<PValue> {
    if cal.is_empty() {
        return Err(Error::Contract("p-values need at least one calibration score".into()));
    }
    if test_score.is_nan() || test_score < 0.0 {
        return Err(Error::Contract(format!(
            "test score {test_score} is not a non-negative score"
        )));
    }
    let n = cal.len();
    // scores are sorted ascending: everything from the first s_i >= s onwards counts
    let at_least = n - cal.scores().partition_point(|s| *s < test_score);
    let rank = 1 + at_least;
    Ok(PValue {
        value: rank as f64 / (n as f64 + 1.0),
        n,
        rank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterEntry {
    pub id: u64,
    pub score: f64,
    pub pvalue: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub alpha: f64,
    pub entries: Vec<FilterEntry>,
}

impl FilterReport {
    pub fn retained_ids(&self) -> Vec<u64> {
        self.entries.iter().filter(|e| e.retained).map(|e| e.id).collect()
    }

    /// `ID,SCORE,PVALUE,RETAINED` with 6 decimals, in input order.
    pub fn to_csv(&self) -> Result<String> {
        render_report(&self.entries, ReportFormat::Csv)
    }
}

/// Keeps exactly the points whose p-value exceeds `alpha`.
pub fn filter_points(points: &[(u64, f64)], cal: &CalibrationScores, alpha: f64) -> Result<FilterReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("filter alpha must lie in (0, 1), got {alpha}")));
    }
    let entries = points
        .iter()
        .map(|&(id, score)| {
            let p = pvalue(cal, score)?;
            Ok(FilterEntry {
                id,
                score,
                pvalue: p.value,
                retained: p.value > alpha,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterReport { alpha, entries })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperUniformityRow {
    pub alpha: f64,
    /// Empirical `P(p <= alpha)`.
    pub fraction: f64,
    /// `fraction > alpha + slack`.
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperUniformityReport {
    pub rows: Vec<SuperUniformityRow>,
    pub slack: f64,
}

impl SuperUniformityReport {
    pub fn any_violation(&self) -> bool {
        self.rows.iter().any(|r| r.violated)
    }
}

/// Empirical CDF of null p-values on `alpha_grid`, flagging levels where it
/// exceeds `alpha + slack`.
pub fn superuniformity_check(null_pvalues: &[PValue], alpha_grid: &[f64], slack: f64) -> Result<SuperUniformityReport> {
    if null_pvalues.is_empty() || alpha_grid.is_empty() {
        return Err(Error::Contract(
            "super-uniformity check needs p-values and an alpha grid".into(),
        ));
    }
    let mut sorted: Vec<f64> = null_pvalues.iter().map(|p| p.value).collect();
    sorted.sort_by(f64::total_cmp);
    let total = sorted.len() as f64;
    let rows = alpha_grid
        .iter()
        .map(|&alpha| {
            let fraction = sorted.partition_point(|p| *p <= alpha) as f64 / total;
            SuperUniformityRow {
                alpha,
                fraction,
                violated: fraction > alpha + slack,
            }
        })
        .collect();
    Ok(SuperUniformityReport { rows, slack })
}

/// One calibration score per path: the largest positioning error along it.
pub fn path_calibration_scores(paths: &[Path]) -> Result<CalibrationScores> {
    let scores = paths
        .iter()
        .map(|p| {
            let per_point = p
                .samples()
                .iter()
                .enumerate()
                .map(|(seq, s)| {
                    let pred = s
                        .predicted
                        .ok_or_else(|| Error::Contract(format!("path {} sample {seq} has no prediction", p.id())))?;
                    distance_score(&s.truth, &pred)
                })
                .collect::<Result<Vec<_>>>()?;
            max_aggregate(&per_point)
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationScores::new(scores, ScoreKind::Distance)
}
