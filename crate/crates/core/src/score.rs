//! Non-conformity scores: `1 - p(label)` for class heads, Euclidean error for
//! coordinates, and the max over several labelled items of one calibration unit.

use crate::dataset::{Coords, Dataset};
use crate::error::{Error, Result};
use crate::predictor::{PredictionOutput, PredictionSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Classification,
    Distance,
}

/// Which label a run calibrates for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Building,
    Floor,
    Coords,
}

impl Task {
    pub fn score_kind(&self) -> ScoreKind {
        match self {
            Task::Building | Task::Floor => ScoreKind::Classification,
            Task::Coords => ScoreKind::Distance,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Building => "building",
            Task::Floor => "floor",
            Task::Coords => "coords",
        }
    }

    /// The probability head this task reads, if it is a classification task.
    pub fn head<'a>(&self, prediction: &'a PredictionOutput) -> Option<&'a [f64]> {
        match self {
            Task::Building => Some(&prediction.building_probs),
            Task::Floor => Some(&prediction.floor_probs),
            Task::Coords => None,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "building" => Ok(Task::Building),
            "floor" => Ok(Task::Floor),
            "coords" => Ok(Task::Coords),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected building, floor or coords)"
            ))),
        }
    }
}

/// `1 - probs[label]`.
pub fn class_score(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} out of range for {} classes", probs.len())))?;
    // clamp guards against 1 - (1 + ulp)
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// Euclidean positioning error in meters.
pub fn distance_score(truth: &Coords, pred: &Coords) -> Result<f64> {
    if !(truth.is_finite() && pred.is_finite()) {
        return Err(Error::Contract(format!(
            "non-finite coordinates: truth {truth:?}, prediction {pred:?}"
        )));
    }
    Ok(truth.distance(pred))
}

/// Largest score of a multi-item calibration unit.
pub fn max_aggregate(scores: &[f64]) -> Result<f64> {
    scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Contract("max_aggregate needs at least one score".into()))
}

/// Calibration scores in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationScores {
    scores: Vec<f64>,
    kind: ScoreKind,
}

impl CalibrationScores {
    /// Sorts `scores` ascending (stable, so ties keep their input order).
    pub fn new(mut scores: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Contract(format!(
                "score {bad} is not a finite non-negative value"
            )));
        }
        if kind == ScoreKind::Classification && scores.iter().any(|s| *s > 1.0) {
            return Err(Error::Contract("classification scores must not exceed 1".into()));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores, kind })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }
}

/// The task's score of one prediction against the record's truth.
pub fn score_prediction(
    prediction: &PredictionOutput,
    label: &crate::dataset::PositionLabel,
    task: Task,
) -> Result<f64> {
    match task {
        Task::Building => class_score(&prediction.building_probs, label.building as usize),
        Task::Floor => class_score(&prediction.floor_probs, label.floor as usize),
        Task::Coords => distance_score(&label.position, &prediction.coords),
    }
}

/// One score per calibration record, sorted ascending.
pub fn score_calibration_set(predictor: &dyn PredictionSource, cal: &Dataset, task: Task) -> Result<CalibrationScores> {
    predictor.check_dataset(cal)?;
    let scores = cal
        .records()
        .iter()
        .map(|r| score_prediction(&predictor.prediction_for(r)?, &r.label, task))
        .collect::<Result<Vec<_>>>()?;
    CalibrationScores::new(scores, task.score_kind())
}
