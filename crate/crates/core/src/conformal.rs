//! Split conformal prediction: the order-statistic quantile of calibration
//! scores, class sets and coordinate discs built from it, and the coverage
//! and set-size metrics used to evaluate them.

use crate::dataset::Coords;
use crate::error::{Error, Result};
use crate::score::{class_score, CalibrationScores, ScoreKind};

/// `ceil((n + 1)(1 - alpha))`, snapping products within 1e-9 of an integer
/// onto it so that float error cannot push the rank up by one.
pub fn conformal_rank(n: usize, alpha: f64) -> i64 {
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    let nearest = target.round();
    if (target - nearest).abs() <= 1e-9 * target.abs().max(1.0) {
        nearest as i64
    } else {
        target.ceil() as i64
    }
}

/// Threshold `q̂ = s_(k)` with `k = ceil((n + 1)(1 - alpha))`; `+inf` when
/// `k > n`, `-inf` when `k < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalQuantile {
    pub value: f64,
    pub alpha: f64,
    pub n: usize,
    pub k_index: i64,
    pub kind: ScoreKind,
}

pub fn conformal_quantile(cal: &CalibrationScores, alpha: f64) -> Result<ConformalQuantile> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let n = cal.len();
    let k_index = conformal_rank(n, alpha);
    let value = if k_index < 1 {
        f64::NEG_INFINITY
    } else if k_index as usize > n {
        f64::INFINITY
    } else {
        cal.scores()[k_index as usize - 1]
    };
    Ok(ConformalQuantile {
        value,
        alpha,
        n,
        k_index,
        kind: cal.kind(),
    })
}

pub trait PredictionSet {
    type Truth;

    fn contains(&self, truth: &Self::Truth) -> bool;
}

/// Class ids whose score `1 - p(y)` is at most `q̂`, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassPredictionSet {
    members: Vec<usize>,
}

impl ClassPredictionSet {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_subset(&self, other: &ClassPredictionSet) -> bool {
        self.members.iter().all(|m| other.members.binary_search(m).is_ok())
    }
}

impl PredictionSet for ClassPredictionSet {
    type Truth = usize;

    fn contains(&self, truth: &usize) -> bool {
        self.members.binary_search(truth).is_ok()
    }
}

pub fn class_prediction_set(probs: &[f64], q: &ConformalQuantile) -> Result<ClassPredictionSet> {
    if q.kind != ScoreKind::Classification {
        return Err(Error::Contract(
            "class prediction sets need a quantile of classification scores".into(),
        ));
    }
    let mut members = Vec::new();
    for y in 0..probs.len() {
        if class_score(probs, y)? <= q.value {
            members.push(y);
        }
    }
    Ok(ClassPredictionSet { members })
}

/// Closed disc `{y : |y - center| <= radius}`. A radius of `+inf` covers the
/// plane; `-inf` (zero target coverage) denotes the empty region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionPredictionSet {
    pub center: Coords,
    pub radius: f64,
}

impl RegionPredictionSet {
    pub fn is_empty(&self) -> bool {
        self.radius < 0.0
    }

    pub fn is_subset(&self, other: &RegionPredictionSet) -> bool {
        self.is_empty() || (self.center == other.center && self.radius <= other.radius)
    }
}

impl PredictionSet for RegionPredictionSet {
    type Truth = Coords;

    fn contains(&self, truth: &Coords) -> bool {
        self.radius == f64::INFINITY || self.center.distance(truth) <= self.radius
    }
}

pub fn region_prediction_set(pred: &Coords, q: &ConformalQuantile) -> Result<RegionPredictionSet> {
    if q.kind != ScoreKind::Distance {
        return Err(Error::Contract(
            "coordinate regions need a quantile of distance scores".into(),
        ));
    }
    Ok(RegionPredictionSet {
        center: *pred,
        radius: q.value,
    })
}

/// Fraction of truths contained in their sets.
pub fn evaluate_coverage<S: PredictionSet>(sets: &[S], truths: &[S::Truth]) -> Result<f64> {
    if sets.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} sets but {} truths",
            sets.len(),
            truths.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::Contract("coverage of an empty test set is undefined".into()));
    }
    let hits = sets.iter().zip(truths).filter(|(s, t)| s.contains(t)).count();
    Ok(hits as f64 / sets.len() as f64)
}

pub fn average_set_size(sets: &[ClassPredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Contract("average set size of no sets is undefined".into()));
    }
    Ok(sets.iter().map(ClassPredictionSet::len).sum::<usize>() as f64 / sets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64], kind: ScoreKind) -> CalibrationScores {
        CalibrationScores::new(v.to_vec(), kind).unwrap()
    }

    fn class_q(value: f64) -> ConformalQuantile {
        ConformalQuantile {
            value,
            alpha: 0.1,
            n: 10,
            k_index: 1,
            kind: ScoreKind::Classification,
        }
    }

    #[test]
    fn single_score() {
        let q = conformal_quantile(&scores(&[0.5], ScoreKind::Distance), 0.5).unwrap();
        assert_eq!((q.k_index, q.value), (1, 0.5));
    }

    #[test]
    fn ten_scores() {
        let cal: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let cal = scores(&cal, ScoreKind::Distance);
        let q = conformal_quantile(&cal, 0.1).unwrap();
        assert_eq!((q.k_index, q.value), (10, 1.0));
        let q = conformal_quantile(&cal, 0.05).unwrap();
        assert_eq!(q.k_index, 11);
        assert_eq!(q.value, f64::INFINITY);
        let q = conformal_quantile(&cal, 1.0).unwrap();
        assert_eq!(q.k_index, 0);
        assert_eq!(q.value, f64::NEG_INFINITY);
    }

    #[test]
    fn rank_snaps_integral_products() {
        // 10 * (1 - 0.1) is 9 in exact arithmetic
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(99, 0.29), 71);
        assert_eq!(conformal_rank(10, 0.0), 11);
    }

    #[test]
    fn alpha_outside_unit_interval() {
        let cal = scores(&[0.5], ScoreKind::Distance);
        assert!(conformal_quantile(&cal, -0.1).is_err());
        assert!(conformal_quantile(&cal, 1.1).is_err());
    }

    #[test]
    fn class_sets() {
        assert_eq!(
            class_prediction_set(&[1.0, 0.0, 0.0], &class_q(0.5)).unwrap().members(),
            &[0]
        );
        // scores 0.5, 0.7, 0.8; 0.7 <= 0.7 is included
        assert_eq!(
            class_prediction_set(&[0.5, 0.3, 0.2], &class_q(0.7)).unwrap().members(),
            &[0, 1]
        );
        assert_eq!(
            class_prediction_set(&[0.5, 0.3, 0.2], &class_q(f64::INFINITY))
                .unwrap()
                .len(),
            3
        );
        assert!(class_prediction_set(&[0.5, 0.3, 0.2], &class_q(f64::NEG_INFINITY))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn kind_mismatch() {
        let mut q = class_q(1.0);
        assert!(region_prediction_set(&Coords::new(0.0, 0.0), &q).is_err());
        q.kind = ScoreKind::Distance;
        assert!(class_prediction_set(&[1.0], &q).is_err());
    }

    #[test]
    fn region_boundary() {
        let q = ConformalQuantile {
            kind: ScoreKind::Distance,
            ..class_q(5.0)
        };
        let r = region_prediction_set(&Coords::new(0.0, 0.0), &q).unwrap();
        assert!(r.contains(&Coords::new(3.0, 4.0)));
        assert!(!r.contains(&Coords::new(3.0, 4.01)));

        let point = RegionPredictionSet {
            center: Coords::new(1.0, 1.0),
            radius: 0.0,
        };
        assert!(point.contains(&Coords::new(1.0, 1.0)));
        assert!(!point.contains(&Coords::new(1.0, 1.0 + 1e-12)));
    }

    #[test]
    fn coverage_counts() {
        let full = RegionPredictionSet {
            center: Coords::new(0.0, 0.0),
            radius: f64::INFINITY,
        };
        let empty = RegionPredictionSet {
            radius: f64::NEG_INFINITY,
            ..full
        };
        let far = Coords::new(1e9, -1e9);
        assert_eq!(evaluate_coverage(&[full, full], &[far, far]).unwrap(), 1.0);
        assert_eq!(
            evaluate_coverage(&[empty, empty], &[far, Coords::new(0.0, 0.0)]).unwrap(),
            0.0
        );
        assert!(evaluate_coverage(&[full], &[far, far]).is_err());
        assert!(evaluate_coverage::<RegionPredictionSet>(&[], &[]).is_err());
    }

    #[test]
    fn ten_hand_cases_seven_hits() {
        let set = class_prediction_set(&[0.6, 0.4, 0.0], &class_q(0.6)).unwrap(); // {0, 1}
        let sets = vec![set; 10];
        let truths = [0, 1, 2, 0, 2, 1, 1, 2, 0, 0];
        assert_eq!(evaluate_coverage(&sets, &truths).unwrap(), 0.7);
    }

    #[test]
    fn set_sizes() {
        let singleton = ClassPredictionSet { members: vec![2] };
        assert_eq!(average_set_size(&[singleton.clone(), singleton]).unwrap(), 1.0);
        let sized = |n: usize| ClassPredictionSet {
            members: (0..n).collect(),
        };
        assert_eq!(
            average_set_size(&[sized(0), sized(1), sized(2), sized(3)]).unwrap(),
            1.5
        );
        assert!(average_set_size(&[]).is_err());
    }
}
