//! Conformal risk control over navigation paths.
//!
//! A path is the exchangeable calibration unit. For each calibration path we
//! evaluate a bounded loss `L_i(λ)` on a finite grid of squared-error
//! thresholds λ (m²), then pick
//!
//! ```text
//! λ̂ = min { λ in grid : R̂_n(λ) <= β - (B - β) / n },   R̂_n(λ) = mean_i L_i(λ)
//! ```
//!
//! which bounds the expected loss of a fresh exchangeable path by β. The two
//! path losses are the per-path false discovery proportion (non-increasing in
//! λ) and false negative proportion (non-decreasing in λ; calibrated by
//! scanning the grid from the top, i.e. under `t = λ_max - λ`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use csv::{ReaderBuilder, Trim};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{wap_column_name, Coords, Fingerprint, SyntheticWorld};
use crate::error::{Error, Result};
use crate::predictor::KnnModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    /// Raw dBm readings.
    pub fingerprint: Fingerprint,
    pub truth: Coords,
    pub predicted: Option<Coords>,
    /// `true` when the point belongs to the ground-truth path.
    pub membership: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    id: u64,
    samples: Vec<PathSample>,
}

impl Path {
    pub fn new(id: u64, samples: Vec<PathSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation(format!("path {id} has no samples")));
        }
        Ok(Self { id, samples })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn samples(&self) -> &[PathSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fills every sample's prediction from the model (raw fingerprints are
    /// normalized with the model's training parameters).
    pub fn predict_with(mut self, model: &KnnModel) -> Result<Self> {
        for s in &mut self.samples {
            s.predicted = Some(model.predict_raw(&s.fingerprint)?.coords);
        }
        Ok(self)
    }

    /// `|truth - predicted|²` per sample.
    pub fn squared_errors(&self) -> Result<Vec<f64>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(seq, s)| {
                s.predicted
                    .map(|p| s.truth.squared_distance(&p))
                    .ok_or_else(|| Error::Contract(format!("path {} sample {seq} has no prediction", self.id)))
            })
            .collect()
    }
}

fn proportion(hits: usize, denominator: usize) -> f64 {
    hits as f64 / denominator.max(1) as f64
}

/// Share of path members whose squared error exceeds λ.
pub fn fdr_path_loss(path: &Path, lambda: f64) -> Result<f64> {
    let errors = path.squared_errors()?;
    let members = path.samples.iter().filter(|s| s.membership).count();
    let excessive = path
        .samples
        .iter()
        .zip(&errors)
        .filter(|(s, e)| s.membership && **e > lambda)
        .count();
    Ok(proportion(excessive, members))
}

/// Share of non-members whose squared error is at most λ.
pub fn fnr_path_loss(path: &Path, lambda: f64) -> Result<f64> {
    let errors = path.squared_errors()?;
    let outsiders = path.samples.iter().filter(|s| !s.membership).count();
    let accurate = path
        .samples
        .iter()
        .zip(&errors)
        .filter(|(s, e)| !s.membership && **e <= lambda)
        .count();
    Ok(proportion(accurate, outsiders))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    NonIncreasing,
    NonDecreasing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossFamily {
    Fdr,
    Fnr,
    /// Mean over samples of `min(e², clip)` for members with `e² > λ`.
    ClippedSquaredFdr {
        clip: f64,
    },
    /// Mean over samples of `min(e², clip)` for non-members with `e² <= λ`.
    ClippedSquaredFnr {
        clip: f64,
    },
}

impl LossFamily {
    pub fn direction(&self) -> Direction {
        match self {
            LossFamily::Fdr | LossFamily::ClippedSquaredFdr { .. } => Direction::NonIncreasing,
            LossFamily::Fnr | LossFamily::ClippedSquaredFnr { .. } => Direction::NonDecreasing,
        }
    }

    /// Upper bound `B` of the loss.
    pub fn bound(&self) -> f64 {
        match self {
            LossFamily::Fdr | LossFamily::Fnr => 1.0,
            LossFamily::ClippedSquaredFdr { clip } | LossFamily::ClippedSquaredFnr { clip } => *clip,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossFamily::Fdr => "fdr",
            LossFamily::Fnr => "fnr",
            LossFamily::ClippedSquaredFdr { .. } => "fdr_sq",
            LossFamily::ClippedSquaredFnr { .. } => "fnr_sq",
        }
    }

    pub fn loss(&self, path: &Path, lambda: f64) -> Result<f64> {
        match *self {
            LossFamily::Fdr => fdr_path_loss(path, lambda),
            LossFamily::Fnr => fnr_path_loss(path, lambda),
            LossFamily::ClippedSquaredFdr { clip } => clipped_squared_loss(path, lambda, clip, true),
            LossFamily::ClippedSquaredFnr { clip } => clipped_squared_loss(path, lambda, clip, false),
        }
    }
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdr" => Ok(LossFamily::Fdr),
            "fnr" => Ok(LossFamily::Fnr),
            other => Err(Error::Config(format!(
                "unknown risk family `{other}` (expected fdr or fnr)"
            ))),
        }
    }
}

fn clipped_squared_loss(path: &Path, lambda: f64, clip: f64, members: bool) -> Result<f64> {
    if !(clip.is_finite() && clip > 0.0) {
        return Err(Error::Config(format!("loss clip must be positive, got {clip}")));
    }
    let errors = path.squared_errors()?;
    let total: f64 = path
        .samples
        .iter()
        .zip(&errors)
        .filter(|(s, e)| {
            if members {
                s.membership && **e > lambda
            } else {
                !s.membership && **e <= lambda
            }
        })
        .map(|(_, e)| e.min(clip))
        .sum();
    Ok(total / path.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskConfig {
    pub beta: f64,
    pub bound: f64,
    pub lambda_grid: Vec<f64>,
    pub direction: Direction,
}

impl RiskConfig {
    pub fn for_family(family: LossFamily, beta: f64, lambda_grid: Vec<f64>) -> Self {
        Self {
            beta,
            bound: family.bound(),
            lambda_grid,
            direction: family.direction(),
        }
    }

    /// Accepts `0 < beta <= bound`; `beta == bound` is the vacuous
    /// constraint every λ satisfies.
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.lambda_grid)?;
        if !(self.bound.is_finite() && self.beta > 0.0 && self.beta <= self.bound) {
            return Err(Error::Config(format!(
                "need 0 < beta <= B, got beta = {}, B = {}",
                self.beta, self.bound
            )));
        }
        Ok(())
    }

    /// `β - (B - β) / n`.
    pub fn threshold(&self, n: usize) -> f64 {
        self.beta - (self.bound - self.beta) / n as f64
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !l.is_finite()) {
        return Err(Error::Config("lambda grid must be finite".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("lambda grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Per-path losses on a λ grid, `losses[path][grid_index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    grid: Vec<f64>,
    path_ids: Vec<u64>,
    losses: Vec<Vec<f64>>,
}

impl LossCurve {
    pub fn evaluate(paths: &[Path], grid: &[f64], family: LossFamily) -> Result<Self> {
        validate_grid(grid)?;
        let losses = paths
            .iter()
            .map(|p| grid.iter().map(|&l| family.loss(p, l)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.to_vec(),
            path_ids: paths.iter().map(Path::id).collect(),
            losses,
        })
    }

    /// Curve from precomputed rows; each row must have one entry per grid point.
    pub fn from_rows(grid: Vec<f64>, path_ids: Vec<u64>, losses: Vec<Vec<f64>>) -> Result<Self> {
        validate_grid(&grid)?;
        if path_ids.len() != losses.len() {
            return Err(Error::Contract("one path id per loss row required".into()));
        }
        if let Some((i, row)) = losses.iter().enumerate().find(|(_, r)| r.len() != grid.len()) {
            return Err(Error::Contract(format!(
                "loss row of path {} has {} entries, grid has {}",
                path_ids[i],
                row.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, path_ids, losses })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.losses
    }

    pub fn path_ids(&self) -> &[u64] {
        &self.path_ids
    }

    pub fn num_paths(&self) -> usize {
        self.losses.len()
    }

    /// Reports the first row that is not monotone in `direction`.
    pub fn check_monotone(&self, direction: Direction) -> Result<()> {
        for (id, row) in self.path_ids.iter().zip(&self.losses) {
            let bad = row.windows(2).position(|w| match direction {
                Direction::NonIncreasing => w[1] > w[0],
                Direction::NonDecreasing => w[1] < w[0],
            });
            if let Some(j) = bad {
                return Err(Error::Validation(format!(
                    "loss of path {id} is not {direction:?} between λ = {} and λ = {}",
                    self.grid[j],
                    self.grid[j + 1]
                )));
            }
        }
        Ok(())
    }
}

/// `R̂_n(λ_j)`, the mean loss over paths at grid index `j`.
pub fn empirical_risk(curve: &LossCurve, grid_index: usize) -> Result<f64> {
    if grid_index >= curve.grid.len() {
        return Err(Error::Contract(format!(
            "grid index {grid_index} out of range for {} grid points",
            curve.grid.len()
        )));
    }
    if curve.losses.is_empty() {
        return Err(Error::Contract("empirical risk of zero paths is undefined".into()));
    }
    let total: f64 = curve.losses.iter().map(|row| row[grid_index]).sum();
    Ok(total / curve.losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaCalibration {
    pub lambda_hat: f64,
    pub grid_index: usize,
    /// `β - (B - β) / n`.
    pub threshold: f64,
    /// `R̂_n(λ̂)`.
    pub empirical_risk: f64,
    /// Whether some grid point met the threshold; otherwise λ̂ is the
    /// grid end and validity rests on that end having loss <= β.
    pub feasible: bool,
    /// Some calibration path has loss above β at the grid end the search
    /// falls back to, so that fallback is not guaranteed to be safe.
    pub grid_end_violation: bool,
}

pub fn calibrate_lambda(curve: &LossCurve, config: &RiskConfig) -> Result<LambdaCalibration> {
    config.validate()?;
    if curve.grid != config.lambda_grid {
        return Err(Error::Contract("loss curve and config use different λ grids".into()));
    }
    let n = curve.num_paths();
    if n == 0 {
        return Err(Error::Contract("calibration needs at least one path".into()));
    }
    curve.check_monotone(config.direction)?;
    if let Some((id, v)) = curve
        .path_ids
        .iter()
        .zip(&curve.losses)
        .flat_map(|(id, row)| row.iter().map(move |v| (id, *v)))
        .find(|(_, v)| !(v.is_finite() && *v <= config.bound))
    {
        return Err(Error::Validation(format!(
            "loss {v} of path {id} exceeds the bound B = {}",
            config.bound
        )));
    }

    let threshold = config.threshold(n);
    let last = curve.grid.len() - 1;
    let order: Box<dyn Iterator<Item = usize>> = match config.direction {
        Direction::NonIncreasing => Box::new(0..=last),
        Direction::NonDecreasing => Box::new((0..=last).rev()),
    };
    let fallback = match config.direction {
        Direction::NonIncreasing => last,
        Direction::NonDecreasing => 0,
    };

    let mut found = None;
    for j in order {
        let risk = empirical_risk(curve, j)?;
        if risk <= threshold {
            found = Some((j, risk));
            break;
        }
    }
    let grid_end_violation = curve.losses.iter().any(|row| row[fallback] > config.beta);
    let (grid_index, risk, feasible) = match found {
        Some((j, risk)) => (j, risk, true),
        None => (fallback, empirical_risk(curve, fallback)?, false),
    };
    Ok(LambdaCalibration {
        lambda_hat: curve.grid[grid_index],
        grid_index,
        threshold,
        empirical_risk: risk,
        feasible,
        grid_end_violation,
    })
}

/// Mean loss of `family` at `lambda_hat` over held-out paths.
pub fn evaluate_risk(lambda_hat: f64, test_paths: &[Path], family: LossFamily) -> Result<f64> {
    if test_paths.is_empty() {
        return Err(Error::Contract("risk evaluation needs at least one test path".into()));
    }
    let total = test_paths
        .iter()
        .map(|p| family.loss(p, lambda_hat))
        .sum::<Result<f64>>()?;
    Ok(total / test_paths.len() as f64)
}

fn all_squared_errors(paths: &[Path]) -> Result<Vec<f64>> {
    let mut errors = Vec::new();
    for p in paths {
        errors.extend(p.squared_errors()?);
    }
    if errors.is_empty() {
        return Err(Error::Contract("no path samples to build a λ grid from".into()));
    }
    errors.sort_by(f64::total_cmp);
    Ok(errors)
}

/// `0` followed by `points - 1` geometrically spaced values from the
/// smallest positive to the largest observed squared error (inclusive).
pub fn default_lambda_grid(paths: &[Path], points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Config("a default λ grid needs at least 2 points".into()));
    }
    let errors = all_squared_errors(paths)?;
    let hi = *errors.last().unwrap();
    let Some(&lo) = errors.iter().find(|e| **e > 0.0) else {
        return Ok(vec![0.0]);
    };
    let mut grid = vec![0.0];
    if lo == hi {
        grid.push(hi);
        return Ok(grid);
    }
    let steps = (points - 2) as f64;
    let ratio = (hi / lo).ln();
    grid.extend((0..points - 1).map(|i| {
        if i == points - 2 {
            hi
        } else {
            lo * (ratio * i as f64 / steps).exp()
        }
    }));
    grid.dedup();
    Ok(grid)
}

/// `0` plus every distinct observed squared error: the step points of both
/// indicator losses, so the infimum over this grid is the exact one.
pub fn exact_lambda_grid(paths: &[Path]) -> Result<Vec<f64>> {
    let mut errors = all_squared_errors(paths)?;
    errors.insert(0, 0.0);
    errors.dedup();
    Ok(errors)
}

/// Random-walk routes through a synthetic world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteConfig {
    pub num_paths: usize,
    pub length: usize,
    /// Probability that a point is a ground-truth path member.
    pub membership_rate: f64,
    pub step_m: f64,
    /// Standard deviation of the heading change per step, radians.
    pub turn_sigma: f64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            num_paths: 50,
            length: 30,
            membership_rate: 0.4,
            step_m: 1.5,
            turn_sigma: 0.3,
        }
    }
}

/// Routes with raw fingerprints observed along each walk; predictions are
/// left empty. Walks reflect off the area boundary and stay on one floor.
pub fn generate_routes<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    config: &RouteConfig,
    first_id: u64,
    rng: &mut R,
) -> Result<Vec<Path>> {
    if config.length == 0
        || !(0.0..=1.0).contains(&config.membership_rate)
        || config.step_m.is_nan()
        || config.step_m <= 0.0
    {
        return Err(Error::Config(format!("invalid route config {config:?}")));
    }
    let turn = Normal::new(0.0, config.turn_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let (width, height) = (world.config().width, world.config().height);
    let reflect = |v: f64, hi: f64| {
        let period = 2.0 * hi;
        let m = v.rem_euclid(period);
        if m > hi {
            period - m
        } else {
            m
        }
    };

    (0..config.num_paths)
        .map(|i| {
            let (mut pos, floor) = world.random_location(rng);
            let mut heading = rng.random::<f64>() * std::f64::consts::TAU;
            let mut samples = Vec::with_capacity(config.length);
            for step in 0..config.length {
                if step > 0 {
                    heading += turn.sample(rng);
                    pos = Coords::new(
                        reflect(pos.longitude + config.step_m * heading.cos(), width),
                        reflect(pos.latitude + config.step_m * heading.sin(), height),
                    );
                }
                let membership = rng.random_bool(config.membership_rate);
                samples.push(PathSample {
                    fingerprint: world.fingerprint_at(&pos, floor, rng),
                    truth: pos,
                    predicted: None,
                    membership,
                });
            }
            Path::new(first_id + i as u64, samples)
        })
        .collect()
}

/// Path file: `PATH_ID,SEQ,WAP001..WAPnnn,LONGITUDE,LATITUDE,MEMBERSHIP`,
/// plus `PRED_LON,PRED_LAT` when every sample carries a prediction.
pub fn write_paths(paths: &[Path]) -> Result<String> {
    let Some(first) = paths.first() else {
        return Err(Error::Contract("no paths to write".into()));
    };
    let width = first.samples[0].fingerprint.len();
    let with_predictions = paths.iter().flat_map(|p| &p.samples).all(|s| s.predicted.is_some());
    let mut out = String::from("PATH_ID,SEQ,");
    for i in 1..=width {
        out.push_str(&wap_column_name(i));
        out.push(',');
    }
    out.push_str("LONGITUDE,LATITUDE,MEMBERSHIP");
    if with_predictions {
        out.push_str(",PRED_LON,PRED_LAT");
    }
    out.push('\n');
    for p in paths {
        for (seq, s) in p.samples.iter().enumerate() {
            if s.fingerprint.len() != width {
                return Err(Error::Validation(format!(
                    "path {} sample {seq} has a different width",
                    p.id
                )));
            }
            write!(out, "{},{seq},", p.id).unwrap();
            for v in s.fingerprint.values() {
                write!(out, "{v},").unwrap();
            }
            write!(
                out,
                "{},{},{}",
                s.truth.longitude,
                s.truth.latitude,
                u8::from(s.membership)
            )
            .unwrap();
            if let (true, Some(pred)) = (with_predictions, s.predicted) {
                write!(out, ",{},{}", pred.longitude, pred.latitude).unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Reads a path file; samples are ordered by `SEQ` within each `PATH_ID`
/// and paths by id.
pub fn read_paths(csv_text: &str) -> Result<Vec<Path>> {
    let mut reader = ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(Trim::All)
        .from_reader(csv_text.as_bytes());
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingColumn { column: name.into() })
    };
    let (id_col, seq_col) = (find("PATH_ID")?, find("SEQ")?);
    let (lon_col, lat_col, member_col) = (find("LONGITUDE")?, find("LATITUDE")?, find("MEMBERSHIP")?);
    let prediction_cols = match (find("PRED_LON"), find("PRED_LAT")) {
        (Ok(a), Ok(b)) => Some((a, b)),
        _ => None,
    };
    let width = names
        .iter()
        .filter(|n| n.len() > 3 && n.starts_with("WAP") && n[3..].bytes().all(|b| b.is_ascii_digit()))
        .count();
    let wap_cols = (1..=width)
        .map(|i| find(&wap_column_name(i)))
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: BTreeMap<u64, Vec<(u64, PathSample)>> = BTreeMap::new();
    for (row_index, row) in reader.records().enumerate() {
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::RaggedRow {
                line: pos.as_ref().map_or(row_index as u64 + 2, |p| p.line()),
                expected: *expected_len as usize,
                found: *len as usize,
            },
            _ => Error::Csv(e),
        })?;
        let line = row.position().map_or(row_index as u64 + 2, |p| p.line());
        let parse = |col: usize| -> Result<f64> {
            let raw = row.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                column: names[col].clone(),
                message: format!("cannot parse `{raw}` as a number"),
            })
        };
        let int = |col: usize| -> Result<u64> {
            let raw = row.get(col).unwrap_or("");
            raw.parse::<u64>().map_err(|_| Error::Parse {
                line,
                column: names[col].clone(),
                message: format!("cannot parse `{raw}` as a non-negative integer"),
            })
        };
        let membership = match int(member_col)? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Parse {
                    line,
                    column: "MEMBERSHIP".into(),
                    message: format!("membership must be 0 or 1, got {other}"),
                })
            }
        };
        let predicted = match prediction_cols {
            Some((a, b)) => Some(Coords::new(parse(a)?, parse(b)?)),
            None => None,
        };
        let sample = PathSample {
            fingerprint: Fingerprint::new(wap_cols.iter().map(|&c| parse(c)).collect::<Result<_>>()?),
            truth: Coords::new(parse(lon_col)?, parse(lat_col)?),
            predicted,
            membership,
        };
        grouped.entry(int(id_col)?).or_default().push((int(seq_col)?, sample));
    }

    grouped
        .into_iter()
        .map(|(id, mut samples)| {
            samples.sort_by_key(|(seq, _)| *seq);
            if samples.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Validation(format!("path {id} repeats a SEQ value")));
            }
            Path::new(id, samples.into_iter().map(|(_, s)| s).collect())
        })
        .collect()
}
