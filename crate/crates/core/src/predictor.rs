//! Base positioning models behind conformal calibration: a weighted k-NN
//! fingerprint matcher and a table of externally computed predictions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use csv::{ReaderBuilder, Trim};

use crate::dataset::{Coords, Dataset, Fingerprint, Record, RssiNormalizer};
use crate::error::{Error, Result};

/// Tolerance on probability vectors produced in memory.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Tolerance on imported probability rows; rows inside it are renormalized.
pub const IMPORT_PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Regularizer in inverse-distance weights, `1 / (d + eps)`.
pub const INVERSE_DISTANCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub coords: Coords,
    pub building_probs: Vec<f64>,
    pub floor_probs: Vec<f64>,
}

impl PredictionOutput {
    pub fn validate(&self) -> Result<()> {
        check_probs(&self.building_probs, "building", PROB_SUM_TOLERANCE)?;
        check_probs(&self.floor_probs, "floor", PROB_SUM_TOLERANCE)?;
        Ok(())
    }
}

fn check_probs(probs: &[f64], head: &str, tolerance: f64) -> Result<f64> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Validation(format!(
            "{head} probabilities must be finite and non-negative: {probs:?}"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(Error::Validation(format!(
            "{head} probabilities sum to {sum}, expected 1 within {tolerance:e}"
        )));
    }
    Ok(sum)
}

/// Anything that can produce a prediction for a dataset record.
pub trait PredictionSource {
    fn prediction_for(&self, record: &Record) -> Result<PredictionOutput>;

    /// Rejects datasets the source cannot serve (wrong width, normalization).
    fn check_dataset(&self, _dataset: &Dataset) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    InverseDistance,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "inverse_distance" => Ok(Weighting::InverseDistance),
            other => Err(Error::Config(format!(
                "unknown k-NN weighting `{other}` (expected uniform or inverse_distance)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMetric {
    /// Euclidean distance between normalized RSSI vectors.
    #[default]
    EuclideanNormalizedRssi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub weighting: Weighting,
    pub distance: DistanceMetric,
}

impl KnnConfig {
    pub fn new(k: usize, weighting: Weighting) -> Self {
        Self {
            k,
            weighting,
            distance: DistanceMetric::EuclideanNormalizedRssi,
        }
    }
}

/// Squared Euclidean distance summed in coordinate order, or `None` as soon
/// as the running sum reaches `bound`.
fn bounded_squared_distance(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut sum = 0.0;
    for (ca, cb) in a.chunks(16).zip(b.chunks(16)) {
        for (x, y) in ca.iter().zip(cb) {
            sum += (x - y) * (x - y);
        }
        if sum >= bound {
            return None;
        }
    }
    Some(sum)
}

/// Ordered by squared distance, then training index.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

/// A fitted k-NN matcher. Immutable after `fit_knn`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    config: KnnConfig,
    train: Vec<Record>,
    num_aps: usize,
    num_floors: u32,
    num_buildings: u32,
    normalizer: RssiNormalizer,
}

pub fn fit_knn(train: &Dataset, config: &KnnConfig) -> Result<KnnModel> {
    let normalizer = *train
        .normalizer()
        .ok_or_else(|| Error::State("k-NN must be fitted on a normalized dataset".into()))?;
    if train.is_empty() {
        return Err(Error::Config("cannot fit k-NN on an empty training set".into()));
    }
    if config.k == 0 || config.k > train.len() {
        return Err(Error::Config(format!(
            "k = {} must lie in [1, {}] (training-set size)",
            config.k,
            train.len()
        )));
    }
    Ok(KnnModel {
        config: *config,
        train: train.records().to_vec(),
        num_aps: train.num_aps(),
        num_floors: train.num_floors(),
        num_buildings: train.num_buildings(),
        normalizer,
    })
}

impl KnnModel {
    pub fn config(&self) -> &KnnConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &RssiNormalizer {
        &self.normalizer
    }

    pub fn training_records(&self) -> &[Record] {
        &self.train
    }

    pub fn num_floors(&self) -> u32 {
        self.num_floors
    }

    pub fn num_buildings(&self) -> u32 {
        self.num_buildings
    }

    /// The `k` nearest training indices with their distances, nearest first;
    /// equal distances are ordered by training index.
    pub fn neighbors(&self, x: &Fingerprint) -> Result<Vec<(usize, f64)>> {
        if x.len() != self.num_aps {
            return Err(Error::Contract(format!(
                "fingerprint has {} values, model expects {}",
                x.len(),
                self.num_aps
            )));
        }
        let k = self.config.k;
        let mut best: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (index, r) in self.train.iter().enumerate() {
            // training points are visited in index order, so a later point
            // must be strictly closer than the current k-th to displace it
            let bound = match best.peek() {
                Some(worst) if best.len() == k => worst.d2,
                _ => f64::INFINITY,
            };
            if let Some(d2) = bounded_squared_distance(r.fingerprint.values(), x.values(), bound) {
                best.push(Candidate { d2, index });
                if best.len() > k {
                    best.pop();
                }
            }
        }
        Ok(best
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.d2.sqrt()))
            .collect())
    }

    pub fn predict(&self, x: &Fingerprint) -> Result<PredictionOutput> {
        let neighbors = self.neighbors(x)?;
        let weights: Vec<f64> = neighbors
            .iter()
            .map(|&(_, d)| match self.config.weighting {
                Weighting::Uniform => 1.0,
                Weighting::InverseDistance => 1.0 / (d + INVERSE_DISTANCE_EPS),
            })
            .collect();
        let total: f64 = weights.iter().sum();

        let (mut lon, mut lat) = (0.0, 0.0);
        let mut building_probs = vec![0.0; self.num_buildings as usize];
        let mut floor_probs = vec![0.0; self.num_floors as usize];
        for (&(i, _), &w) in neighbors.iter().zip(&weights) {
            let label = &self.train[i].label;
            lon += w * label.position.longitude;
            lat += w * label.position.latitude;
            building_probs[label.building as usize] += w;
            floor_probs[label.floor as usize] += w;
        }
        building_probs.iter_mut().for_each(|p| *p /= total);
        floor_probs.iter_mut().for_each(|p| *p /= total);

        Ok(PredictionOutput {
            coords: Coords::new(lon / total, lat / total),
            building_probs,
            floor_probs,
        })
    }

    /// Normalizes a raw dBm fingerprint with the training set's parameters,
    /// then predicts.
    pub fn predict_raw(&self, raw: &Fingerprint) -> Result<PredictionOutput> {
        self.predict(&self.normalizer.apply(raw))
    }

    /// Predictions for every record of `dataset`, keyed by record id.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<PredictionTable> {
        self.check_dataset(dataset)?;
        let mut entries = BTreeMap::new();
        for r in dataset.records() {
            entries.insert(r.id, self.predict(&r.fingerprint)?);
        }
        Ok(PredictionTable {
            entries,
            num_buildings: self.num_buildings,
            num_floors: self.num_floors,
        })
    }
}

impl PredictionSource for KnnModel {
    fn prediction_for(&self, record: &Record) -> Result<PredictionOutput> {
        self.predict(&record.fingerprint)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.num_aps() != self.num_aps {
            return Err(Error::Contract(format!(
                "dataset has {} access points, model expects {}",
                dataset.num_aps(),
                self.num_aps
            )));
        }
        if dataset.normalizer() != Some(&self.normalizer) {
            return Err(Error::Contract(format!(
                "dataset normalization {:?} differs from the model's {}",
                dataset.normalization().map(|s| s.as_str()),
                self.normalizer.scheme().as_str()
            )));
        }
        if dataset.num_floors() > self.num_floors || dataset.num_buildings() > self.num_buildings {
            return Err(Error::Contract(
                "dataset declares more floors or buildings than the model was fitted with".into(),
            ));
        }
        Ok(())
    }
}

/// Predictions keyed by record id, typically imported from an external model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    entries: BTreeMap<u64, PredictionOutput>,
    num_buildings: u32,
    num_floors: u32,
}

impl PredictionTable {
    pub fn get(&self, id: u64) -> Option<&PredictionOutput> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &PredictionOutput)> {
        self.entries.iter().map(|(id, p)| (*id, p))
    }

    /// Merges two tables with the same class layout. Ids must not collide.
    pub fn merge(mut self, other: PredictionTable) -> Result<PredictionTable> {
        if (self.num_buildings, self.num_floors) != (other.num_buildings, other.num_floors) {
            return Err(Error::Contract(
                "cannot merge tables with different class counts".into(),
            ));
        }
        for (id, p) in other.entries {
            if self.entries.insert(id, p).is_some() {
                return Err(Error::Validation(format!("duplicate prediction id {id}")));
            }
        }
        Ok(self)
    }
}

impl PredictionSource for PredictionTable {
    fn prediction_for(&self, record: &Record) -> Result<PredictionOutput> {
        self.entries.get(&record.id).cloned().ok_or(Error::MissingPredictions {
            missing: vec![record.id],
        })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let missing: Vec<u64> = dataset
            .records()
            .iter()
            .map(|r| r.id)
            .filter(|id| !self.entries.contains_key(id))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingPredictions { missing })
        }
    }
}

fn prediction_header(num_buildings: u32, num_floors: u32) -> Vec<String> {
    let mut cols = vec!["ID".to_string(), "PRED_LON".into(), "PRED_LAT".into()];
    cols.extend((0..num_buildings).map(|b| format!("P_BLDG_{b}")));
    cols.extend((0..num_floors).map(|f| format!("P_FLOOR_{f}")));
    cols
}

/// Reads `ID,PRED_LON,PRED_LAT,P_BLDG_0..,P_FLOOR_0..` with the class counts
/// of `expected`. Every record of `expected` must be present exactly once;
/// extra ids are kept. Probability rows summing within 1e-6 of one are
/// renormalized when they miss the 1e-9 in-memory tolerance.
pub fn import_predictions(csv_text: &str, expected: &Dataset) -> Result<PredictionTable> {
    let (nb, nf) = (expected.num_buildings(), expected.num_floors());
    let header = prediction_header(nb, nf);
    let mut reader = ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(Trim::All)
        .from_reader(csv_text.as_bytes());
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut columns = Vec::with_capacity(header.len());
    for name in &header {
        match found.iter().position(|f| f == name) {
            Some(c) => columns.push(c),
            None => return Err(Error::MissingColumn { column: name.clone() }),
        }
    }

    let mut entries = BTreeMap::new();
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
        let field = |k: usize| row.get(columns[k]).unwrap_or("");
        let parse_err = |k: usize| Error::Parse {
            line,
            column: header[k].clone(),
            message: format!("cannot parse `{}`", field(k)),
        };
        let id: u64 = field(0).parse().map_err(|_| parse_err(0))?;
        let mut numbers = Vec::with_capacity(header.len() - 1);
        for k in 1..header.len() {
            numbers.push(field(k).parse::<f64>().map_err(|_| parse_err(k))?);
        }
        let coords = Coords::new(numbers[0], numbers[1]);
        if !coords.is_finite() {
            return Err(Error::Validation(format!(
                "line {line}: predicted coordinates not finite"
            )));
        }
        let mut building_probs = numbers[2..2 + nb as usize].to_vec();
        let mut floor_probs = numbers[2 + nb as usize..].to_vec();
        for (probs, head) in [(&mut building_probs, "building"), (&mut floor_probs, "floor")] {
            let sum = check_probs(probs, head, IMPORT_PROB_SUM_TOLERANCE)
                .map_err(|e| Error::Validation(format!("line {line} (id {id}): {e}")))?;
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                probs.iter_mut().for_each(|p| *p /= sum);
            }
        }
        let prediction = PredictionOutput {
            coords,
            building_probs,
            floor_probs,
        };
        if entries.insert(id, prediction).is_some() {
            return Err(Error::Validation(format!("line {line}: duplicate prediction id {id}")));
        }
    }

    let table = PredictionTable {
        entries,
        num_buildings: nb,
        num_floors: nf,
    };
    table.check_dataset(expected)?;
    Ok(table)
}

/// Writes a table in the import schema, ids ascending, shortest round-trip
/// number formatting, LF line endings.
pub fn export_predictions(table: &PredictionTable) -> String {
    let mut out = prediction_header(table.num_buildings, table.num_floors).join(",");
    out.push('\n');
    for (id, p) in &table.entries {
        write!(out, "{id},{},{}", p.coords.longitude, p.coords.latitude).unwrap();
        for v in p.building_probs.iter().chain(&p.floor_probs) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
