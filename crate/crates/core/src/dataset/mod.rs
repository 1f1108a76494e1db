//! Fingerprint datasets: UJIIndoorLoc-format ingestion, RSSI normalization,
//! seeded train/calibration/test splitting and a synthetic log-distance world.

mod synthetic;
mod uji;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, log_distance_rssi, AccessPoint, SyntheticWorld, SyntheticWorldConfig};
pub use uji::{parse_ujiindoorloc, to_ujiindoorloc_csv, wap_column_name};

/// RSSI value UJIIndoorLoc uses for "access point not detected".
pub const SENTINEL_DBM: f64 = 100.0;

/// Weakest RSSI the UJIIndoorLoc scale represents.
pub const MIN_RSSI_DBM: f64 = -104.0;

/// Strongest RSSI the UJIIndoorLoc scale represents.
pub const MAX_RSSI_DBM: f64 = 0.0;

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coords {
    pub longitude: f64,
    pub latitude: f64,
}

impl Coords {
    pub const fn new(longitude: f64, latitude: f64) -> Self {
        Self { longitude, latitude }
    }

    pub fn squared_distance(&self, other: &Coords) -> f64 {
        let dx = self.longitude - other.longitude;
        let dy = self.latitude - other.latitude;
        dx * dx + dy * dy
    }

    pub fn distance(&self, other: &Coords) -> f64 {
        self.squared_distance(other).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.longitude.is_finite() && self.latitude.is_finite()
    }
}

/// One RSSI observation vector over the dataset's access points.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint(Vec<f64>);

impl Fingerprint {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn squared_distance(&self, other: &Fingerprint) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionLabel {
    pub position: Coords,
    pub floor: u32,
    pub building: u32,
}

/// A labelled fingerprint. `id` is stable across splits and keys imported
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub fingerprint: Fingerprint,
    pub label: PositionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizationScheme {
    /// Sentinel becomes the global minimum observed value minus 1 dB, then
    /// everything is min-max scaled onto [0, 1].
    MinMaxUnit,
    /// Sentinel becomes 0; a reading `v` becomes `(v + 104) / 104` clipped to [0, 1].
    ZeroPenalty,
}

impl NormalizationScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormalizationScheme::MinMaxUnit => "minmax_unit",
            NormalizationScheme::ZeroPenalty => "zero_penalty",
        }
    }
}

impl std::str::FromStr for NormalizationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax_unit" => Ok(NormalizationScheme::MinMaxUnit),
            "zero_penalty" => Ok(NormalizationScheme::ZeroPenalty),
            other => Err(Error::Config(format!(
                "unknown normalization scheme `{other}` (expected minmax_unit or zero_penalty)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    num_aps: usize,
    num_floors: u32,
    num_buildings: u32,
    normalizer: Option<RssiNormalizer>,
}

impl Dataset {
    /// Builds a raw (unnormalized) dataset. Every fingerprint must have
    /// `num_aps` entries and every label must fall inside the declared
    /// floor/building ranges.
    pub fn new(records: Vec<Record>, num_aps: usize, num_floors: u32, num_buildings: u32) -> Result<Self> {
        for r in &records {
            if r.fingerprint.len() != num_aps {
                return Err(Error::Validation(format!(
                    "record {} has {} RSSI values, dataset declares {num_aps}",
                    r.id,
                    r.fingerprint.len()
                )));
            }
            if r.label.floor >= num_floors || r.label.building >= num_buildings {
                return Err(Error::Validation(format!(
                    "record {} label (floor {}, building {}) outside declared ranges F={num_floors}, B={num_buildings}",
                    r.id, r.label.floor, r.label.building
                )));
            }
        }
        Ok(Self {
            records,
            num_aps,
            num_floors,
            num_buildings,
            normalizer: None,
        })
    }

    /// Same metadata, different records (used for splits).
    fn with_records(&self, records: Vec<Record>) -> Self {
        Self {
            records,
            num_aps: self.num_aps,
            num_floors: self.num_floors,
            num_buildings: self.num_buildings,
            normalizer: self.normalizer,
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    pub fn num_floors(&self) -> u32 {
        self.num_floors
    }

    pub fn num_buildings(&self) -> u32 {
        self.num_buildings
    }

    pub fn normalization(&self) -> Option<NormalizationScheme> {
        self.normalizer.map(|n| n.scheme)
    }

    pub fn normalizer(&self) -> Option<&RssiNormalizer> {
        self.normalizer.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalizer.is_some()
    }
}

/// Fitted parameters of a normalization scheme, reusable on fingerprints
/// observed outside the dataset it was fitted on (e.g. path samples).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssiNormalizer {
    scheme: NormalizationScheme,
    /// dBm value mapped to 0 (also the stand-in for the sentinel).
    floor_dbm: f64,
    /// dBm value mapped to 1.
    ceiling_dbm: f64,
}

impl RssiNormalizer {
    /// Fits `scheme` on the readings of `records`. For `MinMaxUnit` the
    /// sentinel becomes the smallest observed reading minus 1 dB.
    pub fn fit(scheme: NormalizationScheme, records: &[Record]) -> Self {
        match scheme {
            NormalizationScheme::ZeroPenalty => Self {
                scheme,
                floor_dbm: MIN_RSSI_DBM,
                ceiling_dbm: MAX_RSSI_DBM,
            },
            NormalizationScheme::MinMaxUnit => {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in records.iter().flat_map(|r| r.fingerprint.values()) {
                    if *v != SENTINEL_DBM {
                        lo = lo.min(*v);
                        hi = hi.max(*v);
                    }
                }
                if lo.is_finite() {
                    Self {
                        scheme,
                        floor_dbm: lo - 1.0,
                        ceiling_dbm: hi,
                    }
                } else {
                    // nothing was ever detected; every value maps to 0
                    Self {
                        scheme,
                        floor_dbm: f64::INFINITY,
                        ceiling_dbm: f64::INFINITY,
                    }
                }
            }
        }
    }

    pub fn scheme(&self) -> NormalizationScheme {
        self.scheme
    }

    pub fn apply_value(&self, v: f64) -> f64 {
        if v == SENTINEL_DBM || !self.floor_dbm.is_finite() {
            return 0.0;
        }
        let scaled = (v - self.floor_dbm) / (self.ceiling_dbm - self.floor_dbm);
        match self.scheme {
            NormalizationScheme::ZeroPenalty => scaled.clamp(0.0, 1.0),
            NormalizationScheme::MinMaxUnit => scaled,
        }
    }

    pub fn apply(&self, fingerprint: &Fingerprint) -> Fingerprint {
        Fingerprint(fingerprint.0.iter().map(|v| self.apply_value(*v)).collect())
    }
}

/// Maps raw dBm readings onto [0, 1] under `scheme`.
pub fn normalize_rssi(dataset: Dataset, scheme: NormalizationScheme) -> Result<Dataset> {
    if let Some(existing) = dataset.normalizer {
        return Err(Error::State(format!(
            "dataset already normalized with {}",
            existing.scheme.as_str()
        )));
    }
    let normalizer = RssiNormalizer::fit(scheme, &dataset.records);
    let Dataset {
        mut records,
        num_aps,
        num_floors,
        num_buildings,
        ..
    } = dataset;
    for r in &mut records {
        r.fingerprint.0.iter_mut().for_each(|v| *v = normalizer.apply_value(*v));
    }
    Ok(Dataset {
        records,
        num_aps,
        num_floors,
        num_buildings,
        normalizer: Some(normalizer),
    })
}

/// Fractions for the train/calibration/test partition plus the permutation seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub cal_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, cal_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train_fraction,
            cal_fraction,
            test_fraction,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 70/10/20 protocol.
    pub fn standard(seed: u64) -> Self {
        Self {
            train_fraction: 0.7,
            cal_fraction: 0.1,
            test_fraction: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [self.train_fraction, self.cal_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// `(train, cal, test)` sizes for `n` records: calibration and test get
    /// `floor(n * fraction)`, training absorbs the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let cal = floor_count(n, self.cal_fraction);
        let test = floor_count(n, self.test_fraction);
        (n - cal - test, cal, test)
    }
}

// floor(n * f) with a small tolerance so that products that are integers in
// exact arithmetic (e.g. 100 * 0.29) do not round down a whole unit.
fn floor_count(n: usize, fraction: f64) -> usize {
    let exact = n as f64 * fraction;
    let snapped = exact.round();
    if (exact - snapped).abs() <= 1e-9 * exact.max(1.0) {
        snapped as usize
    } else {
        exact.floor() as usize
    }
}

/// Seeded uniform permutation followed by a contiguous train | cal | test cut.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    if n < 10 {
        return Err(Error::Config(format!(
            "splitting needs at least 10 records, dataset has {n}"
        )));
    }
    let (n_train, n_cal, n_test) = spec.sizes(n);
    if n_train == 0 || n_cal == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} records by {:?} leaves an empty part (train {n_train}, cal {n_cal}, test {n_test})",
            (spec.train_fraction, spec.cal_fraction, spec.test_fraction)
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let take = |idx: &[usize]| -> Vec<Record> { idx.iter().map(|&i| dataset.records[i].clone()).collect() };
    let train = take(&order[..n_train]);
    let cal = take(&order[n_train..n_train + n_cal]);
    let test = take(&order[n_train + n_cal..]);

    Ok((
        dataset.with_records(train),
        dataset.with_records(cal),
        dataset.with_records(test),
    ))
}
