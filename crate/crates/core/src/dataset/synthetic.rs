//! Log-distance path-loss world used to produce fingerprints whose generating
//! process is known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Coords, Dataset, Fingerprint, PositionLabel, Record, MAX_RSSI_DBM, MIN_RSSI_DBM, SENTINEL_DBM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    /// Area extent in meters along longitude.
    pub width: f64,
    /// Area extent in meters along latitude.
    pub height: f64,
    pub num_aps: usize,
    pub tx_power_dbm: f64,
    pub path_loss_exponent: f64,
    pub noise_sigma_db: f64,
    /// Readings below this level are reported as not detected.
    pub detect_floor_dbm: f64,
    pub num_samples: usize,
    pub seed: u64,
    /// Number of stacked floors; 1 gives the flat single-floor world.
    pub num_floors: u32,
    /// Buildings are equal-width strips along longitude.
    pub num_buildings: u32,
    pub floor_height_m: f64,
    /// Extra attenuation per floor between transmitter and receiver.
    pub floor_attenuation_db: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            width: 60.0,
            height: 40.0,
            num_aps: 20,
            tx_power_dbm: -30.0,
            path_loss_exponent: 3.0,
            noise_sigma_db: 4.0,
            detect_floor_dbm: -100.0,
            num_samples: 2000,
            seed: 0,
            num_floors: 1,
            num_buildings: 1,
            floor_height_m: 4.0,
            floor_attenuation_db: 15.0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return fail(format!("area must be positive, got {} x {}", self.width, self.height));
        }
        if self.num_aps == 0 {
            return fail("num_aps must be at least 1".into());
        }
        if self.num_samples == 0 {
            return fail("num_samples must be at least 1".into());
        }
        if !(self.noise_sigma_db >= 0.0 && self.noise_sigma_db.is_finite()) {
            return fail(format!("noise_sigma_db must be >= 0, got {}", self.noise_sigma_db));
        }
        if !(self.tx_power_dbm <= MAX_RSSI_DBM && self.tx_power_dbm.is_finite()) {
            return fail(format!(
                "tx_power_dbm must be <= {MAX_RSSI_DBM}, got {}",
                self.tx_power_dbm
            ));
        }
        if !(MIN_RSSI_DBM..=MAX_RSSI_DBM).contains(&self.detect_floor_dbm) {
            return fail(format!(
                "detect_floor_dbm must lie in [{MIN_RSSI_DBM}, {MAX_RSSI_DBM}], got {}",
                self.detect_floor_dbm
            ));
        }
        if !(self.path_loss_exponent.is_finite() && self.path_loss_exponent > 0.0) {
            return fail(format!(
                "path_loss_exponent must be positive, got {}",
                self.path_loss_exponent
            ));
        }
        if self.num_floors == 0 || self.num_buildings == 0 {
            return fail("num_floors and num_buildings must be at least 1".into());
        }
        if !(self.floor_height_m >= 0.0 && self.floor_attenuation_db >= 0.0) {
            return fail("floor_height_m and floor_attenuation_db must be >= 0".into());
        }
        Ok(())
    }
}

/// `tx - 10 n log10(max(d, 1 m))`, the noise-free log-distance model.
pub fn log_distance_rssi(tx_power_dbm: f64, exponent: f64, distance_m: f64) -> f64 {
    tx_power_dbm - 10.0 * exponent * distance_m.max(1.0).log10()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccessPoint {
    pub position: Coords,
    pub floor: u32,
}

/// Placed access points plus the propagation parameters of a config.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: SyntheticWorldConfig,
    aps: Vec<AccessPoint>,
    noise: Option<Normal<f64>>,
}

impl SyntheticWorld {
    /// Places `num_aps` access points uniformly at random using `rng`.
    pub fn place<R: Rng + ?Sized>(config: SyntheticWorldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let aps = (0..config.num_aps)
            .map(|_| AccessPoint {
                position: Coords::new(rng.random::<f64>() * config.width, rng.random::<f64>() * config.height),
                floor: rng.random_range(0..config.num_floors),
            })
            .collect();
        Self::with_access_points(config, aps)
    }

    pub fn with_access_points(config: SyntheticWorldConfig, aps: Vec<AccessPoint>) -> Result<Self> {
        config.validate()?;
        if aps.len() != config.num_aps {
            return Err(Error::Config(format!(
                "{} access points supplied, config declares {}",
                aps.len(),
                config.num_aps
            )));
        }
        let noise = if config.noise_sigma_db > 0.0 {
            Some(Normal::new(0.0, config.noise_sigma_db).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(Self { config, aps, noise })
    }

    pub fn config(&self) -> &SyntheticWorldConfig {
        &self.config
    }

    pub fn access_points(&self) -> &[AccessPoint] {
        &self.aps
    }

    /// Building whose longitude strip contains `position`.
    pub fn building_at(&self, position: &Coords) -> u32 {
        let strip = self.config.width / self.config.num_buildings as f64;
        ((position.longitude / strip).floor().max(0.0) as u32).min(self.config.num_buildings - 1)
    }

    /// Noise-free RSSI of access point `ap` at `position` on `floor`.
    pub fn mean_rssi(&self, ap: &AccessPoint, position: &Coords, floor: u32) -> f64 {
        let floors_apart = ap.floor.abs_diff(floor) as f64;
        let vertical = floors_apart * self.config.floor_height_m;
        let d = (ap.position.squared_distance(position) + vertical * vertical).sqrt();
        log_distance_rssi(self.config.tx_power_dbm, self.config.path_loss_exponent, d)
            - floors_apart * self.config.floor_attenuation_db
    }

    /// One noisy observation at `position`. Readings under the detection
    /// floor become the sentinel; noisy readings above 0 dBm saturate at 0.
    pub fn fingerprint_at<R: Rng + ?Sized>(&self, position: &Coords, floor: u32, rng: &mut R) -> Fingerprint {
        let values = self
            .aps
            .iter()
            .map(|ap| {
                let noise = self.noise.as_ref().map_or(0.0, |n| n.sample(rng));
                let v = self.mean_rssi(ap, position, floor) + noise;
                if v < self.config.detect_floor_dbm {
                    SENTINEL_DBM
                } else {
                    v.min(MAX_RSSI_DBM)
                }
            })
            .collect();
        Fingerprint::new(values)
    }

    /// Uniformly random position and floor inside the world.
    pub fn random_location<R: Rng + ?Sized>(&self, rng: &mut R) -> (Coords, u32) {
        let position = Coords::new(
            rng.random::<f64>() * self.config.width,
            rng.random::<f64>() * self.config.height,
        );
        let floor = rng.random_range(0..self.config.num_floors);
        (position, floor)
    }

    /// Labelled record observed at a given location.
    pub fn observe<R: Rng + ?Sized>(&self, id: u64, position: Coords, floor: u32, rng: &mut R) -> Record {
        Record {
            id,
            fingerprint: self.fingerprint_at(&position, floor, rng),
            label: PositionLabel {
                position,
                floor,
                building: self.building_at(&position),
            },
        }
    }

    /// `count` records at uniformly random locations, ids starting at `first_id`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, first_id: u64, rng: &mut R) -> Result<Dataset> {
        let records = (0..count as u64)
            .map(|i| {
                let (position, floor) = self.random_location(rng);
                self.observe(first_id + i, position, floor, rng)
            })
            .collect();
        Dataset::new(
            records,
            self.config.num_aps,
            self.config.num_floors,
            self.config.num_buildings,
        )
    }
}

/// Places access points, then draws `num_samples` uniformly located records,
/// all from a ChaCha8 stream seeded with `config.seed`.
pub fn generate_synthetic(config: &SyntheticWorldConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let world = SyntheticWorld::place(config.clone(), &mut rng)?;
    world.sample(config.num_samples, 0, &mut rng)
}
