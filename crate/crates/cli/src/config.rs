//! Run configuration: a flat `key = value` file plus command-line overrides.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Relative paths in a config file resolve against the file's
//! directory, relative paths given on the command line against the working
//! directory. Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use confloc::dataset::{NormalizationScheme, SyntheticWorldConfig};
use confloc::harness::{ReportFormat, TABLE_ALPHA_GRID};
use confloc::predictor::{KnnConfig, Weighting};
use confloc::risk::{LossFamily, RouteConfig};
use confloc::score::Task;

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "report_format",
    "dataset_path",
    "synthetic",
    "synth_width",
    "synth_height",
    "synth_num_aps",
    "synth_tx_power_dbm",
    "synth_path_loss_exponent",
    "synth_noise_sigma_db",
    "synth_detect_floor_dbm",
    "synth_num_samples",
    "synth_num_floors",
    "synth_num_buildings",
    "synth_floor_height_m",
    "synth_floor_attenuation_db",
    "normalization",
    "split",
    "predictor",
    "knn_k",
    "knn_weighting",
    "predictions_path",
    "task",
    "alpha",
    "alphas",
    "trials",
    "risk_family",
    "beta",
    "betas",
    "lambda_grid",
    "lambda_grid_points",
    "cal_paths_path",
    "test_paths_path",
    "route_num_cal",
    "route_num_test",
    "route_length",
    "route_membership",
    "route_step_m",
    "route_turn_sigma",
    "pvalue_alpha",
    "pvalue_calibration",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    base: PathBuf,
}

/// Raw key/value pairs with the directory each value's paths resolve against.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected `key = value`, got `{line}`", n + 1))?;
            raw.set(key.trim(), value.trim(), base)
                .with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            bail!("unknown config key `{key}`");
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                base: base.to_path_buf(),
            },
        );
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{assignment}`"))?;
        self.set(key.trim(), value.trim(), Path::new(""))
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.text(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
            })
            .transpose()
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(|e| e.base.join(&e.value))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.text(key).map(|v| parse_list(key, v)).transpose()
    }
}

fn parse_list(key: &str, text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("config key `{key}`: cannot parse `{}`: {e}", s.trim()))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("config key `{key}` is empty");
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic(SyntheticWorldConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorChoice {
    Knn(KnnConfig),
    Import(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGridChoice {
    /// Zero plus this many geometric points spanning the calibration errors.
    Geometric(usize),
    /// Zero plus every distinct calibration squared error.
    Exact,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathSource {
    /// Random walks through the synthetic world.
    Routes {
        cal: RouteConfig,
        num_test: usize,
    },
    Files {
        cal: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvalueCalibration {
    /// One distance score per calibration record.
    Points,
    /// One max-aggregated distance score per calibration path.
    Paths,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub report_format: ReportFormat,
    pub source: DatasetSource,
    pub normalization: NormalizationScheme,
    pub split: [f64; 3],
    pub predictor: PredictorChoice,
    pub task: Task,
    pub alpha: f64,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub risk_family: LossFamily,
    pub betas: Vec<f64>,
    pub lambda_grid: LambdaGridChoice,
    pub paths: PathSource,
    pub pvalue_alpha: f64,
    pub pvalue_calibration: PvalueCalibration,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("config key `{key}`: expected true or false, got `{other}`"),
    }
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let synthetic = raw.text("synthetic").map(|v| parse_bool("synthetic", v)).transpose()?;
        let source = match (raw.path("dataset_path"), synthetic.unwrap_or(false)) {
            (Some(_), true) => bail!("exactly one dataset source: set either `dataset_path` or `synthetic = true`"),
            (None, false) => bail!("no dataset source: set `dataset_path` or `synthetic = true`"),
            (Some(p), false) => DatasetSource::File(p),
            (None, true) => {
                let d = SyntheticWorldConfig::default();
                let config = SyntheticWorldConfig {
                    width: raw.get_or("synth_width", d.width)?,
                    height: raw.get_or("synth_height", d.height)?,
                    num_aps: raw.get_or("synth_num_aps", d.num_aps)?,
                    tx_power_dbm: raw.get_or("synth_tx_power_dbm", d.tx_power_dbm)?,
                    path_loss_exponent: raw.get_or("synth_path_loss_exponent", d.path_loss_exponent)?,
                    noise_sigma_db: raw.get_or("synth_noise_sigma_db", d.noise_sigma_db)?,
                    detect_floor_dbm: raw.get_or("synth_detect_floor_dbm", d.detect_floor_dbm)?,
                    num_samples: raw.get_or("synth_num_samples", d.num_samples)?,
                    seed: 0,
                    num_floors: raw.get_or("synth_num_floors", d.num_floors)?,
                    num_buildings: raw.get_or("synth_num_buildings", d.num_buildings)?,
                    floor_height_m: raw.get_or("synth_floor_height_m", d.floor_height_m)?,
                    floor_attenuation_db: raw.get_or("synth_floor_attenuation_db", d.floor_attenuation_db)?,
                };
                config.validate()?;
                DatasetSource::Synthetic(config)
            }
        };
        if matches!(source, DatasetSource::File(_)) {
            if let Some(key) = raw.entries.keys().find(|k| k.starts_with("synth_")) {
                bail!("`{key}` only applies to synthetic datasets");
            }
        }

        let predictor = match (raw.text("predictor").unwrap_or("knn"), raw.path("predictions_path")) {
            ("knn", None) => PredictorChoice::Knn(KnnConfig::new(
                raw.get_or("knn_k", 5usize)?,
                raw.get_or("knn_weighting", Weighting::Uniform)?,
            )),
            ("knn", Some(_)) => bail!("exactly one predictor source: `predictions_path` requires `predictor = import`"),
            ("import", Some(p)) => PredictorChoice::Import(p),
            ("import", None) => bail!("`predictor = import` requires `predictions_path`"),
            (other, _) => bail!("unknown predictor `{other}` (expected knn or import)"),
        };

        let split = raw.list("split")?.unwrap_or_else(|| vec![0.7, 0.1, 0.2]);
        let split: [f64; 3] = split
            .try_into()
            .map_err(|v: Vec<f64>| anyhow!("`split` needs three fractions, got {}", v.len()))?;

        let alpha: f64 = raw.get_or("alpha", 0.1)?;
        if !(0.0..=1.0).contains(&alpha) {
            bail!("alpha must lie in [0, 1], got {alpha}");
        }
        let alphas = match raw.text("alphas") {
            None | Some("table") => TABLE_ALPHA_GRID.to_vec(),
            Some(v) => parse_list("alphas", v)?,
        };
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            bail!("alphas must lie in [0, 1], got {a}");
        }
        let trials: usize = raw.get_or("trials", 1)?;
        if trials == 0 {
            bail!("trials must be at least 1");
        }

        let betas = match raw.list("betas")? {
            Some(b) => b,
            None => vec![raw.get_or("beta", 0.1)?],
        };
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            bail!("beta must lie in (0, 1], got {b}");
        }
        let lambda_grid = match raw.text("lambda_grid").unwrap_or("default") {
            "default" => LambdaGridChoice::Geometric(raw.get_or("lambda_grid_points", 64usize)?),
            "exact" => LambdaGridChoice::Exact,
            list => {
                let grid = parse_list("lambda_grid", list)?;
                if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
                    bail!("`lambda_grid` must be finite and strictly increasing");
                }
                LambdaGridChoice::Explicit(grid)
            }
        };
        let paths = match (raw.path("cal_paths_path"), raw.path("test_paths_path")) {
            (Some(cal), Some(test)) => PathSource::Files { cal, test },
            (None, None) => {
                let d = RouteConfig::default();
                PathSource::Routes {
                    cal: RouteConfig {
                        num_paths: raw.get_or("route_num_cal", d.num_paths)?,
                        length: raw.get_or("route_length", d.length)?,
                        membership_rate: raw.get_or("route_membership", d.membership_rate)?,
                        step_m: raw.get_or("route_step_m", d.step_m)?,
                        turn_sigma: raw.get_or("route_turn_sigma", d.turn_sigma)?,
                    },
                    num_test: raw.get_or("route_num_test", d.num_paths)?,
                }
            }
            _ => bail!("`cal_paths_path` and `test_paths_path` must be given together"),
        };

        let pvalue_alpha: f64 = raw.get_or("pvalue_alpha", 0.1)?;
        if !(pvalue_alpha > 0.0 && pvalue_alpha < 1.0) {
            bail!("pvalue_alpha must lie in (0, 1), got {pvalue_alpha}");
        }
        let pvalue_calibration = match raw.text("pvalue_calibration").unwrap_or("points") {
            "points" => PvalueCalibration::Points,
            "paths" => PvalueCalibration::Paths,
            other => bail!("unknown pvalue_calibration `{other}` (expected points or paths)"),
        };

        Ok(Self {
            seed: raw.get_or("seed", 0)?,
            out: raw.path("out").unwrap_or_else(|| PathBuf::from("out")),
            report_format: raw.get_or("report_format", ReportFormat::Csv)?,
            source,
            normalization: raw.get_or("normalization", NormalizationScheme::ZeroPenalty)?,
            split,
            predictor,
            task: raw.get_or("task", Task::Coords)?,
            alpha,
            alphas,
            trials,
            risk_family: raw.get_or("risk_family", LossFamily::Fdr)?,
            betas,
            lambda_grid,
            paths,
            pvalue_alpha,
            pvalue_calibration,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawConfig {
        RawConfig::parse(text, Path::new("/cfg")).unwrap()
    }

    #[test]
    fn defaults_with_synthetic_source() {
        let cfg = RunConfig::from_raw(&raw("synthetic = true\n# comment\n\nsynth_num_samples = 200")).unwrap();
        match &cfg.source {
            DatasetSource::Synthetic(s) => assert_eq!((s.num_samples, s.num_aps), (200, 20)),
            other => panic!("unexpected source {other:?}"),
        }
        assert_eq!(cfg.alphas.len(), 20);
        assert_eq!(cfg.split, [0.7, 0.1, 0.2]);
        assert_eq!(cfg.betas, vec![0.1]);
        assert_eq!(cfg.task, Task::Coords);
        assert_eq!(cfg.out, PathBuf::from("out"));
    }

    #[test]
    fn paths_resolve_against_config_directory() {
        let cfg = RunConfig::from_raw(&raw("dataset_path = data/train.csv")).unwrap();
        assert_eq!(cfg.source, DatasetSource::File(PathBuf::from("/cfg/data/train.csv")));
    }

    #[test]
    fn exactly_one_source() {
        assert!(RunConfig::from_raw(&raw("dataset_path = a.csv\nsynthetic = true")).is_err());
        assert!(RunConfig::from_raw(&raw("seed = 3")).is_err());
        assert!(RunConfig::from_raw(&raw("dataset_path = a.csv\nsynth_num_aps = 3")).is_err());
    }

    #[test]
    fn exactly_one_predictor() {
        let base = "synthetic = true\n";
        assert!(RunConfig::from_raw(&raw(&format!("{base}predictions_path = p.csv"))).is_err());
        assert!(RunConfig::from_raw(&raw(&format!("{base}predictor = import"))).is_err());
        let cfg = RunConfig::from_raw(&raw(&format!("{base}predictor = import\npredictions_path = p.csv"))).unwrap();
        assert_eq!(cfg.predictor, PredictorChoice::Import(PathBuf::from("/cfg/p.csv")));
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(RawConfig::parse("sed = 1", Path::new("")).is_err());
        assert!(RawConfig::parse("no equals sign", Path::new("")).is_err());
        assert!(RunConfig::from_raw(&raw("synthetic = true\nalpha = 1.5")).is_err());
        assert!(RunConfig::from_raw(&raw("synthetic = true\nsplit = 0.5,0.5")).is_err());
        assert!(RunConfig::from_raw(&raw("synthetic = true\nlambda_grid = 1,0.5")).is_err());
        assert!(RunConfig::from_raw(&raw("synthetic = true\ncal_paths_path = a.csv")).is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let mut r = raw("synthetic = true\nalpha = 0.2");
        r.set_override("alpha=0.3").unwrap();
        assert_eq!(RunConfig::from_raw(&r).unwrap().alpha, 0.3);
        assert!(r.set_override("alpha").is_err());
    }
}
