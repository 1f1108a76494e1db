//! Pipeline stages behind each subcommand. Every stage rebuilds its inputs
//! from the configuration and seed, so any stage can run in isolation.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use anyhow::{bail, Context, Result};
use confloc::conformal::{class_prediction_set, conformal_quantile, PredictionSet, RegionPredictionSet};
use confloc::dataset::{
    normalize_rssi, parse_ujiindoorloc, split_dataset, to_ujiindoorloc_csv, Dataset, SplitSpec, SyntheticWorld,
    SENTINEL_DBM,
};
use confloc::harness::{
    alpha_sweep, emit_report, report_file_name, risk_sweep, write_atomic, Cell, ReportRow, TrialReport,
};
use confloc::predictor::{export_predictions, fit_knn, import_predictions, KnnModel, PredictionSource};
use confloc::pvalue::{filter_points, path_calibration_scores};
use confloc::risk::{default_lambda_grid, exact_lambda_grid, generate_routes, read_paths, write_paths, Path};
use confloc::score::{score_calibration_set, score_prediction, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, LambdaGridChoice, PathSource, PredictorChoice, PvalueCalibration, RunConfig};
use crate::seed::{stage_seed, trial_seed, Stage};

pub struct Loaded {
    pub dataset: Dataset,
    pub world: Option<SyntheticWorld>,
}

/// Raw (unnormalized) dataset for `seed`.
pub fn load_raw(cfg: &RunConfig, seed: u64) -> Result<Loaded> {
    match &cfg.source {
        DatasetSource::File(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
            let dataset = parse_ujiindoorloc(&text).with_context(|| format!("parsing {}", path.display()))?;
            Ok(Loaded { dataset, world: None })
        }
        DatasetSource::Synthetic(config) => {
            let mut config = config.clone();
            config.seed = stage_seed(seed, Stage::Synthetic);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let world = SyntheticWorld::place(config.clone(), &mut rng)?;
            let dataset = world.sample(config.num_samples, 0, &mut rng)?;
            Ok(Loaded {
                dataset,
                world: Some(world),
            })
        }
    }
}

pub fn split_spec(cfg: &RunConfig, seed: u64) -> Result<SplitSpec> {
    let [train, cal, test] = cfg.split;
    Ok(SplitSpec::new(train, cal, test, stage_seed(seed, Stage::Split))?)
}

pub struct Prepared {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub world: Option<SyntheticWorld>,
}

/// Load, normalize the whole dataset, then split.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let loaded = load_raw(cfg, seed)?;
    let normalized = normalize_rssi(loaded.dataset, cfg.normalization)?;
    let (train, cal, test) = split_dataset(&normalized, &split_spec(cfg, seed)?)?;
    Ok(Prepared {
        train,
        cal,
        test,
        world: loaded.world,
    })
}

pub fn fit_model(cfg: &RunConfig, prepared: &Prepared) -> Result<KnnModel> {
    match &cfg.predictor {
        PredictorChoice::Knn(knn) => Ok(fit_knn(&prepared.train, knn)?),
        PredictorChoice::Import(_) => bail!("this stage needs `predictor = knn`"),
    }
}

/// The configured predictor, checked against both the calibration and the test split.
pub fn predictor(cfg: &RunConfig, prepared: &Prepared) -> Result<Box<dyn PredictionSource>> {
    let source: Box<dyn PredictionSource> = match &cfg.predictor {
        PredictorChoice::Knn(_) => Box::new(fit_model(cfg, prepared)?),
        PredictorChoice::Import(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading predictions {}", path.display()))?;
            Box::new(import_predictions(&text, &prepared.cal).with_context(|| format!("importing {}", path.display()))?)
        }
    };
    source.check_dataset(&prepared.cal)?;
    source.check_dataset(&prepared.test)?;
    Ok(source)
}

/// Calibration and test paths, with predictions filled in.
pub fn load_paths(cfg: &RunConfig, prepared: &Prepared, seed: u64) -> Result<(Vec<Path>, Vec<Path>)> {
    let (cal, test) = raw_paths(cfg, prepared.world.as_ref(), seed)?;
    match &cfg.predictor {
        PredictorChoice::Knn(_) => {
            let model = fit_model(cfg, prepared)?;
            let predict = |paths: Vec<Path>| {
                paths
                    .into_iter()
                    .map(|p| p.predict_with(&model))
                    .collect::<confloc::Result<Vec<_>>>()
            };
            Ok((predict(cal)?, predict(test)?))
        }
        PredictorChoice::Import(_) => {
            let complete = |paths: &[Path]| paths.iter().all(|p| p.samples().iter().all(|s| s.predicted.is_some()));
            if !complete(&cal) || !complete(&test) {
                bail!("with `predictor = import` the path files must carry PRED_LON and PRED_LAT");
            }
            Ok((cal, test))
        }
    }
}

fn raw_paths(cfg: &RunConfig, world: Option<&SyntheticWorld>, seed: u64) -> Result<(Vec<Path>, Vec<Path>)> {
    match &cfg.paths {
        PathSource::Files { cal, test } => {
            let read = |p: &PathBuf| -> Result<Vec<Path>> {
                let text = fs::read_to_string(p).with_context(|| format!("reading paths {}", p.display()))?;
                read_paths(&text).with_context(|| format!("parsing {}", p.display()))
            };
            Ok((read(cal)?, read(test)?))
        }
        PathSource::Routes { cal, num_test } => {
            let Some(world) = world else {
                bail!("synthetic routes need `synthetic = true`; otherwise set `cal_paths_path` and `test_paths_path`");
            };
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, Stage::Routes));
            let cal_paths = generate_routes(world, cal, 0, &mut rng)?;
            let test_config = confloc::risk::RouteConfig {
                num_paths: *num_test,
                ..*cal
            };
            let test_paths = generate_routes(world, &test_config, cal.num_paths as u64, &mut rng)?;
            Ok((cal_paths, test_paths))
        }
    }
}

fn lambda_grid(cfg: &RunConfig, cal_paths: &[Path]) -> Result<Vec<f64>> {
    Ok(match &cfg.lambda_grid {
        LambdaGridChoice::Geometric(points) => default_lambda_grid(cal_paths, *points)?,
        LambdaGridChoice::Exact => exact_lambda_grid(cal_paths)?,
        LambdaGridChoice::Explicit(grid) => grid.clone(),
    })
}

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &FsPath) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn report<R: ReportRow>(&self, cfg: &RunConfig, name: &str, rows: &[R]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        emit_report(rows, cfg.report_format, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn text(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn report_name(cfg: &RunConfig, experiment: &str, label: &str) -> String {
    report_file_name(experiment, label, cfg.seed, cfg.report_format)
}

struct SummaryRow {
    source: &'static str,
    records: usize,
    num_aps: usize,
    num_floors: u32,
    num_buildings: u32,
    detected_fraction: f64,
}

impl ReportRow for SummaryRow {
    fn columns() -> &'static [&'static str] {
        &[
            "source",
            "records",
            "num_aps",
            "num_floors",
            "num_buildings",
            "detected_fraction",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.source.into()),
            Cell::Int(self.records as i64),
            Cell::Int(self.num_aps as i64),
            Cell::Int(i64::from(self.num_floors)),
            Cell::Int(i64::from(self.num_buildings)),
            Cell::Real(self.detected_fraction),
        ]
    }
}

pub fn ingest(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let loaded = load_raw(cfg, cfg.seed)?;
    let ds = &loaded.dataset;
    let cells = ds.len() * ds.num_aps();
    let detected = ds
        .records()
        .iter()
        .flat_map(|r| r.fingerprint.values())
        .filter(|v| **v != SENTINEL_DBM)
        .count();
    let row = SummaryRow {
        source: match cfg.source {
            DatasetSource::File(_) => "file",
            DatasetSource::Synthetic(_) => "synthetic",
        },
        records: ds.len(),
        num_aps: ds.num_aps(),
        num_floors: ds.num_floors(),
        num_buildings: ds.num_buildings(),
        detected_fraction: if cells == 0 {
            0.0
        } else {
            detected as f64 / cells as f64
        },
    };
    Ok(vec![out.report(cfg, &report_name(cfg, "ingest", "summary"), &[row])?])
}

pub fn synth(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    if !matches!(cfg.source, DatasetSource::Synthetic(_)) {
        bail!("`synth` needs `synthetic = true`");
    }
    let loaded = load_raw(cfg, cfg.seed)?;
    let mut written = vec![out.text(
        &format!("synthetic_{}.csv", cfg.seed),
        &to_ujiindoorloc_csv(&loaded.dataset)?,
    )?];
    if matches!(cfg.paths, PathSource::Routes { .. }) {
        let (cal, test) = raw_paths(cfg, loaded.world.as_ref(), cfg.seed)?;
        written.push(out.text(&format!("routes_cal_{}.csv", cfg.seed), &write_paths(&cal)?)?);
        written.push(out.text(&format!("routes_test_{}.csv", cfg.seed), &write_paths(&test)?)?);
    }
    Ok(written)
}

struct AssignmentRow {
    id: u64,
    part: &'static str,
}

impl ReportRow for AssignmentRow {
    fn columns() -> &'static [&'static str] {
        &["ID", "PART"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![Cell::Text(self.id.to_string()), Cell::Text(self.part.into())]
    }
}

pub fn split(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let loaded = load_raw(cfg, cfg.seed)?;
    let (train, cal, test) = split_dataset(&loaded.dataset, &split_spec(cfg, cfg.seed)?)?;
    let mut rows: Vec<AssignmentRow> = [(&train, "train"), (&cal, "cal"), (&test, "test")]
        .iter()
        .flat_map(|(ds, part)| ds.records().iter().map(|r| AssignmentRow { id: r.id, part }))
        .collect();
    rows.sort_by_key(|r| r.id);
    Ok(vec![out.report(
        cfg,
        &report_name(cfg, "split", "assignment"),
        &rows,
    )?])
}

pub fn fit(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let prepared = prepare(cfg, cfg.seed)?;
    let model = fit_model(cfg, &prepared)?;
    let table = model
        .predict_dataset(&prepared.cal)?
        .merge(model.predict_dataset(&prepared.test)?)?;
    Ok(vec![out.text(
        &format!("predictions_{}.csv", cfg.seed),
        &export_predictions(&table),
    )?])
}

struct CalibrationRow {
    task: Task,
    alpha: f64,
    n_cal: usize,
    k_index: i64,
    qhat: f64,
}

impl ReportRow for CalibrationRow {
    fn columns() -> &'static [&'static str] {
        &["task", "alpha", "n_cal", "k_index", "qhat"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.task.as_str().into()),
            Cell::Real(self.alpha),
            Cell::Int(self.n_cal as i64),
            Cell::Int(self.k_index),
            Cell::Real(self.qhat),
        ]
    }
}

pub fn calibrate(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let prepared = prepare(cfg, cfg.seed)?;
    let source = predictor(cfg, &prepared)?;
    let scores = score_calibration_set(source.as_ref(), &prepared.cal, cfg.task)?;
    let q = conformal_quantile(&scores, cfg.alpha)?;
    let row = CalibrationRow {
        task: cfg.task,
        alpha: cfg.alpha,
        n_cal: q.n,
        k_index: q.k_index,
        qhat: q.value,
    };
    Ok(vec![out.report(
        cfg,
        &report_name(cfg, "calibration", cfg.task.as_str()),
        &[row],
    )?])
}

struct RegionRow {
    id: u64,
    center_lon: f64,
    center_lat: f64,
    radius: f64,
    covered: bool,
}

impl ReportRow for RegionRow {
    fn columns() -> &'static [&'static str] {
        &["ID", "PRED_LON", "PRED_LAT", "RADIUS", "COVERED"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.id.to_string()),
            Cell::Real(self.center_lon),
            Cell::Real(self.center_lat),
            Cell::Real(self.radius),
            Cell::Int(i64::from(self.covered)),
        ]
    }
}

struct ClassSetRow {
    id: u64,
    members: String,
    size: usize,
    covered: bool,
}

impl ReportRow for ClassSetRow {
    fn columns() -> &'static [&'static str] {
        &["ID", "SET", "SIZE", "COVERED"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.id.to_string()),
            Cell::Text(self.members.clone()),
            Cell::Int(self.size as i64),
            Cell::Int(i64::from(self.covered)),
        ]
    }
}

/// Writes one prediction set per test record; returns the file and the empirical coverage.
pub fn predict_sets(cfg: &RunConfig, out: &Output) -> Result<(Vec<PathBuf>, f64)> {
    let prepared = prepare(cfg, cfg.seed)?;
    let source = predictor(cfg, &prepared)?;
    let scores = score_calibration_set(source.as_ref(), &prepared.cal, cfg.task)?;
    let q = conformal_quantile(&scores, cfg.alpha)?;
    let name = report_name(cfg, "sets", cfg.task.as_str());
    let n_test = prepared.test.len() as f64;
    match cfg.task {
        Task::Coords => {
            let rows = prepared
                .test
                .records()
                .iter()
                .map(|r| {
                    let p = source.prediction_for(r)?;
                    let set = RegionPredictionSet {
                        center: p.coords,
                        radius: q.value,
                    };
                    Ok(RegionRow {
                        id: r.id,
                        center_lon: p.coords.longitude,
                        center_lat: p.coords.latitude,
                        radius: q.value,
                        covered: set.contains(&r.label.position),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let coverage = rows.iter().filter(|r| r.covered).count() as f64 / n_test;
            Ok((vec![out.report(cfg, &name, &rows)?], coverage))
        }
        Task::Building | Task::Floor => {
            let rows = prepared
                .test
                .records()
                .iter()
                .map(|r| {
                    let p = source.prediction_for(r)?;
                    let probs = cfg.task.head(&p).expect("classification task has a probability head");
                    let set = class_prediction_set(probs, &q)?;
                    let truth = match cfg.task {
                        Task::Building => r.label.building,
                        _ => r.label.floor,
                    } as usize;
                    let members: Vec<String> = set.members().iter().map(usize::to_string).collect();
                    Ok(ClassSetRow {
                        id: r.id,
                        members: members.join(";"),
                        size: set.len(),
                        covered: set.contains(&truth),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let coverage = rows.iter().filter(|r| r.covered).count() as f64 / n_test;
            Ok((vec![out.report(cfg, &name, &rows)?], coverage))
        }
    }
}

pub fn risk(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let prepared = prepare(cfg, cfg.seed)?;
    let (cal_paths, test_paths) = load_paths(cfg, &prepared, cfg.seed)?;
    let grid = lambda_grid(cfg, &cal_paths)?;
    let rows = risk_sweep(&cal_paths, &test_paths, &cfg.betas, cfg.risk_family, &grid)?;
    Ok(vec![out.report(
        cfg,
        &report_name(cfg, "risk", cfg.risk_family.as_str()),
        &rows,
    )?])
}

pub fn pvalue_filter(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let prepared = prepare(cfg, cfg.seed)?;
    let source = predictor(cfg, &prepared)?;
    let cal = match cfg.pvalue_calibration {
        PvalueCalibration::Points => score_calibration_set(source.as_ref(), &prepared.cal, Task::Coords)?,
        PvalueCalibration::Paths => path_calibration_scores(&load_paths(cfg, &prepared, cfg.seed)?.0)?,
    };
    let points = prepared
        .test
        .records()
        .iter()
        .map(|r| {
            Ok((
                r.id,
                score_prediction(&source.prediction_for(r)?, &r.label, Task::Coords)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = filter_points(&points, &cal, cfg.pvalue_alpha)?;
    Ok(vec![out.report(
        cfg,
        &report_name(cfg, "pvalue", "coords"),
        &report.entries,
    )?])
}

pub fn sweep(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for t in 0..cfg.trials {
        let seed = trial_seed(cfg.seed, t);
        let prepared = prepare(cfg, seed)?;
        let source = predictor(cfg, &prepared)?;
        rows.extend(alpha_sweep(
            source.as_ref(),
            &prepared.cal,
            &prepared.test,
            &cfg.alphas,
            cfg.task,
            seed,
        )?);
    }
    let mut written = vec![out.report(cfg, &report_name(cfg, "sweep", cfg.task.as_str()), &rows)?];
    if cfg.trials > 1 {
        let report = TrialReport::from_rows(rows)?;
        written.push(out.report(
            cfg,
            &report_name(cfg, "sweep_aggregate", cfg.task.as_str()),
            &report.aggregates,
        )?);
    }
    Ok(written)
}
