//! Evaluation protocol: alpha sweeps (coverage and set size against target),
//! risk-control sweeps, multi-seed aggregation and bit-stable reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path as FsPath;

use crate::conformal::{class_prediction_set, conformal_quantile, PredictionSet, RegionPredictionSet};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::predictor::PredictionSource;
use crate::pvalue::FilterEntry;
use crate::risk::{calibrate_lambda, empirical_risk, evaluate_risk, LossCurve, LossFamily, Path, RiskConfig};
use crate::score::{score_calibration_set, Task};

/// Default 20-point alpha grid, 0 to 1 inclusive.
pub const TABLE_ALPHA_GRID: [f64; 20] = [
    0.0, 0.052, 0.105, 0.158, 0.211, 0.263, 0.316, 0.368, 0.421, 0.474, 0.526, 0.579, 0.632, 0.684, 0.737, 0.789,
    0.842, 0.895, 0.947, 1.0,
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub target_coverage: f64,
    pub empirical_coverage: f64,
    /// `sqrt(c (1 - c) / n_test)` at the target coverage `c`.
    pub binomial_se: f64,
    /// Mean class-set cardinality; `None` for coordinate regions.
    pub avg_set_size: Option<f64>,
    /// The conformal threshold (region radius for coordinates).
    pub qhat: f64,
    pub k_index: i64,
    pub n_cal: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Calibrates once per alpha on `cal` and evaluates the resulting sets on `test`.
pub fn alpha_sweep(
    predictor: &dyn PredictionSource,
    cal: &Dataset,
    test: &Dataset,
    alphas: &[f64],
    task: Task,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    if test.is_empty() {
        return Err(Error::Contract("alpha sweep needs a non-empty test set".into()));
    }
    let scores = score_calibration_set(predictor, cal, task)?;
    predictor.check_dataset(test)?;
    let predictions = test
        .records()
        .iter()
        .map(|r| predictor.prediction_for(r))
        .collect::<Result<Vec<_>>>()?;
    let n_test = test.len();

    alphas
        .iter()
        .map(|&alpha| {
            let q = conformal_quantile(&scores, alpha)?;
            let (coverage, avg_set_size) = match task {
                Task::Coords => {
                    let hits = predictions
                        .iter()
                        .zip(test.records())
                        .filter(|(p, r)| {
                            RegionPredictionSet {
                                center: p.coords,
                                radius: q.value,
                            }
                            .contains(&r.label.position)
                        })
                        .count();
                    (hits as f64 / n_test as f64, None)
                }
                Task::Building | Task::Floor => {
                    let (mut hits, mut total_size) = (0usize, 0usize);
                    for (p, r) in predictions.iter().zip(test.records()) {
                        let set = class_prediction_set(task.head(p).unwrap(), &q)?;
                        let truth = match task {
                            Task::Building => r.label.building,
                            _ => r.label.floor,
                        } as usize;
                        hits += usize::from(set.contains(&truth));
                        total_size += set.len();
                    }
                    (hits as f64 / n_test as f64, Some(total_size as f64 / n_test as f64))
                }
            };
            let target = 1.0 - alpha;
            Ok(SweepRow {
                alpha,
                target_coverage: target,
                empirical_coverage: coverage,
                binomial_se: (target * (1.0 - target) / n_test as f64).sqrt(),
                avg_set_size,
                qhat: q.value,
                k_index: q.k_index,
                n_cal: scores.len(),
                n_test,
                seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub alpha: f64,
    pub trials: usize,
    pub mean_coverage: f64,
    pub sd_coverage: f64,
    pub mean_set_size: Option<f64>,
    pub sd_set_size: Option<f64>,
}

/// Per-seed sweep rows plus per-alpha mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
}

pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl TrialReport {
    /// Groups rows by alpha in order of first appearance.
    pub fn from_rows(rows: Vec<SweepRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("trial report needs at least one row".into()));
        }
        let mut alphas: Vec<f64> = Vec::new();
        for r in &rows {
            if !alphas.contains(&r.alpha) {
                alphas.push(r.alpha);
            }
        }
        let aggregates = alphas
            .into_iter()
            .map(|alpha| {
                let group: Vec<&SweepRow> = rows.iter().filter(|r| r.alpha == alpha).collect();
                let cov: Vec<f64> = group.iter().map(|r| r.empirical_coverage).collect();
                let (mean_coverage, sd_coverage) = mean_and_sd(&cov);
                let sizes: Option<Vec<f64>> = group.iter().map(|r| r.avg_set_size).collect();
                let size_stats = sizes.map(|s| mean_and_sd(&s));
                AggregateRow {
                    alpha,
                    trials: group.len(),
                    mean_coverage,
                    sd_coverage,
                    mean_set_size: size_stats.map(|s| s.0),
                    sd_set_size: size_stats.map(|s| s.1),
                }
            })
            .collect();
        Ok(Self { rows, aggregates })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub family: LossFamily,
    pub beta: f64,
    pub lambda_hat: f64,
    pub grid_index: usize,
    pub threshold: f64,
    pub cal_risk: f64,
    pub test_risk: f64,
    pub feasible: bool,
    pub n_cal: usize,
    pub n_test: usize,
}

/// Calibrates λ̂ per beta on `cal_paths` over `grid` and evaluates it on `test_paths`.
pub fn risk_sweep(
    cal_paths: &[Path],
    test_paths: &[Path],
    betas: &[f64],
    family: LossFamily,
    grid: &[f64],
) -> Result<Vec<RiskRow>> {
    if cal_paths.is_empty() {
        return Err(Error::Contract("risk sweep needs at least one calibration path".into()));
    }
    let curve = LossCurve::evaluate(cal_paths, grid, family)?;
    betas
        .iter()
        .map(|&beta| {
            let config = RiskConfig::for_family(family, beta, grid.to_vec());
            let cal = calibrate_lambda(&curve, &config)?;
            Ok(RiskRow {
                family,
                beta,
                lambda_hat: cal.lambda_hat,
                grid_index: cal.grid_index,
                threshold: cal.threshold,
                cal_risk: empirical_risk(&curve, cal.grid_index)?,
                test_risk: evaluate_risk(cal.lambda_hat, test_paths, family)?,
                feasible: cal.feasible,
                n_cal: cal_paths.len(),
                n_test: test_paths.len(),
            })
        })
        .collect()
}

/// One report cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
    Missing,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format_real(*v),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }

    fn json(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) if v.is_finite() => format_real(*v),
            Cell::Real(v) => json_string(&format_real(*v)),
            Cell::Text(s) => json_string(s),
            Cell::Missing => "null".into(),
        }
    }
}

fn format_real(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        let s = format!("{v:.6}");
        // "-0.000000" and "0.000000" are the same cell
        if s.bytes().all(|b| matches!(b, b'-' | b'0' | b'.')) {
            "0.000000".into()
        } else {
            s
        }
    }
}

fn json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => write!(out, "\\u{:04x}", c as u32).unwrap(),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// A row type with a fixed column order.
pub trait ReportRow {
    fn columns() -> &'static [&'static str];
    fn cells(&self) -> Vec<Cell>;
}

fn opt_real(v: Option<f64>) -> Cell {
    v.map_or(Cell::Missing, Cell::Real)
}

impl ReportRow for SweepRow {
    fn columns() -> &'static [&'static str] {
        &[
            "alpha",
            "target_coverage",
            "empirical_coverage",
            "binomial_se",
            "avg_set_size",
            "qhat",
            "k_index",
            "n_cal",
            "n_test",
            "seed",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Real(self.alpha),
            Cell::Real(self.target_coverage),
            Cell::Real(self.empirical_coverage),
            Cell::Real(self.binomial_se),
            opt_real(self.avg_set_size),
            Cell::Real(self.qhat),
            Cell::Int(self.k_index),
            Cell::Int(self.n_cal as i64),
            Cell::Int(self.n_test as i64),
            Cell::Text(self.seed.to_string()),
        ]
    }
}

impl ReportRow for AggregateRow {
    fn columns() -> &'static [&'static str] {
        &[
            "alpha",
            "trials",
            "mean_coverage",
            "sd_coverage",
            "mean_set_size",
            "sd_set_size",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Real(self.alpha),
            Cell::Int(self.trials as i64),
            Cell::Real(self.mean_coverage),
            Cell::Real(self.sd_coverage),
            opt_real(self.mean_set_size),
            opt_real(self.sd_set_size),
        ]
    }
}

impl ReportRow for RiskRow {
    fn columns() -> &'static [&'static str] {
        &[
            "family",
            "beta",
            "lambda_hat",
            "grid_index",
            "threshold",
            "cal_risk",
            "test_risk",
            "feasible",
            "n_cal",
            "n_test",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.family.as_str().into()),
            Cell::Real(self.beta),
            Cell::Real(self.lambda_hat),
            Cell::Int(self.grid_index as i64),
            Cell::Real(self.threshold),
            Cell::Real(self.cal_risk),
            Cell::Real(self.test_risk),
            Cell::Int(i64::from(self.feasible)),
            Cell::Int(self.n_cal as i64),
            Cell::Int(self.n_test as i64),
        ]
    }
}

impl ReportRow for FilterEntry {
    fn columns() -> &'static [&'static str] {
        &["ID", "SCORE", "PVALUE", "RETAINED"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.id.to_string()),
            Cell::Real(self.score),
            Cell::Real(self.pvalue),
            Cell::Int(i64::from(self.retained)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format `{other}` (expected csv or json)"
            ))),
        }
    }
}

/// `{experiment}_{task}_{seed}.{csv|json}`.
pub fn report_file_name(experiment: &str, task: &str, seed: u64, format: ReportFormat) -> String {
    format!("{experiment}_{task}_{seed}.{}", format.extension())
}

/// Renders rows with a fixed column order, reals at 6 decimals, LF endings.
pub fn render_report<R: ReportRow>(rows: &[R], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Contract("refusing to render an empty report".into()));
    }
    let columns = R::columns();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&columns.join(","));
            out.push('\n');
            for row in rows {
                let cells: Vec<String> = row.cells().iter().map(Cell::csv).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Json => {
            out.push_str("[\n");
            for (i, row) in rows.iter().enumerate() {
                let fields: Vec<String> = columns
                    .iter()
                    .zip(row.cells())
                    .map(|(c, v)| format!("{}:{}", json_string(c), v.json()))
                    .collect();
                out.push_str("  {");
                out.push_str(&fields.join(","));
                out.push('}');
                if i + 1 < rows.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str("]\n");
        }
    }
    Ok(out)
}

/// Writes `contents` next to `destination` under a temporary name, then
/// renames it into place so readers never observe a partial file.
pub fn write_atomic(destination: &FsPath, contents: &str) -> Result<()> {
    let dir = destination
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| FsPath::new("."));
    let name = destination
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} is not a file path", destination.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, destination)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(destination, e)
    })
}

pub fn emit_report<R: ReportRow>(rows: &[R], format: ReportFormat, destination: &FsPath) -> Result<()> {
    write_atomic(destination, &render_report(rows, format)?)
}
