//! Forecast accuracy and calibration metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SECONDS_PER_DAY;
use crate::stats::{mean, percentile_sorted};
use crate::trajectory::TrajectoryForecast;

/// Calibration score of the real-data reference trial, for side-by-side
/// reporting only. An ideal 2-sd interval would hold about 0.95.
pub const REFERENCE_CALIBRATION: f64 = 0.42;

/// Observed series and events on the forecast grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedTruth {
    pub q: Vec<f64>,
    pub eol: Option<f64>,
    pub knee: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    /// Trial setting label, e.g. the feature count or full-life count.
    pub setting: String,
    pub repeat: usize,
    pub cell_id: String,
    /// Percent of nominal.
    pub rmse_q: f64,
    pub rmse_dq: f64,
    /// Signed percentages.
    pub pe_eol: Option<f64>,
    pub pe_knee: Option<f64>,
    pub abs_err_eol_days: Option<f64>,
    pub abs_err_knee_days: Option<f64>,
    pub eol_pred_days: Option<f64>,
    pub eol_obs_days: Option<f64>,
    pub knee_pred_days: Option<f64>,
    pub knee_obs_days: Option<f64>,
    pub calibration_hits: usize,
    pub calibration_total: usize,
}

fn percent_error(pred: Option<f64>, obs: Option<f64>) -> Option<f64> {
    match (pred, obs) {
        (Some(p), Some(o)) if o != 0.0 => Some(100.0 * (p - o) / o),
        _ => None,
    }
}

fn abs_days(pred: Option<f64>, obs: Option<f64>) -> Option<f64> {
    Some((pred? - obs?).abs() / SECONDS_PER_DAY)
}

/// Scores one forecast against the observed series on the same grid. The
/// first grid point is the known start and is excluded.
pub fn score_cell(traj: &TrajectoryForecast, truth: &ObservedTruth, nominal: f64) -> Result<CellScore> {
    let n = traj.q_pred.len();
    if truth.q.len() != n || traj.q_sd.len() != n {
        return Err(Error::Usage(format!(
            "cell {}: {} predicted points, {} sds, {} observed",
            traj.cell_id,
            n,
            traj.q_sd.len(),
            truth.q.len()
        )));
    }
    if n < 2 {
        return Err(Error::Usage(format!("cell {}: nothing to score", traj.cell_id)));
    }
    if !(nominal > 0.0) {
        return Err(Error::Usage(format!("nominal capacity must be positive, got {nominal}")));
    }
    let rms = |sq: f64, k: usize| 100.0 * (sq / k as f64).sqrt() / nominal;
    let mut sq_q = 0.0;
    let mut sq_dq = 0.0;
    let mut hits = 0;
    for i in 1..n {
        let e = traj.q_pred[i] - truth.q[i];
        sq_q += e * e;
        let d_pred = traj.q_pred[i] - traj.q_pred[i - 1];
        let d_obs = truth.q[i] - truth.q[i - 1];
        sq_dq += (d_pred - d_obs).powi(2);
        if e.abs() <= 2.0 * traj.q_sd[i] {
            hits += 1;
        }
    }
    let days = |t: Option<f64>| t.map(|v| v / SECONDS_PER_DAY);
    Ok(CellScore {
        setting: String::new(),
        repeat: 0,
        cell_id: traj.cell_id.clone(),
        rmse_q: rms(sq_q, n - 1),
        rmse_dq: rms(sq_dq, n - 1),
        pe_eol: percent_error(traj.eol_pred, truth.eol),
        pe_knee: percent_error(traj.knee_pred, truth.knee),
        abs_err_eol_days: abs_days(traj.eol_pred, truth.eol),
        abs_err_knee_days: abs_days(traj.knee_pred, truth.knee),
        eol_pred_days: days(traj.eol_pred),
        eol_obs_days: days(truth.eol),
        knee_pred_days: days(traj.knee_pred),
        knee_obs_days: days(truth.knee),
        calibration_hits: hits,
        calibration_total: n - 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(MetricSummary {
            mean: mean(values),
            median: percentile_sorted(&sorted, 0.5),
            p95: percentile_sorted(&sorted, 0.95),
            n: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub rmse_q: Option<MetricSummary>,
    pub rmse_dq: Option<MetricSummary>,
    /// Absolute percentage errors.
    pub pe_eol: Option<MetricSummary>,
    pub pe_knee: Option<MetricSummary>,
    pub abs_err_eol_days: Option<MetricSummary>,
    pub abs_err_knee_days: Option<MetricSummary>,
    pub calibration: Option<f64>,
    pub n_cells: usize,
    pub n_trials: usize,
}

impl TrialSummary {
    pub const METRICS: [&'static str; 6] = ["rmse_q", "rmse_dq", "pe_eol", "pe_knee", "abs_err_eol_days", "abs_err_knee_days"];

    pub fn metric(&self, name: &str) -> Option<MetricSummary> {
        match name {
            "rmse_q" => self.rmse_q,
            "rmse_dq" => self.rmse_dq,
            "pe_eol" => self.pe_eol,
            "pe_knee" => self.pe_knee,
            "abs_err_eol_days" => self.abs_err_eol_days,
            "abs_err_knee_days" => self.abs_err_knee_days,
            _ => None,
        }
    }
}

/// Mean, median and 95th percentile of each metric; percentage errors enter
/// as absolute values and missing values are skipped.
pub fn summarize(scores: &[CellScore], n_trials: usize) -> Result<TrialSummary> {
    if scores.is_empty() {
        return Err(Error::Usage("no scores to summarize".into()));
    }
    let collect = |f: &dyn Fn(&CellScore) -> Option<f64>| -> Option<MetricSummary> {
        let v: Vec<f64> = scores.iter().filter_map(f).collect();
        MetricSummary::of(&v)
    };
    Ok(TrialSummary {
        rmse_q: collect(&|s| Some(s.rmse_q)),
        rmse_dq: collect(&|s| Some(s.rmse_dq)),
        pe_eol: collect(&|s| s.pe_eol.map(f64::abs)),
        pe_knee: collect(&|s| s.pe_knee.map(f64::abs)),
        abs_err_eol_days: collect(&|s| s.abs_err_eol_days),
        abs_err_knee_days: collect(&|s| s.abs_err_knee_days),
        calibration: calibration_score(scores),
        n_cells: scores.len(),
        n_trials,
    })
}

/// Fraction of scored observations inside their 2-sd interval.
pub fn calibration_score(scores: &[CellScore]) -> Option<f64> {
    let hits: usize = scores.iter().map(|s| s.calibration_hits).sum();
    let total: usize = scores.iter().map(|s| s.calibration_total).sum();
    (total > 0).then(|| hits as f64 / total as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_scores_csv(path: &Path, scores: &[CellScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "setting",
        "repeat",
        "cell_id",
        "rmse_q_pct",
        "rmse_dq_pct",
        "pe_eol_pct",
        "pe_knee_pct",
        "abs_err_eol_days",
        "abs_err_knee_days",
        "eol_pred_days",
        "eol_obs_days",
        "knee_pred_days",
        "knee_obs_days",
        "calibration_hits",
        "calibration_total",
    ])?;
    for s in scores {
        w.write_record([
            s.setting.clone(),
            s.repeat.to_string(),
            s.cell_id.clone(),
            s.rmse_q.to_string(),
            s.rmse_dq.to_string(),
            opt(s.pe_eol),
            opt(s.pe_knee),
            opt(s.abs_err_eol_days),
            opt(s.abs_err_knee_days),
            opt(s.eol_pred_days),
            opt(s.eol_obs_days),
            opt(s.knee_pred_days),
            opt(s.knee_obs_days),
            s.calibration_hits.to_string(),
            s.calibration_total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per (setting, metric): `mean, median, p95, n`, plus a calibration row.
pub fn write_summary_csv(path: &Path, summaries: &[(String, TrialSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["setting", "metric", "mean", "median", "p95", "n", "n_cells", "n_trials"])?;
    for (setting, s) in summaries {
        for name in TrialSummary::METRICS {
            let m = s.metric(name);
            w.write_record([
                setting.clone(),
                name.to_string(),
                opt(m.map(|m| m.mean)),
                opt(m.map(|m| m.median)),
                opt(m.map(|m| m.p95)),
                m.map(|m| m.n).unwrap_or(0).to_string(),
                s.n_cells.to_string(),
                s.n_trials.to_string(),
            ])?;
        }
        w.write_record([
            setting.clone(),
            "calibration".into(),
            opt(s.calibration),
            String::new(),
            String::new(),
            s.n_cells.to_string(),
            s.n_cells.to_string(),
            s.n_trials.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width bins over the value range; the last bin is closed.
pub fn histogram(values: &[f64], n_bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            lower: lo + i as f64 * width,
            upper: if i + 1 == n_bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width).floor() as usize).min(n_bins - 1);
        bins[i].count += 1;
    }
    bins
}

/// Histograms of absolute percentage errors for EoL and knee.
pub fn write_histogram_csv(path: &Path, scores: &[CellScore], n_bins: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "lower", "upper", "count"])?;
    let series: [(&str, Vec<f64>); 3] = [
        ("abs_pe_eol", scores.iter().filter_map(|s| s.pe_eol.map(f64::abs)).collect()),
        ("abs_pe_knee", scores.iter().filter_map(|s| s.pe_knee.map(f64::abs)).collect()),
        ("rmse_q", scores.iter().map(|s| s.rmse_q).collect()),
    ];
    for (name, values) in series {
        for b in histogram(&values, n_bins) {
            w.write_record([name.to_string(), b.lower.to_string(), b.upper.to_string(), b.count.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
