//! Capacity trajectories from predicted transitions, end-of-life crossing and
//! knee point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::Prediction;
use crate::ingest::first_crossing;

pub const DEFAULT_EARLY_FRACTION: f64 = 0.3;
pub const DEFAULT_LATE_FRACTION: f64 = 0.1;
/// Fits closer than this in angle give no knee.
pub const MIN_KNEE_ANGLE_DEG: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryForecast {
    pub cell_id: String,
    /// Seconds; index 0 is the known starting point.
    pub times: Vec<f64>,
    pub q_pred: Vec<f64>,
    pub q_sd: Vec<f64>,
    pub q_observed: Option<Vec<f64>>,
    pub eol_pred: Option<f64>,
    pub knee_pred: Option<f64>,
}

/// Sums predicted transitions onto `initial_q`. `times` holds the start time
/// followed by each step's end time.
pub fn integrate(cell_id: &str, times: &[f64], initial_q: f64, predictions: &[Prediction]) -> Result<TrajectoryForecast> {
    if !(initial_q > 0.0) {
        return Err(Error::Usage(format!("initial capacity must be positive, got {initial_q}")));
    }
    if times.len() != predictions.len() + 1 {
        return Err(Error::Usage(format!(
            "{} times for {} predicted steps",
            times.len(),
            predictions.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Usage("trajectory times must be strictly increasing".into()));
    }
    let mut q_pred = Vec::with_capacity(times.len());
    let mut q_sd = Vec::with_capacity(times.len());
    let mut q = initial_q;
    let mut var = 0.0;
    q_pred.push(q);
    q_sd.push(0.0);
    for p in predictions {
        q += p.mean;
        var += p.sd * p.sd;
        q_pred.push(q);
        q_sd.push(var.sqrt());
    }
    Ok(TrajectoryForecast {
        cell_id: cell_id.to_string(),
        times: times.to_vec(),
        q_pred,
        q_sd,
        q_observed: None,
        eol_pred: None,
        knee_pred: None,
    })
}

/// First time the predicted capacity drops below `threshold`.
pub fn eol_crossing(traj: &TrajectoryForecast, threshold: f64) -> Option<f64> {
    first_crossing(traj.times.iter().copied().zip(traj.q_pred.iter().copied()), threshold)
}

/// Points up to `t_end` with an interpolated final point at `t_end`.
pub fn truncate_series(times: &[f64], values: &[f64], t_end: f64) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut v = Vec::new();
    for (i, (&ti, &vi)) in times.iter().zip(values).enumerate() {
        if ti <= t_end {
            t.push(ti);
            v.push(vi);
            continue;
        }
        if i > 0 && times[i - 1] < t_end {
            let (t0, v0) = (times[i - 1], values[i - 1]);
            t.push(t_end);
            v.push(v0 + (vi - v0) * (t_end - t0) / (ti - t0));
        }
        break;
    }
    (t, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LineFit {
    fn at(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

fn least_squares(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Knee construction in coordinates where the truncated trajectory spans
/// [0, 1] on both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeGeometry {
    pub early_fit: LineFit,
    pub late_fit: LineFit,
    /// Intersection of the two fits.
    pub vertex: [f64; 2],
    /// Unit direction of the interior angle bisector through `vertex`.
    pub bisector_direction: [f64; 2],
    /// Where the bisector meets the trajectory.
    pub crossing: [f64; 2],
    pub knee_index: usize,
    /// Normalized position of the knee point.
    pub knee_normalized: [f64; 2],
    pub knee_time: f64,
    pub angle_deg: f64,
}

impl KneeGeometry {
    /// Bisector as slope and intercept; infinite slope when vertical.
    pub fn bisector(&self) -> LineFit {
        let [dx, dy] = self.bisector_direction;
        let slope = dy / dx;
        LineFit {
            slope,
            intercept: self.vertex[1] - slope * self.vertex[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum KneeOutcome {
    Knee(KneeGeometry),
    /// Early and late fits differ by less than the minimum angle.
    Parallel { angle_deg: f64 },
    /// The construction lands outside the gap between the fit windows.
    OutsideWindows { knee_time: f64 },
}

impl KneeOutcome {
    pub fn knee_time(&self) -> Option<f64> {
        match self {
            KneeOutcome::Knee(g) => Some(g.knee_time),
            _ => None,
        }
    }
}

/// Locates the knee of a capacity curve, normally already truncated at its
/// end-of-life crossing.
pub fn knee_point(times: &[f64], q: &[f64], early_frac: f64, late_frac: f64) -> Result<KneeOutcome> {
    if times.len() != q.len() {
        return Err(Error::Usage(format!("{} times for {} values", times.len(), q.len())));
    }
    if !(early_frac > 0.0 && late_frac > 0.0 && early_frac + late_frac <= 1.0) {
        return Err(Error::Usage(format!(
            "window fractions {early_frac} and {late_frac} must be positive and sum to at most 1"
        )));
    }
    let n = q.len();
    let n_early = (early_frac * n as f64).ceil() as usize;
    let n_late = (late_frac * n as f64).ceil() as usize;
    if n_early < 3 || n_late < 3 || n_early + n_late > n {
        return Err(Error::Knee(format!(
            "{n} points give windows of {n_early} and {n_late}; need 3 in each without overlap"
        )));
    }
    let (t0, t1) = (times[0], times[n - 1]);
    let (q_lo, q_hi) = q
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(t1 > t0) || !(q_hi > q_lo) || !q_lo.is_finite() {
        return Err(Error::Knee("trajectory has no extent to normalize".into()));
    }
    let x: Vec<f64> = times.iter().map(|t| (t - t0) / (t1 - t0)).collect();
    let y: Vec<f64> = q.iter().map(|v| (v - q_lo) / (q_hi - q_lo)).collect();

    let early = least_squares(&x[..n_early], &y[..n_early]).ok_or_else(|| Error::Knee("degenerate early window".into()))?;
    let late = least_squares(&x[n - n_late..], &y[n - n_late..]).ok_or_else(|| Error::Knee("degenerate late window".into()))?;
    let angle_deg = (early.slope.atan() - late.slope.atan()).abs().to_degrees();
    if angle_deg < MIN_KNEE_ANGLE_DEG {
        return Ok(KneeOutcome::Parallel { angle_deg });
    }
    let vx = (late.intercept - early.intercept) / (early.slope - late.slope);
    let vertex = [vx, early.at(vx)];
    let n1 = early.slope.hypot(1.0);
    let n2 = late.slope.hypot(1.0);
    let (dx, dy) = (-1.0 / n1 + 1.0 / n2, -early.slope / n1 + late.slope / n2);
    let dn = dx.hypot(dy);
    if !(dn > 1e-12) {
        return Ok(KneeOutcome::Parallel { angle_deg });
    }
    let dir = [dx / dn, dy / dn];

    // signed distance of each point from the bisector line
    let side: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(&px, &py)| (px - vertex[0]) * dir[1] - (py - vertex[1]) * dir[0])
        .collect();
    let mut crossing: Option<([f64; 2], f64)> = None;
    for i in 0..n - 1 {
        let (s0, s1) = (side[i], side[i + 1]);
        if s0 == 0.0 || s0 * s1 < 0.0 {
            let f = if s0 == 0.0 { 0.0 } else { s0 / (s0 - s1) };
            let p = [x[i] + f * (x[i + 1] - x[i]), y[i] + f * (y[i + 1] - y[i])];
            let dist = (p[0] - vertex[0]).hypot(p[1] - vertex[1]);
            if crossing.is_none_or(|(_, d)| dist < d) {
                crossing = Some((p, dist));
            }
        }
    }
    if side[n - 1] == 0.0 {
        let p = [x[n - 1], y[n - 1]];
        let dist = (p[0] - vertex[0]).hypot(p[1] - vertex[1]);
        if crossing.is_none_or(|(_, d)| dist < d) {
            crossing = Some((p, dist));
        }
    }
    let Some((cross, _)) = crossing else {
        return Err(Error::Knee("angle bisector never meets the trajectory".into()));
    };
    let knee_index = (0..n)
        .min_by(|&a, &b| {
            let da = (x[a] - cross[0]).hypot(y[a] - cross[1]);
            let db = (x[b] - cross[0]).hypot(y[b] - cross[1]);
            da.total_cmp(&db)
        })
        .expect("non-empty");
    let knee_time = times[knee_index];
    if knee_index < n_early || knee_index >= n - n_late {
        return Ok(KneeOutcome::OutsideWindows { knee_time });
    }
    Ok(KneeOutcome::Knee(KneeGeometry {
        early_fit: early,
        late_fit: late,
        vertex,
        bisector_direction: dir,
        crossing: cross,
        knee_index,
        knee_normalized: [x[knee_index], y[knee_index]],
        knee_time,
        angle_deg,
    }))
}

/// Knee of a trajectory truncated at its `threshold` crossing. Without a
/// crossing the whole series is used.
pub fn knee_of_curve(times: &[f64], q: &[f64], threshold: f64, early_frac: f64, late_frac: f64) -> Result<KneeOutcome> {
    match first_crossing(times.iter().copied().zip(q.iter().copied()), threshold) {
        Some(t_eol) => {
            let (t, v) = truncate_series(times, q, t_eol);
            knee_point(&t, &v, early_frac, late_frac)
        }
        None => knee_point(times, q, early_frac, late_frac),
    }
}

impl TrajectoryForecast {
    /// Fills `eol_pred` and `knee_pred`. A knee failure leaves `knee_pred`
    /// empty and is returned for logging.
    pub fn locate_events(&mut self, threshold: f64, early_frac: f64, late_frac: f64) -> Option<Error> {
        self.eol_pred = eol_crossing(self, threshold);
        match knee_of_curve(&self.times, &self.q_pred, threshold, early_frac, late_frac) {
            Ok(k) => {
                self.knee_pred = k.knee_time();
                None
            }
            Err(e) => {
                self.knee_pred = None;
                Some(e)
            }
        }
    }

    /// Columns: `t_s, t_days, q_pred, q_sd, q_lower, q_upper, q_obs, knee, eol`.
    /// The knee flag marks the grid point nearest the knee; the EoL flag
    /// marks the first point at or after the predicted crossing.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t_s", "t_days", "q_pred", "q_sd", "q_lower", "q_upper", "q_obs", "knee", "eol"])?;
        let knee_idx = self.knee_pred.and_then(|k| {
            (0..self.times.len()).min_by(|&a, &b| (self.times[a] - k).abs().total_cmp(&(self.times[b] - k).abs()))
        });
        let eol_idx = self.eol_pred.and_then(|e| self.times.iter().position(|&t| t >= e));
        for i in 0..self.times.len() {
            let obs = self
                .q_observed
                .as_ref()
                .and_then(|o| o.get(i))
                .map(|v| v.to_string())
                .unwrap_or_default();
            w.write_record([
                self.times[i].to_string(),
                (self.times[i] / crate::ingest::SECONDS_PER_DAY).to_string(),
                self.q_pred[i].to_string(),
                self.q_sd[i].to_string(),
                (self.q_pred[i] - 2.0 * self.q_sd[i]).to_string(),
                (self.q_pred[i] + 2.0 * self.q_sd[i]).to_string(),
                obs,
                u8::from(knee_idx == Some(i)).to_string(),
                u8::from(eol_idx == Some(i)).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
