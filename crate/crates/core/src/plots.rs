//! SVG figures for trial outputs.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{histogram, CellScore};
use crate::selection::SimilarityMatrix;
use crate::trajectory::TrajectoryForecast;

const SIZE: (u32, u32) = (800, 600);
const DAY: f64 = 86_400.0;

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Internal(format!("plot: {e}"))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi <= lo {
        return (lo - 0.5, lo + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    padded(lo, hi)
}

// white at 0 to dark blue at 1
fn shade(v: f64) -> RGBColor {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    RGBColor(lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// Heat map of `|Pearson|` similarities; grey cells are undefined.
pub fn similarity_heatmap(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    let n = sim.size();
    let root = SVGBackend::new(path, (900, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("feature similarity |r|", ("sans-serif", 22))
        .margin(10)
        .x_label_area_size(90)
        .y_label_area_size(90)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(draw_err)?;
    let labels = sim.labels.clone();
    let fmt = move |i: &usize| labels.get(*i).cloned().unwrap_or_default();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(n)
        .y_labels(n)
        .x_label_formatter(&fmt)
        .y_label_formatter(&fmt)
        .x_label_style(("sans-serif", 10).into_font().transform(FontTransform::Rotate90))
        .y_label_style(("sans-serif", 10))
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| {
            let color = match sim.values[i * n + j] {
                Some(v) => shade(v),
                None => RGBColor(200, 200, 200),
            };
            Rectangle::new([(j, n - 1 - i), (j + 1, n - i)], color.filled())
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Bar histogram of `values` with `n_bins` equal-width bins.
pub fn histogram_plot(values: &[f64], n_bins: usize, title: &str, x_label: &str, path: &Path) -> Result<()> {
    let bins = histogram(values, n_bins);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1) = match (bins.first(), bins.last()) {
        (Some(a), Some(b)) => (a.lower, b.upper),
        _ => (0.0, 1.0),
    };
    let y_max = bins.iter().map(|b| b.count).max().unwrap_or(0).max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0..y_max + 1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("count")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(
            bins.iter()
                .map(|b| Rectangle::new([(b.lower, 0), (b.upper, b.count)], BLUE.mix(0.6).filled())),
        )
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Eol,
    Knee,
}

/// Predicted against observed event times in days, with the identity line.
pub fn event_scatter(scores: &[CellScore], kind: EventKind, path: &Path) -> Result<()> {
    let points: Vec<(f64, f64)> = scores
        .iter()
        .filter_map(|s| match kind {
            EventKind::Eol => s.eol_obs_days.zip(s.eol_pred_days),
            EventKind::Knee => s.knee_obs_days.zip(s.knee_pred_days),
        })
        .collect();
    let name = match kind {
        EventKind::Eol => "end of life",
        EventKind::Knee => "knee",
    };
    let (lo, hi) = extent(points.iter().flat_map(|&(a, b)| [a, b]));
    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{name}: predicted vs observed"), ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("observed (days)")
        .y_desc("predicted (days)")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(LineSeries::new([(lo, lo), (hi, hi)], BLACK.mix(0.5)))
        .map_err(draw_err)?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, RED.mix(0.7).filled())))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// One line per named series over a shared x axis.
pub fn metric_curves(x: &[f64], series: &[(String, Vec<f64>)], x_label: &str, y_label: &str, path: &Path) -> Result<()> {
    let (x0, x1) = extent(x.iter().copied());
    let (y0, y1) = extent(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0.min(0.0)..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(draw_err)?;
    for (k, (name, v)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = x.iter().copied().zip(v.iter().copied()).filter(|p| p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Forecast with its 2 sd band, the observed series and the events.
pub fn trajectory_plot(traj: &TrajectoryForecast, threshold: Option<f64>, path: &Path) -> Result<()> {
    let days: Vec<f64> = traj.times.iter().map(|t| t / DAY).collect();
    let (x0, x1) = extent(days.iter().copied());
    let lower: Vec<f64> = traj.q_pred.iter().zip(&traj.q_sd).map(|(q, s)| q - 2.0 * s).collect();
    let upper: Vec<f64> = traj.q_pred.iter().zip(&traj.q_sd).map(|(q, s)| q + 2.0 * s).collect();
    let observed = traj.q_observed.as_deref().unwrap_or(&[]);
    let (y0, y1) = extent(lower.iter().chain(&upper).chain(observed).copied().chain(threshold));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&traj.cell_id, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("time (days)")
        .y_desc("capacity (Ah)")
        .draw()
        .map_err(draw_err)?;
    let band: Vec<(f64, f64)> = days
        .iter()
        .copied()
        .zip(upper.iter().copied())
        .chain(days.iter().copied().zip(lower.iter().copied()).rev())
        .collect();
    chart
        .draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.15).filled())))
        .map_err(draw_err)?;
    chart
        .draw_series(LineSeries::new(days.iter().copied().zip(traj.q_pred.iter().copied()), BLUE.stroke_width(2)))
        .map_err(draw_err)?;
    if !observed.is_empty() {
        chart
            .draw_series(days.iter().copied().zip(observed.iter().copied()).map(|p| Circle::new(p, 2, BLACK.filled())))
            .map_err(draw_err)?;
    }
    if let Some(q) = threshold {
        chart
            .draw_series(LineSeries::new([(x0, q), (x1, q)], RED.mix(0.6)))
            .map_err(draw_err)?;
    }
    for (t, color) in [(traj.knee_pred, GREEN), (traj.eol_pred, RED)] {
        if let Some(t) = t {
            let d = t / DAY;
            chart
                .draw_series(LineSeries::new([(d, y0), (d, y1)], color.mix(0.8)))
                .map_err(draw_err)?;
        }
    }
    root.present().map_err(draw_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::Prediction;
    use crate::trajectory::integrate;

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimilarityMatrix {
            labels: vec!["a".into(), "b".into(), "delta_q".into()],
            values: vec![Some(1.0), Some(0.3), None, Some(0.3), Some(1.0), Some(0.8), None, Some(0.8), Some(1.0)],
        };
        similarity_heatmap(&sim, &dir.path().join("sim.svg")).unwrap();
        histogram_plot(&[1.0, 2.0, 2.5, 4.0], 3, "pe", "%", &dir.path().join("h.svg")).unwrap();
        histogram_plot(&[], 3, "empty", "%", &dir.path().join("e.svg")).unwrap();
        metric_curves(
            &[3.0, 10.0, 30.0],
            &[("eol".into(), vec![5.0, 3.0, 1.0]), ("knee".into(), vec![6.0, f64::NAN, 2.0])],
            "c",
            "%",
            &dir.path().join("c.svg"),
        )
        .unwrap();
        let preds = vec![Prediction { mean: -0.01, sd: 0.002 }; 10];
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 43_200.0).collect();
        let mut traj = integrate("c1", &times, 1.0, &preds).unwrap();
        traj.eol_pred = Some(2.0 * DAY);
        trajectory_plot(&traj, Some(0.95), &dir.path().join("t.svg")).unwrap();
        event_scatter(&[], EventKind::Eol, &dir.path().join("s.svg")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("t.svg")).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("c1"));
    }
}
