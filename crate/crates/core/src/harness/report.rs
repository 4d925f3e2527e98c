use std::fs;
use std::path::{Path, PathBuf};

use super::{Population, TrialRun, TIME_ONLY_SETTING};
use crate::error::{Error, Result};
use crate::features::assemble_table;
use crate::plots::{event_scatter, histogram_plot, metric_curves, similarity_heatmap, trajectory_plot, EventKind};
use crate::selection::build_similarity;

const TRAJECTORY_PLOTS: usize = 6;

pub(super) fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Numeric position of a setting on a metric curve: the trailing count in
/// `full_life_{c}` or `k_{k}`, and 0 for the time-only baseline.
fn setting_position(setting: &str) -> Option<f64> {
    if setting == TIME_ONLY_SETTING {
        return Some(0.0);
    }
    setting.rsplit('_').next()?.parse().ok()
}

/// Renders SVG figures for a finished run into `dir` and returns the files
/// written. The similarity heat map and the capacity threshold need the
/// population; without it they are skipped.
pub fn render_report(run: &TrialRun, pop: Option<&Population>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (setting, _) in &run.summaries {
        let scores: Vec<_> = run.scores.iter().filter(|s| &s.setting == setting).cloned().collect();
        if scores.is_empty() {
            continue;
        }
        let tag = sanitize(setting);
        let eol: Vec<f64> = scores.iter().filter_map(|s| s.pe_eol).collect();
        let knee: Vec<f64> = scores.iter().filter_map(|s| s.pe_knee).collect();
        for (name, values) in [("eol", &eol), ("knee", &knee)] {
            let path = dir.join(format!("hist_pe_{name}_{tag}.svg"));
            histogram_plot(values, 20, &format!("{setting}: {name} percentage error"), "error (%)", &path)?;
            written.push(path);
        }
        for (name, kind) in [("eol", EventKind::Eol), ("knee", EventKind::Knee)] {
            let path = dir.join(format!("scatter_{name}_{tag}.svg"));
            event_scatter(&scores, kind, &path)?;
            written.push(path);
        }
    }

    let mut points: Vec<(f64, [f64; 3])> = run
        .summaries
        .iter()
        .filter_map(|(setting, s)| {
            let s = s.as_ref()?;
            let m = |v: Option<crate::eval::MetricSummary>| v.map_or(f64::NAN, |m| m.median);
            Some((setting_position(setting)?, [m(s.rmse_q), m(s.pe_eol), m(s.pe_knee)]))
        })
        .collect();
    if points.len() > 1 {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let x: Vec<f64> = points.iter().map(|p| p.0).collect();
        let series: Vec<(String, Vec<f64>)> = ["median RMSE_Q", "median |PE| EoL", "median |PE| knee"]
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), points.iter().map(|p| p.1[i]).collect()))
            .collect();
        let path = dir.join("metric_curves.svg");
        metric_curves(&x, &series, "setting count", "%", &path)?;
        written.push(path);
    }

    if let Some(pop) = pop {
        if let Some(path) = heatmap(run, pop, dir)? {
            written.push(path);
        }
    }

    for (setting, repeat, traj) in run.trajectories.iter().take(TRAJECTORY_PLOTS) {
        let threshold = pop
            .and_then(|p| p.cells.iter().find(|c| c.cell_id() == traj.cell_id))
            .map(|c| c.prepared.record.eol_threshold());
        let path = dir.join(format!("trajectory_{}_r{repeat}_{}.svg", sanitize(setting), sanitize(&traj.cell_id)));
        trajectory_plot(traj, threshold, &path)?;
        written.push(path);
    }
    Ok(written)
}

// Similarity over the training rows of the first successful repeat.
fn heatmap(run: &TrialRun, pop: &Population, dir: &Path) -> Result<Option<PathBuf>> {
    let Some(rec) = run.repeats.iter().find(|r| r.failure.is_none() && r.catalog.is_some()) else {
        return Ok(None);
    };
    let mut cells = Vec::with_capacity(rec.train_ids.len());
    for id in &rec.train_ids {
        let ctx = pop
            .cells
            .iter()
            .find(|c| c.cell_id() == id)
            .ok_or_else(|| Error::Data(format!("cell {id} of the run is not in the population")))?;
        let truncate = !rec.full_life_ids.is_empty() && !rec.full_life_ids.contains(id);
        match (truncate, ctx.truth.knee) {
            (true, Some(knee)) => cells.push(ctx.prepared.truncated(knee)),
            _ => cells.push(ctx.prepared.clone()),
        }
    }
    let catalog = rec.catalog.as_ref().expect("checked above");
    let table = assemble_table(&cells, catalog)?;
    let sim = build_similarity(&table)?;
    let path = dir.join("similarity.svg");
    similarity_heatmap(&sim, &path)?;
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_positions() {
        assert_eq!(setting_position("full_life_10"), Some(10.0));
        assert_eq!(setting_position("k_3"), Some(3.0));
        assert_eq!(setting_position("time_only"), Some(0.0));
        assert_eq!(setting_position("large_scale"), None);
    }
}
