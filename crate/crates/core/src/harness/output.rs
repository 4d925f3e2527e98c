use std::fs;
use std::path::Path;

use super::report::sanitize;
use super::TrialRun;
use crate::error::{Error, Result};
use crate::eval::{write_histogram_csv, write_scores_csv, write_summary_csv, TrialSummary};

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub const RUN_JSON: &str = "run.json";

/// Writes every artifact of a run under `dir`:
/// `config.toml`, `repeats.csv`, `thresholds.csv`, `cell_failures.csv`,
/// `scores.csv`, `summary.csv`, `histogram.csv`, `run.json` and one
/// trajectory CSV per scored cell in `trajectories/`.
pub fn write_run(run: &TrialRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, run.config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let path = dir.join("repeats.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "setting",
        "repeat",
        "status",
        "failure",
        "n_train_rows",
        "selected_features",
        "sigma_f",
        "sigma_n",
        "raw_length_scales",
        "train_ids",
        "test_ids",
        "full_life_ids",
    ])?;
    for r in &run.repeats {
        w.write_record([
            r.setting.clone(),
            r.repeat.to_string(),
            if r.failure.is_some() { "failed" } else { "ok" }.to_string(),
            r.failure.clone().unwrap_or_default(),
            r.n_train_rows.to_string(),
            join(&r.selected_features),
            r.hyperparams.as_ref().map(|h| h.sigma_f.to_string()).unwrap_or_default(),
            r.hyperparams.as_ref().map(|h| h.sigma_n.to_string()).unwrap_or_default(),
            join(&r.raw_length_scales),
            join(&r.train_ids),
            join(&r.test_ids),
            join(&r.full_life_ids),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("thresholds.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["setting", "repeat", "stream", "thresholds"])?;
    for r in &run.repeats {
        if let Some(c) = &r.catalog {
            for t in &c.thresholds {
                w.write_record([r.setting.clone(), r.repeat.to_string(), t.stream.symbol().to_string(), join(&t.values)])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("cell_failures.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["setting", "repeat", "cell_id", "cause"])?;
    for r in &run.repeats {
        for (cell, cause) in &r.cell_failures {
            w.write_record([r.setting.clone(), r.repeat.to_string(), cell.clone(), cause.clone()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_scores_csv(&dir.join("scores.csv"), &run.scores)?;
    let summaries: Vec<(String, TrialSummary)> = run
        .summaries
        .iter()
        .filter_map(|(s, t)| t.clone().map(|t| (s.clone(), t)))
        .collect();
    write_summary_csv(&dir.join("summary.csv"), &summaries)?;
    write_histogram_csv(&dir.join("histogram.csv"), &run.scores, 20)?;

    let path = dir.join(RUN_JSON);
    let json = serde_json::to_string(run)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let tdir = dir.join("trajectories");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for (setting, repeat, traj) in &run.trajectories {
        let name = format!("{}_r{repeat}_{}.csv", sanitize(setting), sanitize(&traj.cell_id));
        traj.write_csv(&tdir.join(name))?;
    }
    Ok(())
}

/// Reads a run written by [`write_run`]; `path` is the directory or the
/// `run.json` file itself.
pub fn read_run(path: &Path) -> Result<TrialRun> {
    let file = if path.is_dir() { path.join(RUN_JSON) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    Ok(serde_json::from_str(&text)?)
}
