//! Correlation-based greedy feature selection.
//!
//! Features are ranked by absolute Pearson correlation with the capacity
//! transition. After each pick, every remaining feature that correlates with
//! the pick above the redundancy threshold is discarded.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;

pub const DEFAULT_REDUNDANCY_THRESHOLD: f64 = 0.85;
pub const TARGET_LABEL: &str = "delta_q";

/// Relative spread below which a column counts as constant.
const ZERO_VARIANCE_TOL: f64 = 1e-12;

/// `|cov(x, y) / (sd(x) sd(y))|` with 1/N normalization throughout.
///
/// Returns `Ok(None)` when either vector has zero variance.
pub fn abs_pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Usage(format!(
            "abs_pearson length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Usage("abs_pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let (sx, sy) = ((sxx / n).sqrt(), (syy / n).sqrt());
    if is_degenerate(sx, mx) || is_degenerate(sy, my) {
        return Ok(None);
    }
    Ok(Some(((sxy / n) / (sx * sy)).abs().min(1.0)))
}

fn is_degenerate(sd: f64, mean: f64) -> bool {
    sd <= ZERO_VARIANCE_TOL * mean.abs().max(1.0) || !sd.is_finite()
}

/// Symmetric `|Pearson|` matrix over every feature plus the target (last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    /// Row-major, `None` where a zero-variance column is involved.
    pub values: Vec<Option<f64>>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Index of the target row/column.
    pub fn target(&self) -> usize {
        self.size() - 1
    }

    pub fn n_features(&self) -> usize {
        self.size() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size() + j]
    }

    /// Similarity of feature `i` to the target.
    pub fn to_target(&self, i: usize) -> Option<f64> {
        self.get(i, self.target())
    }

    pub fn is_defined(&self, i: usize) -> bool {
        self.get(i, i).is_some()
    }

    /// CSV with a labeled header row and a label column; undefined entries are blank.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.size() {
            let mut rec = vec![self.labels[i].clone()];
            rec.extend((0..self.size()).map(|j| self.get(i, j).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Builds the similarity matrix from `columns` and `target` directly.
pub fn similarity_from_columns(labels: &[String], columns: &[Vec<f64>], target: &[f64]) -> Result<SimilarityMatrix> {
    if columns.len() != labels.len() {
        return Err(Error::Usage("one label per column required".into()));
    }
    let mut all: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    all.push(target);
    let n = all.len();
    let mut values = vec![None; n * n];
    let defined: Vec<bool> = all
        .iter()
        .map(|c| abs_pearson(c, c).map(|v| v.is_some()))
        .collect::<Result<_>>()?;
    for i in 0..n {
        if !defined[i] {
            continue;
        }
        values[i * n + i] = Some(1.0);
        for j in i + 1..n {
            if !defined[j] {
                continue;
            }
            let s = abs_pearson(all[i], all[j])?;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    let mut labels = labels.to_vec();
    labels.push(TARGET_LABEL.to_string());
    Ok(SimilarityMatrix { labels, values })
}

/// Similarity over every feature of a (training) table plus its targets.
pub fn build_similarity(table: &FeatureTable) -> Result<SimilarityMatrix> {
    if table.len() < 2 {
        return Err(Error::Usage(format!(
            "similarity needs at least two rows, table has {}",
            table.len()
        )));
    }
    let columns: Vec<Vec<f64>> = (0..table.width()).map(|j| table.column(j)).collect();
    similarity_from_columns(&table.feature_names, &columns, &table.targets())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionCause {
    /// Correlated with an already selected feature above the threshold.
    Redundancy,
    /// Still available when the pick budget ran out.
    LowRank,
    /// Zero variance; never selectable.
    Undefined,
}

impl fmt::Display for RejectionCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectionCause::Redundancy => "redundancy",
            RejectionCause::LowRank => "low-rank",
            RejectionCause::Undefined => "undefined",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub feature: usize,
    pub cause: RejectionCause,
    /// The selected feature that made this one redundant.
    pub partner: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Feature indices in pick order.
    pub selected: Vec<usize>,
    pub rejected: Vec<Rejection>,
    pub threshold: f64,
    /// Fewer than `k` features survived.
    pub shortfall: bool,
}

impl SelectionResult {
    pub fn rejection_of(&self, feature: usize) -> Option<&Rejection> {
        self.rejected.iter().find(|r| r.feature == feature)
    }

    pub fn labels(&self, sim: &SimilarityMatrix) -> Vec<String> {
        self.selected.iter().map(|&i| sim.labels[i].clone()).collect()
    }

    /// Appends `feature` if it is not already selected.
    pub fn force_include(&mut self, feature: usize) {
        if !self.selected.contains(&feature) {
            self.selected.push(feature);
            self.rejected.retain(|r| r.feature != feature);
        }
    }

    /// CSV listing every feature's outcome.
    pub fn write_csv(&self, sim: &SimilarityMatrix, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "feature", "outcome", "partner", "similarity_to_target"])?;
        for (rank, &i) in self.selected.iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                sim.labels[i].clone(),
                "selected".into(),
                String::new(),
                sim.to_target(i).map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        for r in &self.rejected {
            w.write_record([
                String::new(),
                sim.labels[r.feature].clone(),
                r.cause.to_string(),
                r.partner.map(|p| sim.labels[p].clone()).unwrap_or_default(),
                sim.to_target(r.feature).map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Greedy pick-then-prune selection of up to `k` features.
///
/// Each round takes the remaining feature most similar to the target (lower
/// index on ties) and drops every remaining feature whose similarity to it
/// exceeds `threshold`.
pub fn greedy_select(sim: &SimilarityMatrix, k: usize, threshold: f64) -> Result<SelectionResult> {
    greedy_select_with(sim, &[], k, threshold)
}

/// As [`greedy_select`], with `forced` features taken first (in order) and
/// pruned against before `k` further picks are made.
pub fn greedy_select_with(sim: &SimilarityMatrix, forced: &[usize], k: usize, threshold: f64) -> Result<SelectionResult> {
    if k == 0 && forced.is_empty() {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Usage(format!("threshold {threshold} outside (0, 1]")));
    }
    if let Some(&bad) = forced.iter().find(|&&f| f >= sim.n_features()) {
        return Err(Error::Usage(format!("forced feature {bad} out of range")));
    }
    let mut rejected = Vec::new();
    let mut remaining: Vec<usize> = Vec::new();
    for i in 0..sim.n_features() {
        if forced.contains(&i) {
            continue;
        }
        if sim.is_defined(i) && sim.to_target(i).is_some() {
            remaining.push(i);
        } else {
            rejected.push(Rejection {
                feature: i,
                cause: RejectionCause::Undefined,
                partner: None,
            });
        }
    }

    let mut selected: Vec<usize> = Vec::new();
    let prune = |best: usize, remaining: &mut Vec<usize>, rejected: &mut Vec<Rejection>| {
        remaining.retain(|&i| {
            let redundant = sim.get(i, best).is_some_and(|s| s > threshold);
            if redundant {
                rejected.push(Rejection {
                    feature: i,
                    cause: RejectionCause::Redundancy,
                    partner: Some(best),
                });
            }
            !redundant
        });
    };
    for &f in forced {
        if !selected.contains(&f) {
            selected.push(f);
            prune(f, &mut remaining, &mut rejected);
        }
    }
    let target_len = selected.len() + k;
    while selected.len() < target_len && !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining[1..] {
            if sim.to_target(i) > sim.to_target(best) {
                best = i;
            }
        }
        selected.push(best);
        remaining.retain(|&i| i != best);
        prune(best, &mut remaining, &mut rejected);
    }
    rejected.extend(remaining.into_iter().map(|i| Rejection {
        feature: i,
        cause: RejectionCause::LowRank,
        partner: None,
    }));
    let shortfall = selected.len() < target_len;
    Ok(SelectionResult {
        selected,
        rejected,
        threshold,
        shortfall,
    })
}
