//! Time-in-range features.
//!
//! A [`FeatureCatalog`] fixes, per measured or derived stream, the values at a
//! list of population percentiles. Every pair of thresholds `(lo, hi)` defines
//! a feature: the fraction of a chunk's duration the stream spends in
//! `[lo, hi)`. Elapsed time and its square root, both taken at the chunk end,
//! complete the feature set.
//!
//! Occupancy is integrated exactly on the piecewise-linear interpolant of the
//! samples: for a threshold `c`, [`time_below`] measures the time the signal is
//! strictly below `c`, and the occupancy of `[lo, hi)` is the difference of two
//! such measures. Nested ranges are therefore additive by construction.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CellRecord, Chunk, PreparedCell, SECONDS_PER_DAY};
use crate::stats::percentile_sorted;

pub const DEFAULT_PERCENTILES: [f64; 4] = [0.01, 0.33, 0.67, 0.99];

pub const TIME_LABEL: &str = "time";
pub const SQRT_TIME_LABEL: &str = "sqrt_time";

/// The six streams features are generated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Current,
    Voltage,
    Temperature,
    AbsCurrent,
    Power,
    AbsPower,
}

impl StreamKind {
    pub const ALL: [StreamKind; 6] = [
        StreamKind::Current,
        StreamKind::Voltage,
        StreamKind::Temperature,
        StreamKind::AbsCurrent,
        StreamKind::Power,
        StreamKind::AbsPower,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            StreamKind::Current => "I",
            StreamKind::Voltage => "V",
            StreamKind::Temperature => "T",
            StreamKind::AbsCurrent => "absI",
            StreamKind::Power => "P",
            StreamKind::AbsPower => "absP",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureType {
    /// Occupancy of `[threshold[lower], threshold[upper])`; indices are 0-based.
    Range {
        stream: StreamKind,
        lower: usize,
        upper: usize,
    },
    /// Days since test start at the chunk end.
    Time,
    SqrtTime,
}

impl FeatureType {
    /// Labels use 1-based percentile positions, e.g. `V_2,3`.
    pub fn label(&self) -> String {
        match *self {
            FeatureType::Range {
                stream,
                lower,
                upper,
            } => format!("{}_{},{}", stream.symbol(), lower + 1, upper + 1),
            FeatureType::Time => TIME_LABEL.to_string(),
            FeatureType::SqrtTime => SQRT_TIME_LABEL.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamThresholds {
    pub stream: StreamKind,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    pub percentiles: Vec<f64>,
    /// One entry per stream, in [`StreamKind::ALL`] order.
    pub thresholds: Vec<StreamThresholds>,
    pub feature_types: Vec<FeatureType>,
    /// Streams whose pooled samples had zero spread.
    #[serde(default)]
    pub degenerate_streams: Vec<StreamKind>,
}

impl FeatureCatalog {
    /// Builds a catalog from explicit thresholds, enumerating feature types.
    pub fn from_thresholds(percentiles: Vec<f64>, thresholds: Vec<StreamThresholds>) -> Result<Self> {
        validate_percentiles(&percentiles)?;
        if thresholds.len() != StreamKind::ALL.len()
            || thresholds
                .iter()
                .zip(StreamKind::ALL)
                .any(|(t, k)| t.stream != k || t.values.len() != percentiles.len())
        {
            return Err(Error::Usage(
                "thresholds must list every stream in order with one value per percentile".into(),
            ));
        }
        for t in &thresholds {
            if t.values.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Usage(format!(
                    "thresholds for {:?} are not non-decreasing",
                    t.stream
                )));
            }
        }
        let feature_types = enumerate_feature_types(percentiles.len());
        let degenerate_streams = thresholds
            .iter()
            .filter(|t| t.values.first() == t.values.last())
            .map(|t| t.stream)
            .collect();
        Ok(FeatureCatalog {
            percentiles,
            thresholds,
            feature_types,
            degenerate_streams,
        })
    }

    pub fn thresholds_for(&self, stream: StreamKind) -> &[f64] {
        &self
            .thresholds
            .iter()
            .find(|t| t.stream == stream)
            .expect("catalog lists every stream")
            .values
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.feature_types.iter().map(FeatureType::label).collect()
    }

    pub fn width(&self) -> usize {
        self.feature_types.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.feature_types.iter().position(|f| f.label() == label)
    }

    pub fn time_index(&self) -> usize {
        self.feature_types
            .iter()
            .position(|f| *f == FeatureType::Time)
            .expect("catalog always includes time")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn validate_percentiles(percentiles: &[f64]) -> Result<()> {
    if percentiles.len() < 2 {
        return Err(Error::Usage("need at least two percentiles".into()));
    }
    if percentiles.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Usage(format!(
            "percentiles must lie in (0, 1): {percentiles:?}"
        )));
    }
    if percentiles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage(format!(
            "percentiles must be strictly increasing: {percentiles:?}"
        )));
    }
    Ok(())
}

/// Every threshold pair `i < j` per stream, then time and sqrt(time).
pub fn enumerate_feature_types(n_percentiles: usize) -> Vec<FeatureType> {
    let mut out = Vec::new();
    for stream in StreamKind::ALL {
        for lower in 0..n_percentiles {
            for upper in lower + 1..n_percentiles {
                out.push(FeatureType::Range {
                    stream,
                    lower,
                    upper,
                });
            }
        }
    }
    out.push(FeatureType::Time);
    out.push(FeatureType::SqrtTime);
    out
}

/// Pools every sample of every training cell per stream and takes exact
/// order-statistic percentiles.
pub fn build_catalog(training_cells: &[&CellRecord], percentiles: &[f64]) -> Result<FeatureCatalog> {
    validate_percentiles(percentiles)?;
    if training_cells.is_empty() {
        return Err(Error::Population("no training cells for the feature catalog".into()));
    }
    let total: usize = training_cells.iter().map(|c| c.samples.len()).sum();
    if total == 0 {
        return Err(Error::Population("training cells contain no samples".into()));
    }
    let thresholds: Vec<StreamThresholds> = StreamKind::ALL
        .par_iter()
        .map(|&stream| {
            let mut pooled = Vec::with_capacity(total);
            for cell in training_cells {
                pooled.extend_from_slice(cell.samples.stream(stream));
            }
            pooled.sort_unstable_by(f64::total_cmp);
            StreamThresholds {
                stream,
                values: percentiles
                    .iter()
                    .map(|&p| percentile_sorted(&pooled, p))
                    .collect(),
            }
        })
        .collect();
    let catalog = FeatureCatalog::from_thresholds(percentiles.to_vec(), thresholds)?;
    for stream in &catalog.degenerate_streams {
        log::warn!("stream {stream:?} has zero spread; its range features are constant");
    }
    Ok(catalog)
}

/// Time within `[t_start, t_end]` that the linear interpolant of
/// `(times, values)` spends strictly below each of `levels`, added to `out`.
pub fn time_below(times: &[f64], values: &[f64], t_start: f64, t_end: f64, levels: &[f64], out: &mut [f64]) {
    debug_assert_eq!(levels.len(), out.len());
    let n = times.len();
    if n < 2 || t_end <= t_start {
        return;
    }
    // first segment whose right end lies past t_start
    let first = times.partition_point(|&t| t <= t_start).saturating_sub(1);
    for i in first..n - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        if t0 >= t_end {
            break;
        }
        let a = t0.max(t_start);
        let b = t1.min(t_end);
        if b <= a {
            continue;
        }
        let (v0, v1) = (values[i], values[i + 1]);
        let slope = (v1 - v0) / (t1 - t0);
        let va = v0 + slope * (a - t0);
        let vb = v0 + slope * (b - t0);
        let width = b - a;
        for (acc, &c) in out.iter_mut().zip(levels) {
            let below = match (va < c, vb < c) {
                (true, true) => width,
                (false, false) => 0.0,
                (true, false) => ((c - va) / (vb - va) * width).clamp(0.0, width),
                (false, true) => ((c - vb) / (va - vb) * width).clamp(0.0, width),
            };
            *acc += below;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub cell_id: String,
    pub chunk_index: usize,
    pub t_end: f64,
    /// Aligned with the catalog's `feature_types`.
    pub values: Vec<f64>,
    pub target: f64,
}

/// Feature rows for each chunk of one cell.
pub fn compute_features(cell: &CellRecord, chunks: &[Chunk], catalog: &FeatureCatalog) -> Result<Vec<FeatureRow>> {
    let times = cell.samples.times();
    let mut below_by_stream: Vec<Vec<f64>> = catalog
        .thresholds
        .iter()
        .map(|t| vec![0.0; t.values.len()])
        .collect();
    chunks
        .iter()
        .map(|chunk| {
            if chunk.cell_id != cell.cell_id {
                return Err(Error::Usage(format!(
                    "chunk {} belongs to cell {}, not {}",
                    chunk.index, chunk.cell_id, cell.cell_id
                )));
            }
            if chunk.sample_range.is_empty() {
                return Err(Error::Feature(format!(
                    "chunk {} of cell {} ({}..{} s) contains no samples",
                    chunk.index, chunk.cell_id, chunk.t_start, chunk.t_end
                )));
            }
            let duration = chunk.duration();
            for (th, below) in catalog.thresholds.iter().zip(below_by_stream.iter_mut()) {
                below.iter_mut().for_each(|b| *b = 0.0);
                time_below(
                    times,
                    cell.samples.stream(th.stream),
                    chunk.t_start,
                    chunk.t_end,
                    &th.values,
                    below,
                );
            }
            let days = chunk.t_end / SECONDS_PER_DAY;
            let values: Vec<f64> = catalog
                .feature_types
                .iter()
                .map(|ft| match *ft {
                    FeatureType::Range {
                        stream,
                        lower,
                        upper,
                    } => {
                        let below = &below_by_stream[stream_position(catalog, stream)];
                        ((below[upper] - below[lower]) / duration).clamp(0.0, 1.0)
                    }
                    FeatureType::Time => days,
                    FeatureType::SqrtTime => days.sqrt(),
                })
                .collect();
            if values.iter().any(|v| !v.is_finite()) || !chunk.delta_q.is_finite() {
                return Err(Error::Feature(format!(
                    "non-finite feature in chunk {} of cell {}",
                    chunk.index, chunk.cell_id
                )));
            }
            Ok(FeatureRow {
                cell_id: cell.cell_id.clone(),
                chunk_index: chunk.index,
                t_end: chunk.t_end,
                values,
                target: chunk.delta_q,
            })
        })
        .collect()
}

fn stream_position(catalog: &FeatureCatalog, stream: StreamKind) -> usize {
    catalog
        .thresholds
        .iter()
        .position(|t| t.stream == stream)
        .expect("catalog lists every stream")
}

/// Sizes before and after feature generation: `n` raw time points across `m`
/// streams reduced to `p` rows of `q` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub catalog: FeatureCatalog,
    pub feature_names: Vec<String>,
    pub rows: Vec<FeatureRow>,
    pub summary: ReductionSummary,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.values[j]).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    /// Row-major matrix of the chosen columns.
    pub fn select(&self, columns: &[usize]) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| columns.iter().map(|&j| r.values[j]).collect())
            .collect()
    }

    /// Writes the table as CSV: `cell_id, chunk, t_end_s`, every feature, then `delta_q`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["cell_id".to_string(), "chunk".into(), "t_end_s".into()];
        header.extend(self.feature_names.iter().cloned());
        header.push("delta_q".into());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.cell_id.clone(), row.chunk_index.to_string(), row.t_end.to_string()];
            rec.extend(row.values.iter().map(f64::to_string));
            rec.push(row.target.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Computes and concatenates feature rows for every cell, in the given order.
pub fn assemble_table(cells: &[PreparedCell], catalog: &FeatureCatalog) -> Result<FeatureTable> {
    if cells.is_empty() {
        return Err(Error::Population("no cells to build a feature table from".into()));
    }
    let per_cell: Vec<Vec<FeatureRow>> = cells
        .par_iter()
        .map(|c| compute_features(&c.record, &c.chunks, catalog))
        .collect::<Result<_>>()?;
    let rows: Vec<FeatureRow> = per_cell.into_iter().flatten().collect();
    let q = catalog.width();
    if let Some(bad) = rows.iter().find(|r| r.values.len() != q) {
        return Err(Error::Internal(format!(
            "row of cell {} has width {}, expected {q}",
            bad.cell_id,
            bad.values.len()
        )));
    }
    let summary = ReductionSummary {
        n: cells.iter().map(|c| c.record.samples.len()).sum(),
        m: StreamKind::ALL.len(),
        p: rows.len(),
        q,
    };
    log::info!(
        "feature table: n = {} time points x m = {} streams -> p = {} rows x q = {} features",
        summary.n,
        summary.m,
        summary.p,
        summary.q
    );
    Ok(FeatureTable {
        feature_names: catalog.feature_names(),
        catalog: catalog.clone(),
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{RawSample, SampleSeries};

    fn flat_catalog(voltage: [f64; 4]) -> FeatureCatalog {
        let thresholds = StreamKind::ALL
            .iter()
            .map(|&stream| StreamThresholds {
                stream,
                values: if stream == StreamKind::Voltage {
                    voltage.to_vec()
                } else {
                    vec![-10.0, -1.0, 1.0, 10.0]
                },
            })
            .collect();
        FeatureCatalog::from_thresholds(DEFAULT_PERCENTILES.to_vec(), thresholds).unwrap()
    }

    fn cell_from(voltages: impl Fn(f64) -> f64, t_end: f64, step: f64) -> CellRecord {
        let mut s = SampleSeries::default();
        let n = (t_end / step).round() as usize;
        for i in 0..=n {
            let t = i as f64 * step;
            s.push_unchecked(RawSample {
                t,
                current: 0.5,
                voltage: voltages(t),
                temperature: 30.0,
            });
        }
        CellRecord::new("c", 1.1, s)
    }

    fn whole_chunk(cell: &CellRecord, t_start: f64, t_end: f64) -> Chunk {
        Chunk {
            cell_id: cell.cell_id.clone(),
            index: 0,
            t_start,
            t_end,
            sample_range: cell.samples.index_range(t_start, t_end),
            delta_q: -0.001,
        }
    }

    #[test]
    fn default_enumeration_has_38_types_in_table_order() {
        let types = enumerate_feature_types(4);
        assert_eq!(types.len(), 38);
        let v: Vec<String> = types
            .iter()
            .filter(|t| matches!(t, FeatureType::Range { stream: StreamKind::Voltage, .. }))
            .map(FeatureType::label)
            .collect();
        assert_eq!(v, ["V_1,2", "V_1,3", "V_1,4", "V_2,3", "V_2,4", "V_3,4"]);
        assert_eq!(types[36], FeatureType::Time);
        assert_eq!(types[37], FeatureType::SqrtTime);
    }

    #[test]
    fn full_occupancy_of_middle_range() {
        let catalog = flat_catalog([2.0, 3.12, 3.51, 3.6]);
        let cell = cell_from(|t| 3.2 + 0.2 * (t / 1000.0).sin().abs(), 43_200.0, 60.0);
        let chunk = whole_chunk(&cell, 0.0, 43_200.0);
        let rows = compute_features(&cell, &[chunk], &catalog).unwrap();
        let j = catalog.index_of("V_2,3").unwrap();
        assert!((rows[0].values[j] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_features_at_chunk_end() {
        let catalog = flat_catalog([2.0, 3.12, 3.51, 3.6]);
        let cell = cell_from(|_| 3.3, 4.0 * SECONDS_PER_DAY, 3600.0);
        let chunk = whole_chunk(&cell, 3.5 * SECONDS_PER_DAY, 4.0 * SECONDS_PER_DAY);
        let row = &compute_features(&cell, &[chunk], &catalog).unwrap()[0];
        assert_eq!(row.values[catalog.time_index()], 4.0);
        assert_eq!(row.values[catalog.index_of(SQRT_TIME_LABEL).unwrap()], 2.0);
    }

    #[test]
    fn time_below_crossing_interpolation() {
        // ramp 0 -> 10 over 10 s: below 2.5 for 2.5 s
        let mut out = [0.0; 2];
        time_below(&[0.0, 10.0], &[0.0, 10.0], 0.0, 10.0, &[2.5, 20.0], &mut out);
        assert!((out[0] - 2.5).abs() < 1e-12);
        assert!((out[1] - 10.0).abs() < 1e-12);
        // clipping to a window inside a segment
        let mut out = [0.0];
        time_below(&[0.0, 10.0], &[0.0, 10.0], 1.0, 4.0, &[2.0], &mut out);
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_below_on_falling_segment() {
        // ramp 10 -> 0 over 10 s: below 2.5 for the last 2.5 s
        let mut out = [0.0; 3];
        time_below(&[0.0, 10.0], &[10.0, 0.0], 0.0, 10.0, &[2.5, 7.0, 20.0], &mut out);
        assert!((out[0] - 2.5).abs() < 1e-12);
        assert!((out[1] - 7.0).abs() < 1e-12);
        assert!((out[2] - 10.0).abs() < 1e-12);
        // up then down: 0 -> 10 -> 0, below 4 for 4 s on each side
        let mut out = [0.0];
        time_below(&[0.0, 10.0, 20.0], &[0.0, 10.0, 0.0], 0.0, 20.0, &[4.0], &mut out);
        assert!((out[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn value_at_upper_threshold_is_excluded() {
        let mut out = [0.0; 2];
        time_below(&[0.0, 5.0], &[3.0, 3.0], 0.0, 5.0, &[3.0, 3.5], &mut out);
        // [3.0, 3.5) contains the constant 3.0 signal fully; [.., 3.0) does not
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 5.0);
    }

    #[test]
    fn empty_chunk_is_feature_error() {
        let catalog = flat_catalog([2.0, 3.12, 3.51, 3.6]);
        let cell = cell_from(|_| 3.3, 100.0, 10.0);
        let chunk = Chunk {
            cell_id: "c".into(),
            index: 7,
            t_start: 200.0,
            t_end: 300.0,
            sample_range: 11..11,
            delta_q: 0.0,
        };
        let err = compute_features(&cell, &[chunk], &catalog).unwrap_err();
        assert!(matches!(err, Error::Feature(ref m) if m.contains("chunk 7")));
    }

    #[test]
    fn catalog_rejects_bad_percentiles() {
        let cell = cell_from(|_| 3.3, 100.0, 10.0);
        assert!(build_catalog(&[&cell], &[0.5, 0.2]).is_err());
        assert!(build_catalog(&[&cell], &[0.0, 0.5]).is_err());
        assert!(build_catalog(&[], &DEFAULT_PERCENTILES).is_err());
    }

    #[test]
    fn constant_stream_marked_degenerate() {
        let cell = cell_from(|t| 3.0 + t / 1000.0, 100.0, 10.0);
        let catalog = build_catalog(&[&cell], &DEFAULT_PERCENTILES).unwrap();
        assert!(catalog.degenerate_streams.contains(&StreamKind::Temperature));
        assert!(!catalog.degenerate_streams.contains(&StreamKind::Voltage));
    }
}
