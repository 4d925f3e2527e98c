//! Loading, cleaning and resampling of raw cycling data.
//!
//! A [`CellRecord`] holds one cell's measured streams in column form together
//! with its per-cycle discharge capacities. [`compute_capacity_series`]
//! resamples the capacities onto a uniform `dt` grid and smooths them, after
//! which [`chunk_cell`] splits the record into the `dt` windows that features
//! and capacity transitions are computed over.

mod csv_io;

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StreamKind;

pub use csv_io::{
    load_manifest, load_population, parse_capacity_csv, parse_cycling_csv, write_cell_csv,
    write_population, ColumnSchema, Manifest, ManifestEntry,
};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_HOUR: f64 = 3_600.0;

/// Nominal capacity of the A123 18650 cells the defaults are tuned for.
pub const DEFAULT_NOMINAL_CAPACITY: f64 = 1.1;
/// End of life is the first time capacity falls below this fraction of nominal.
pub const EOL_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawSample {
    /// Seconds since the start of the cell test.
    pub t: f64,
    /// Amperes, discharge negative.
    pub current: f64,
    pub voltage: f64,
    /// Degrees Celsius.
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedSample {
    pub abs_current: f64,
    pub power: f64,
    pub abs_power: f64,
}

impl DerivedSample {
    pub fn from_raw(raw: &RawSample) -> Self {
        let power = raw.voltage * raw.current;
        DerivedSample {
            abs_current: raw.current.abs(),
            power,
            abs_power: power.abs(),
        }
    }
}

/// Column-major storage of a cell's raw and derived streams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSeries {
    t: Vec<f64>,
    current: Vec<f64>,
    voltage: Vec<f64>,
    temperature: Vec<f64>,
    abs_current: Vec<f64>,
    power: Vec<f64>,
    abs_power: Vec<f64>,
}

impl SampleSeries {
    pub fn with_capacity(n: usize) -> Self {
        SampleSeries {
            t: Vec::with_capacity(n),
            current: Vec::with_capacity(n),
            voltage: Vec::with_capacity(n),
            temperature: Vec::with_capacity(n),
            abs_current: Vec::with_capacity(n),
            power: Vec::with_capacity(n),
            abs_power: Vec::with_capacity(n),
        }
    }

    /// Builds a validated series. The returned error carries the index of the
    /// first offending sample.
    pub fn from_raw(samples: &[RawSample]) -> std::result::Result<Self, (usize, String)> {
        let mut series = SampleSeries::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            series.try_push(*s).map_err(|msg| (i, msg))?;
        }
        Ok(series)
    }

    /// Appends a sample after checking the record invariants.
    pub fn try_push(&mut self, s: RawSample) -> std::result::Result<(), String> {
        if !(s.t.is_finite() && s.current.is_finite() && s.voltage.is_finite())
            || !s.temperature.is_finite()
        {
            return Err("non-finite value".into());
        }
        if s.t < 0.0 {
            return Err(format!("negative time {}", s.t));
        }
        if s.voltage <= 0.0 {
            return Err(format!("non-positive voltage {}", s.voltage));
        }
        if let Some(&last) = self.t.last() {
            if s.t <= last {
                return Err(format!("time {} does not increase past {}", s.t, last));
            }
        }
        self.push_unchecked(s);
        Ok(())
    }

    pub(crate) fn push_unchecked(&mut self, s: RawSample) {
        let d = DerivedSample::from_raw(&s);
        self.t.push(s.t);
        self.current.push(s.current);
        self.voltage.push(s.voltage);
        self.temperature.push(s.temperature);
        self.abs_current.push(d.abs_current);
        self.power.push(d.power);
        self.abs_power.push(d.abs_power);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn stream(&self, kind: StreamKind) -> &[f64] {
        match kind {
            StreamKind::Current => &self.current,
            StreamKind::Voltage => &self.voltage,
            StreamKind::Temperature => &self.temperature,
            StreamKind::AbsCurrent => &self.abs_current,
            StreamKind::Power => &self.power,
            StreamKind::AbsPower => &self.abs_power,
        }
    }

    pub(crate) fn stream_mut(&mut self, kind: StreamKind) -> &mut Vec<f64> {
        match kind {
            StreamKind::Current => &mut self.current,
            StreamKind::Voltage => &mut self.voltage,
            StreamKind::Temperature => &mut self.temperature,
            StreamKind::AbsCurrent => &mut self.abs_current,
            StreamKind::Power => &mut self.power,
            StreamKind::AbsPower => &mut self.abs_power,
        }
    }

    pub fn raw(&self, i: usize) -> RawSample {
        RawSample {
            t: self.t[i],
            current: self.current[i],
            voltage: self.voltage[i],
            temperature: self.temperature[i],
        }
    }

    pub fn derived(&self, i: usize) -> DerivedSample {
        DerivedSample {
            abs_current: self.abs_current[i],
            power: self.power[i],
            abs_power: self.abs_power[i],
        }
    }

    pub fn first_time(&self) -> Option<f64> {
        self.t.first().copied()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.t.last().copied()
    }

    /// Indices of samples with `t_start <= t <= t_end`.
    pub fn index_range(&self, t_start: f64, t_end: f64) -> Range<usize> {
        let lo = self.t.partition_point(|&t| t < t_start);
        let hi = self.t.partition_point(|&t| t <= t_end);
        lo..hi.max(lo)
    }

    /// Drops every sample with `t > t_cut`.
    pub fn truncate_after(&mut self, t_cut: f64) {
        let keep = self.t.partition_point(|&t| t <= t_cut);
        for kind in StreamKind::ALL {
            self.stream_mut(kind).truncate(keep);
        }
        self.t.truncate(keep);
    }
}

/// Discharge capacity measured on one cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleCapacity {
    pub cycle_index: u32,
    pub end_time: f64,
    pub discharge_capacity: f64,
}

/// Capacity on the uniform `dt` grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub t: f64,
    pub q: f64,
    pub q_smoothed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub batch: String,
    pub nominal_capacity: f64,
    pub samples: SampleSeries,
    pub cycles: Vec<CycleCapacity>,
    /// Resampled capacity; empty until [`compute_capacity_series`] runs.
    pub capacity: Vec<CapacityPoint>,
}

impl CellRecord {
    pub fn new(cell_id: impl Into<String>, nominal_capacity: f64, samples: SampleSeries) -> Self {
        CellRecord {
            cell_id: cell_id.into(),
            batch: String::new(),
            nominal_capacity,
            samples,
            cycles: Vec::new(),
            capacity: Vec::new(),
        }
    }

    pub fn eol_threshold(&self) -> f64 {
        EOL_FRACTION * self.nominal_capacity
    }

    /// First time (seconds) the smoothed capacity series, or the per-cycle
    /// capacities when no series exists yet, falls below `threshold`.
    /// Linearly interpolated between measurements.
    pub fn observed_eol_time(&self, threshold: f64) -> Option<f64> {
        if self.capacity.is_empty() {
            first_crossing(
                self.cycles.iter().map(|c| (c.end_time, c.discharge_capacity)),
                threshold,
            )
        } else {
            first_crossing(self.capacity.iter().map(|p| (p.t, p.q_smoothed)), threshold)
        }
    }

    /// Copy of the record with every sample, cycle and capacity point after
    /// `t_cut` removed.
    pub fn truncated(&self, t_cut: f64) -> CellRecord {
        let mut out = self.clone();
        out.samples.truncate_after(t_cut);
        out.cycles.retain(|c| c.end_time <= t_cut);
        out.capacity.retain(|p| p.t <= t_cut);
        out
    }
}

/// First downward crossing of `threshold`, linearly interpolated.
pub fn first_crossing(points: impl IntoIterator<Item = (f64, f64)>, threshold: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for (t, q) in points {
        if q < threshold {
            return Some(match prev {
                Some((t0, q0)) if q0 >= threshold => {
                    let frac = (q0 - threshold) / (q0 - q);
                    t0 + frac * (t - t0)
                }
                _ => t,
            });
        }
        prev = Some((t, q));
    }
    None
}

/// One `dt` window of a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub cell_id: String,
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Samples with `t_start <= t <= t_end`.
    pub sample_range: Range<usize>,
    /// `q_smoothed(t_end) - q_smoothed(t_start)`, Ah.
    pub delta_q: f64,
}

impl Chunk {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// A resampled cell together with its chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCell {
    pub record: CellRecord,
    pub chunks: Vec<Chunk>,
}

impl PreparedCell {
    pub fn cell_id(&self) -> &str {
        &self.record.cell_id
    }

    /// Capacity grid times (seconds).
    pub fn grid_times(&self) -> Vec<f64> {
        self.record.capacity.iter().map(|p| p.t).collect()
    }

    /// Smoothed capacity on the grid.
    pub fn observed_capacity(&self) -> Vec<f64> {
        self.record.capacity.iter().map(|p| p.q_smoothed).collect()
    }

    /// Keeps only data up to `t_cut`; chunks ending after it are dropped.
    pub fn truncated(&self, t_cut: f64) -> PreparedCell {
        let record = self.record.truncated(t_cut);
        let chunks = self
            .chunks
            .iter()
            .filter(|c| c.t_end <= t_cut)
            .cloned()
            .collect();
        PreparedCell { record, chunks }
    }
}

/// Resamples, smooths and chunks one cell.
pub fn prepare_cell(cell: &CellRecord, dt: f64, window: usize) -> Result<PreparedCell> {
    let record = compute_capacity_series(cell, dt, window)?;
    let chunks = chunk_cell(&record, dt)?;
    Ok(PreparedCell { record, chunks })
}

/// Drops excluded cells and cells whose end of life falls outside
/// `[min_life_days, max_life_days]`.
pub fn clean_population(
    cells: Vec<CellRecord>,
    min_life_days: f64,
    max_life_days: f64,
    excluded_ids: &[String],
) -> Result<Vec<CellRecord>> {
    if !(min_life_days < max_life_days) {
        return Err(Error::Usage(format!(
            "life window [{min_life_days}, {max_life_days}] is empty"
        )));
    }
    let excluded: HashSet<&str> = excluded_ids.iter().map(String::as_str).collect();
    let total = cells.len();
    let kept: Vec<CellRecord> = cells
        .into_iter()
        .filter(|cell| !excluded.contains(cell.cell_id.as_str()))
        .filter(|cell| match cell.observed_eol_time(cell.eol_threshold()) {
            Some(t) => {
                let days = t / SECONDS_PER_DAY;
                days >= min_life_days && days <= max_life_days
            }
            None => false,
        })
        .collect();
    log::info!("clean_population retained {} of {} cells", kept.len(), total);
    if kept.is_empty() {
        return Err(Error::Population(format!(
            "no cells left after cleaning {total} cells with life window [{min_life_days}, {max_life_days}] days"
        )));
    }
    Ok(kept)
}

/// Centered moving average whose window shrinks symmetrically near the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let slice = &values[i - h..=i + h];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Grid of `dt`-spaced boundaries from the first sample. A trailing partial
/// window is kept only when it spans at least `dt / 2`.
pub fn chunk_boundaries(t_first: f64, t_last: f64, dt: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let b = t_first + k as f64 * dt;
        if b > t_last + 1e-9 * dt {
            break;
        }
        out.push(b);
        k += 1;
    }
    if let Some(&last) = out.last() {
        if t_last - last >= 0.5 * dt {
            out.push(t_last);
        }
    }
    out
}

/// Resamples per-cycle capacities onto the `dt` grid (nearest cycle end time)
/// and smooths with a centered moving average of width `window`.
pub fn compute_capacity_series(cell: &CellRecord, dt: f64, window: usize) -> Result<CellRecord> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Usage(format!("dt must be positive, got {dt}")));
    }
    if cell.cycles.is_empty() {
        return Err(Error::Data(format!(
            "cell {} has no per-cycle capacity measurements",
            cell.cell_id
        )));
    }
    let (t_first, t_last) = match (cell.samples.first_time(), cell.samples.last_time()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            // Without raw samples the grid follows the capacity measurements.
            let a = cell.cycles.first().map(|c| c.end_time).unwrap_or(0.0);
            let b = cell.cycles.last().map(|c| c.end_time).unwrap_or(0.0);
            (a, b)
        }
    };
    let boundaries = chunk_boundaries(t_first, t_last, dt);
    if boundaries.len() < 2 {
        return Err(Error::Data(format!(
            "cell {} spans {:.1} h, fewer than 2 capacity points at dt = {:.1} h",
            cell.cell_id,
            (t_last - t_first) / SECONDS_PER_HOUR,
            dt / SECONDS_PER_HOUR
        )));
    }

    let ends: Vec<f64> = cell.cycles.iter().map(|c| c.end_time).collect();
    let raw_q: Vec<f64> = boundaries
        .iter()
        .map(|&b| cell.cycles[nearest_index(&ends, b)].discharge_capacity)
        .collect();
    let smoothed = moving_average(&raw_q, window);

    let mut out = cell.clone();
    out.capacity = boundaries
        .iter()
        .zip(raw_q.iter().zip(&smoothed))
        .map(|(&t, (&q, &q_smoothed))| CapacityPoint { t, q, q_smoothed })
        .collect();
    Ok(out)
}

/// Index of the element of sorted `xs` nearest to `x`; lower index on ties.
fn nearest_index(xs: &[f64], x: f64) -> usize {
    let i = xs.partition_point(|&v| v < x);
    if i == 0 {
        0
    } else if i == xs.len() {
        xs.len() - 1
    } else if x - xs[i - 1] <= xs[i] - x {
        i - 1
    } else {
        i
    }
}

/// Splits a resampled cell into one chunk per consecutive capacity-point pair.
pub fn chunk_cell(cell: &CellRecord, dt: f64) -> Result<Vec<Chunk>> {
    if cell.capacity.len() < 2 {
        return Err(Error::Data(format!(
            "cell {} has no resampled capacity series",
            cell.cell_id
        )));
    }
    cell.capacity
        .windows(2)
        .enumerate()
        .map(|(index, pair)| {
            let (a, b) = (pair[0], pair[1]);
            let duration = b.t - a.t;
            if duration < 0.5 * dt - 1e-9 || duration > 1.1 * dt {
                return Err(Error::Data(format!(
                    "cell {} chunk {index} spans {duration} s, expected about {dt} s",
                    cell.cell_id
                )));
            }
            Ok(Chunk {
                cell_id: cell.cell_id.clone(),
                index,
                t_start: a.t,
                t_end: b.t,
                sample_range: cell.samples.index_range(a.t, b.t),
                delta_q: b.q_smoothed - a.q_smoothed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell_with_cycles(days: f64, dt: f64, q: impl Fn(f64) -> f64) -> CellRecord {
        let mut samples = SampleSeries::default();
        let n = (days * SECONDS_PER_DAY / 600.0) as usize;
        for i in 0..=n {
            samples.push_unchecked(RawSample {
                t: i as f64 * 600.0,
                current: -2.0,
                voltage: 3.3,
                temperature: 30.0,
            });
        }
        let mut cell = CellRecord::new("c", DEFAULT_NOMINAL_CAPACITY, samples);
        let n_cycles = (days * SECONDS_PER_DAY / dt * 4.0) as u32;
        cell.cycles = (0..=n_cycles)
            .map(|k| {
                let t = k as f64 * dt / 4.0;
                CycleCapacity {
                    cycle_index: k,
                    end_time: t,
                    discharge_capacity: q(t),
                }
            })
            .collect();
        cell
    }

    #[test]
    fn derived_streams_follow_definitions() {
        let raw = RawSample {
            t: 0.0,
            current: -4.0,
            voltage: 3.0,
            temperature: 30.0,
        };
        let d = DerivedSample::from_raw(&raw);
        assert_eq!(d.abs_current, 4.0);
        assert_eq!(d.power, -12.0);
        assert_eq!(d.abs_power, 12.0);
    }

    #[test]
    fn series_rejects_non_increasing_time() {
        let mk = |t| RawSample {
            t,
            current: 1.0,
            voltage: 3.0,
            temperature: 25.0,
        };
        let err = SampleSeries::from_raw(&[mk(0.0), mk(2.0), mk(1.0)]).unwrap_err();
        assert_eq!(err.0, 2);
    }

    #[test]
    fn moving_average_of_constant_is_constant() {
        let v = vec![1.1; 9];
        for w in [1, 3, 5, 7] {
            assert!(moving_average(&v, w).iter().all(|&x| (x - 1.1).abs() < 1e-15));
        }
    }

    #[test]
    fn moving_average_three_points() {
        let s = moving_average(&[1.0, 0.9, 0.8], 3);
        assert!((s[1] - 0.9).abs() < 1e-15);
        // ends shrink to width 1
        assert_eq!(s[0], 1.0);
        assert_eq!(s[2], 0.8);
    }

    #[test]
    fn moving_average_preserves_linear_interior() {
        let v: Vec<f64> = (0..100).map(|k| 1.1 - 0.001 * k as f64).collect();
        let s = moving_average(&v, 5);
        for k in 0..100 {
            assert!((s[k] - v[k]).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn chunk_counts_and_trailing_cutoff() {
        let dt = 12.0 * SECONDS_PER_HOUR;
        // 25 h of data: boundaries at 0, 12, 24 h and the final hour is dropped.
        let cell = cell_with_cycles(25.0 / 24.0, dt, |_| 1.1);
        let cell = compute_capacity_series(&cell, dt, 5).unwrap();
        assert_eq!(cell.capacity.len(), 3);
        assert_eq!(cell.capacity[2].t, 24.0 * SECONDS_PER_HOUR);
        let chunks = chunk_cell(&cell, dt).unwrap();
        assert_eq!(chunks.len(), 2);
    }

    #[test]
    fn trailing_partial_chunk_above_half_dt_is_kept() {
        let dt = 12.0 * SECONDS_PER_HOUR;
        let cell = cell_with_cycles(31.0 / 24.0, dt, |_| 1.1);
        let cell = compute_capacity_series(&cell, dt, 1).unwrap();
        assert_eq!(cell.capacity.len(), 4);
        let chunks = chunk_cell(&cell, dt).unwrap();
        assert_eq!(chunks.len(), 3);
        assert!((chunks[2].duration() - 7.0 * SECONDS_PER_HOUR).abs() < 1e-6);
    }

    #[test]
    fn delta_q_is_smoothed_difference_and_telescopes() {
        let dt = 12.0 * SECONDS_PER_HOUR;
        let cell = cell_with_cycles(10.0, dt, |t| 1.1 - 0.01 * (t / SECONDS_PER_DAY).powi(2) / 10.0);
        let cell = compute_capacity_series(&cell, dt, 5).unwrap();
        let chunks = chunk_cell(&cell, dt).unwrap();
        for (c, pair) in chunks.iter().zip(cell.capacity.windows(2)) {
            assert_eq!(c.delta_q, pair[1].q_smoothed - pair[0].q_smoothed);
        }
        let total: f64 = chunks.iter().map(|c| c.delta_q).sum();
        let span = cell.capacity.last().unwrap().q_smoothed - cell.capacity[0].q_smoothed;
        assert!((total - span).abs() < 1e-12);
    }

    #[test]
    fn chunk_delta_q_example() {
        let dt = 12.0 * SECONDS_PER_HOUR;
        let mut cell = cell_with_cycles(1.0, dt, |_| 1.1);
        cell.capacity = vec![
            CapacityPoint { t: 0.0, q: 1.10, q_smoothed: 1.10 },
            CapacityPoint { t: dt, q: 1.09, q_smoothed: 1.09 },
        ];
        let chunks = chunk_cell(&cell, dt).unwrap();
        assert!((chunks[0].delta_q + 0.01).abs() < 1e-12);
    }

    #[test]
    fn resampling_uses_nearest_cycle() {
        assert_eq!(nearest_index(&[0.0, 10.0, 20.0], 14.0), 1);
        assert_eq!(nearest_index(&[0.0, 10.0, 20.0], 16.0), 2);
        assert_eq!(nearest_index(&[0.0, 10.0, 20.0], 15.0), 1);
        assert_eq!(nearest_index(&[0.0, 10.0, 20.0], -3.0), 0);
        assert_eq!(nearest_index(&[0.0, 10.0, 20.0], 99.0), 2);
    }

    #[test]
    fn capacity_series_rejects_even_window() {
        let dt = 12.0 * SECONDS_PER_HOUR;
        let cell = cell_with_cycles(2.0, dt, |_| 1.1);
        assert!(matches!(
            compute_capacity_series(&cell, dt, 4),
            Err(Error::Usage(_))
        ));
    }

    fn linear_fade_cell(id: &str, eol_day: f64) -> CellRecord {
        let dt = 12.0 * SECONDS_PER_HOUR;
        // 1.1 Ah at t = 0 down to 0.88 Ah at eol_day, observed past it
        let slope = 0.22 / eol_day;
        let mut cell = cell_with_cycles(eol_day * 1.2, dt, move |t| 1.1 - slope * t / SECONDS_PER_DAY);
        cell.cell_id = id.into();
        cell
    }

    #[test]
    fn clean_population_life_window_and_exclusions() {
        let cells = vec![
            linear_fade_cell("a", 20.0),
            linear_fade_cell("b", 10.0),
            linear_fade_cell("c", 25.0),
        ];
        let kept = clean_population(cells, 15.0, 40.0, &["c".to_string()]).unwrap();
        let ids: Vec<_> = kept.iter().map(|c| c.cell_id.as_str()).collect();
        assert_eq!(ids, ["a"]);
        let again = clean_population(kept.clone(), 15.0, 40.0, &["c".to_string()]).unwrap();
        assert_eq!(again, kept);
    }

    #[test]
    fn clean_population_empty_result_is_error() {
        let cells = vec![linear_fade_cell("b", 10.0)];
        assert!(matches!(
            clean_population(cells, 15.0, 40.0, &[]),
            Err(Error::Population(_))
        ));
    }

    #[test]
    fn first_crossing_interpolates() {
        let day = SECONDS_PER_DAY;
        let t = first_crossing([(0.0, 1.0), (day, 0.9), (2.0 * day, 0.8)], 0.88).unwrap();
        assert!((t / day - 1.2).abs() < 1e-12);
        assert!(first_crossing([(0.0, 1.0), (day, 0.95)], 0.88).is_none());
    }
}
