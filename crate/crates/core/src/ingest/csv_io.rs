//! CSV and manifest boundary for cycling data.
//!
//! One CSV of raw samples per cell plus an optional per-cycle capacity CSV,
//! tied together by a TOML manifest whose paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CellRecord, CycleCapacity, RawSample, SampleSeries, DEFAULT_NOMINAL_CAPACITY};
use crate::error::{Error, Result};

/// Column names of the raw sample CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub time: String,
    pub current: String,
    pub voltage: String,
    pub temperature: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            time: "time_s".into(),
            current: "current_a".into(),
            voltage: "voltage_v".into(),
            temperature: "temperature_c".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub samples: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<PathBuf>,
    #[serde(default = "default_nominal")]
    pub nominal_capacity_ah: f64,
    #[serde(default)]
    pub batch: String,
}

fn default_nominal() -> f64 {
    DEFAULT_NOMINAL_CAPACITY
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<ColumnSchema>,
    #[serde(default, rename = "cells")]
    pub cells: Vec<ManifestEntry>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

fn parse_field(record: &csv::StringRecord, idx: usize, path: &Path, row: usize) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    let value: f64 = raw.parse().map_err(|_| Error::DataRow {
        path: path.to_path_buf(),
        row,
        message: format!("cannot parse `{raw}` as a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::DataRow {
            path: path.to_path_buf(),
            row,
            message: "non-finite value".into(),
        });
    }
    Ok(value)
}

/// Reads one cell's raw sample CSV. The cell id defaults to the file stem.
pub fn parse_cycling_csv(path: &Path, schema: &ColumnSchema) -> Result<CellRecord> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let it = column_index(&headers, &schema.time, path)?;
    let ii = column_index(&headers, &schema.current, path)?;
    let iv = column_index(&headers, &schema.voltage, path)?;
    let itemp = column_index(&headers, &schema.temperature, path)?;

    let mut samples = SampleSeries::default();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let sample = RawSample {
            t: parse_field(&record, it, path, row)?,
            current: parse_field(&record, ii, path, row)?,
            voltage: parse_field(&record, iv, path, row)?,
            temperature: parse_field(&record, itemp, path, row)?,
        };
        samples.try_push(sample).map_err(|message| Error::DataRow {
            path: path.to_path_buf(),
            row,
            message,
        })?;
    }
    let cell_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(CellRecord::new(cell_id, DEFAULT_NOMINAL_CAPACITY, samples))
}

/// Reads a per-cycle capacity CSV (`cycle_index, discharge_capacity_ah, end_time_s`).
pub fn parse_capacity_csv(path: &Path) -> Result<Vec<CycleCapacity>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let ic = column_index(&headers, "cycle_index", path)?;
    let iq = column_index(&headers, "discharge_capacity_ah", path)?;
    let it = column_index(&headers, "end_time_s", path)?;
    let mut out: Vec<CycleCapacity> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cycle = parse_field(&record, ic, path, row)?;
        let q = parse_field(&record, iq, path, row)?;
        let t = parse_field(&record, it, path, row)?;
        if q <= 0.0 {
            return Err(Error::DataRow {
                path: path.to_path_buf(),
                row,
                message: format!("non-positive capacity {q}"),
            });
        }
        if let Some(prev) = out.last() {
            if t <= prev.end_time {
                return Err(Error::DataRow {
                    path: path.to_path_buf(),
                    row,
                    message: format!("cycle end time {t} does not increase"),
                });
            }
        }
        out.push(CycleCapacity {
            cycle_index: cycle as u32,
            end_time: t,
            discharge_capacity: q,
        });
    }
    Ok(out)
}

/// Loads every cell listed in a manifest, in manifest order.
pub fn load_population(manifest_path: &Path, schema: Option<&ColumnSchema>) -> Result<Vec<CellRecord>> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.cells.is_empty() {
        return Err(Error::Population(format!(
            "manifest {} lists no cells",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let schema = schema
        .cloned()
        .or_else(|| manifest.schema.clone())
        .unwrap_or_default();
    manifest
        .cells
        .par_iter()
        .map(|entry| {
            let mut cell = parse_cycling_csv(&base.join(&entry.samples), &schema)?;
            cell.cell_id = entry.id.clone();
            cell.batch = entry.batch.clone();
            cell.nominal_capacity = entry.nominal_capacity_ah;
            if let Some(cap) = &entry.capacity {
                cell.cycles = parse_capacity_csv(&base.join(cap))?;
            }
            Ok(cell)
        })
        .collect()
}

/// Writes a cell's samples and per-cycle capacities next to each other in
/// `dir`, returning the two file names.
pub fn write_cell_csv(dir: &Path, cell: &CellRecord) -> Result<(PathBuf, PathBuf)> {
    let samples_name = PathBuf::from(format!("{}.csv", cell.cell_id));
    let capacity_name = PathBuf::from(format!("{}_capacity.csv", cell.cell_id));

    let path = dir.join(&samples_name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["time_s", "current_a", "voltage_v", "temperature_c"])?;
    for i in 0..cell.samples.len() {
        let s = cell.samples.raw(i);
        w.serialize((s.t, s.current, s.voltage, s.temperature))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(&capacity_name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["cycle_index", "discharge_capacity_ah", "end_time_s"])?;
    for c in &cell.cycles {
        w.serialize((c.cycle_index, c.discharge_capacity, c.end_time))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((samples_name, capacity_name))
}

/// Writes every cell plus a `manifest.toml` into `dir`.
pub fn write_population(dir: &Path, cells: &[CellRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = cells
        .par_iter()
        .map(|cell| {
            let (samples, capacity) = write_cell_csv(dir, cell)?;
            Ok(ManifestEntry {
                id: cell.cell_id.clone(),
                samples,
                capacity: Some(capacity),
                nominal_capacity_ah: cell.nominal_capacity,
                batch: cell.batch.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        schema: None,
        cells: entries,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
