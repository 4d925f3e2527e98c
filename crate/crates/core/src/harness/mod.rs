//! End-to-end trials: repeated random splits, limited late-life data and the
//! feature-count sweep.

mod output;
mod report;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{score_cell, summarize, CellScore, ObservedTruth, TrialSummary};
use crate::features::{assemble_table, build_catalog, compute_features, FeatureCatalog, DEFAULT_PERCENTILES};
use crate::gpr::{BfgsOptions, FitOptions, GpModel, Hyperparams, Prediction};
use crate::ingest::{clean_population, load_population, prepare_cell, CellRecord, ColumnSchema, PreparedCell, SECONDS_PER_HOUR};
use crate::selection::{build_similarity, greedy_select_with, DEFAULT_REDUNDANCY_THRESHOLD};
use crate::synthgen::{generate_population, SynthSpec, SynthTruth};
use crate::trajectory::{integrate, knee_of_curve, TrajectoryForecast, DEFAULT_EARLY_FRACTION, DEFAULT_LATE_FRACTION};

pub use output::{read_run, write_run, RUN_JSON};
pub use report::render_report;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    LargeScale,
    LimitedData,
    FeatureSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
    },
    Manifest {
        path: PathBuf,
        #[serde(default)]
        schema: Option<ColumnSchema>,
        /// Cells whose end of life falls outside this window are dropped.
        #[serde(default)]
        life_window_days: Option<[f64; 2]>,
        #[serde(default)]
        excluded_ids: Vec<String>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub restarts: usize,
    /// Rows used for likelihood maximization; all rows are conditioned on.
    pub max_fit_rows: Option<usize>,
    pub max_iter: usize,
    pub perturbation: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            restarts: 5,
            max_fit_rows: Some(400),
            max_iter: 200,
            perturbation: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub mode: TrialMode,
    pub seed: u64,
    pub n_repeats: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Features picked in addition to time.
    pub k_features: usize,
    pub redundancy_threshold: f64,
    /// Chunk length, seconds.
    pub dt: f64,
    pub smoothing_window: usize,
    pub percentiles: Vec<f64>,
    pub early_fraction: f64,
    pub late_fraction: f64,
    pub limited_full_life_counts: Vec<usize>,
    pub limited_n_train: usize,
    pub limited_n_test: usize,
    pub feature_counts: Vec<usize>,
    /// 0 uses every available core.
    pub workers: usize,
    pub gp: GpConfig,
    pub data: DataSource,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            mode: TrialMode::LargeScale,
            seed: 1,
            n_repeats: 20,
            n_train: 100,
            n_test: 30,
            k_features: 5,
            redundancy_threshold: DEFAULT_REDUNDANCY_THRESHOLD,
            dt: 12.0 * SECONDS_PER_HOUR,
            smoothing_window: 5,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            early_fraction: DEFAULT_EARLY_FRACTION,
            late_fraction: DEFAULT_LATE_FRACTION,
            limited_full_life_counts: vec![3, 5, 10, 15, 20, 25, 30],
            limited_n_train: 30,
            limited_n_test: 10,
            feature_counts: vec![1, 2, 3, 4, 5, 10],
            workers: 0,
            gp: GpConfig::default(),
            data: DataSource::default(),
        }
    }
}

impl TrialConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrialConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_repeats == 0 {
            return bad("n_repeats must be at least 1".into());
        }
        if self.n_train < 2 || self.n_test == 0 {
            return bad(format!("need n_train >= 2 and n_test >= 1, got {} and {}", self.n_train, self.n_test));
        }
        if !(self.redundancy_threshold > 0.0 && self.redundancy_threshold <= 1.0) {
            return bad(format!("redundancy_threshold {} outside (0, 1]", self.redundancy_threshold));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return bad(format!("smoothing_window must be odd, got {}", self.smoothing_window));
        }
        if !(self.early_fraction > 0.0 && self.late_fraction > 0.0 && self.early_fraction + self.late_fraction <= 1.0) {
            return bad("early_fraction and late_fraction must be positive with sum at most 1".into());
        }
        if self.gp.restarts == 0 || self.gp.max_iter == 0 {
            return bad("gp.restarts and gp.max_iter must be at least 1".into());
        }
        match self.mode {
            TrialMode::LimitedData => {
                if self.limited_full_life_counts.is_empty() {
                    return bad("limited_full_life_counts is empty".into());
                }
                if let Some(c) = self.limited_full_life_counts.iter().find(|&&c| c > self.limited_n_train) {
                    return bad(format!("full-life count {c} exceeds limited_n_train {}", self.limited_n_train));
                }
                if self.limited_n_train < 2 || self.limited_n_test == 0 {
                    return bad("limited_n_train must be >= 2 and limited_n_test >= 1".into());
                }
            }
            TrialMode::FeatureSweep => {
                if self.feature_counts.is_empty() {
                    return bad("feature_counts is empty".into());
                }
            }
            TrialMode::LargeScale => {}
        }
        if let DataSource::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            restarts: self.gp.restarts,
            seed,
            max_fit_rows: self.gp.max_fit_rows,
            init: None,
            perturbation: self.gp.perturbation,
            bfgs: BfgsOptions {
                max_iter: self.gp.max_iter,
                ..Default::default()
            },
        }
    }
}

/// A prepared cell with its observed series, EoL and knee.
#[derive(Clone, Debug)]
pub struct CellContext {
    pub prepared: PreparedCell,
    pub truth: ObservedTruth,
}

impl CellContext {
    pub fn new(prepared: PreparedCell, early_frac: f64, late_frac: f64) -> Self {
        let times = prepared.grid_times();
        let q = prepared.observed_capacity();
        let threshold = prepared.record.eol_threshold();
        let eol = prepared.record.observed_eol_time(threshold);
        let knee = match knee_of_curve(&times, &q, threshold, early_frac, late_frac) {
            Ok(k) => k.knee_time(),
            Err(e) => {
                log::warn!("cell {}: no observed knee ({e})", prepared.cell_id());
                None
            }
        };
        CellContext {
            prepared,
            truth: ObservedTruth { q, eol, knee },
        }
    }

    pub fn cell_id(&self) -> &str {
        self.prepared.cell_id()
    }
}

/// Prepared population shared read-only by every repeat.
#[derive(Clone, Debug)]
pub struct Population {
    pub cells: Vec<CellContext>,
    pub synth_truth: Option<Vec<SynthTruth>>,
}

impl Population {
    pub fn from_records(records: &[CellRecord], cfg: &TrialConfig) -> Result<Self> {
        let cells = records
            .par_iter()
            .map(|r| {
                let p = prepare_cell(r, cfg.dt, cfg.smoothing_window)?;
                Ok(CellContext::new(p, cfg.early_fraction, cfg.late_fraction))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Population {
            cells,
            synth_truth: None,
        })
    }

    pub fn load(cfg: &TrialConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Synthetic { spec } => {
                let (records, truth) = generate_population(spec)?;
                let mut pop = Self::from_records(&records, cfg)?;
                pop.synth_truth = Some(truth);
                Ok(pop)
            }
            DataSource::Manifest {
                path,
                schema,
                life_window_days,
                excluded_ids,
            } => {
                let mut records = load_population(path, schema.as_ref())?;
                if let Some([lo, hi]) = life_window_days {
                    records = clean_population(records, *lo, *hi, excluded_ids)?;
                } else if !excluded_ids.is_empty() {
                    records.retain(|r| !excluded_ids.contains(&r.cell_id));
                }
                Self::from_records(&records, cfg)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// What feeds the GP in one setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeaturePlan {
    /// Time plus `k` greedily selected features.
    TimePlus { k: usize },
    TimeOnly,
}

/// One (setting, repeat) unit of work.
#[derive(Clone, Debug)]
struct RepeatTask {
    setting: String,
    repeat: usize,
    plan: FeaturePlan,
    n_train: usize,
    n_test: usize,
    /// Training cells after the first `c` are cut at their observed knee.
    full_life: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub setting: String,
    pub repeat: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Training cells that kept their full life (limited-data mode).
    pub full_life_ids: Vec<String>,
    pub catalog: Option<FeatureCatalog>,
    pub selected_features: Vec<String>,
    pub hyperparams: Option<Hyperparams>,
    pub raw_length_scales: Vec<f64>,
    pub n_train_rows: usize,
    /// Present when the repeat failed; the run continues regardless.
    pub failure: Option<String>,
    pub cell_failures: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRun {
    pub config: TrialConfig,
    pub repeats: Vec<RepeatRecord>,
    pub scores: Vec<CellScore>,
    pub trajectories: Vec<(String, usize, TrajectoryForecast)>,
    /// Settings in run order with their summaries.
    pub summaries: Vec<(String, Option<TrialSummary>)>,
}

impl TrialRun {
    pub fn summary(&self, setting: &str) -> Option<&TrialSummary> {
        self.summaries
            .iter()
            .find(|(s, _)| s == setting)
            .and_then(|(_, s)| s.as_ref())
    }

    pub fn failed_repeats(&self) -> usize {
        self.repeats.iter().filter(|r| r.failure.is_some()).count()
    }
}

// splitmix64 finalizer
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Shuffled cell order for one repeat; depends on the seed and repeat only.
pub fn split_order(n_cells: usize, seed: u64, repeat: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    let mut idx: Vec<usize> = (0..n_cells).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Forecasts one cell from its own recorded usage.
pub fn forecast_cell(
    ctx: &CellContext,
    catalog: &FeatureCatalog,
    columns: &[usize],
    model: &GpModel,
    early_frac: f64,
    late_frac: f64,
) -> Result<TrajectoryForecast> {
    let p = &ctx.prepared;
    let rows = compute_features(&p.record, &p.chunks, catalog)?;
    let mut x = Vec::with_capacity(rows.len() * columns.len());
    for r in &rows {
        x.extend(columns.iter().map(|&j| r.values[j]));
    }
    let preds: Vec<Prediction> = model.predict_many(&x)?;
    let times = p.grid_times();
    let initial = ctx.truth.q[0];
    let mut traj = integrate(p.cell_id(), &times, initial, &preds)?;
    traj.q_observed = Some(ctx.truth.q.clone());
    if let Some(e) = traj.locate_events(p.record.eol_threshold(), early_frac, late_frac) {
        log::debug!("cell {}: no predicted knee ({e})", p.cell_id());
    }
    Ok(traj)
}

struct RepeatOutput {
    record: RepeatRecord,
    scores: Vec<CellScore>,
    trajectories: Vec<TrajectoryForecast>,
}

fn run_repeat(pop: &Population, cfg: &TrialConfig, task: &RepeatTask) -> RepeatOutput {
    let order = split_order(pop.len(), cfg.seed, task.repeat);
    let test: Vec<usize> = order[..task.n_test].to_vec();
    let train: Vec<usize> = order[task.n_test..task.n_test + task.n_train].to_vec();
    let mut record = RepeatRecord {
        setting: task.setting.clone(),
        repeat: task.repeat,
        train_ids: train.iter().map(|&i| pop.cells[i].cell_id().to_string()).collect(),
        test_ids: test.iter().map(|&i| pop.cells[i].cell_id().to_string()).collect(),
        full_life_ids: Vec::new(),
        catalog: None,
        selected_features: Vec::new(),
        hyperparams: None,
        raw_length_scales: Vec::new(),
        n_train_rows: 0,
        failure: None,
        cell_failures: Vec::new(),
    };
    assert!(
        record.train_ids.iter().all(|id| !record.test_ids.contains(id)),
        "train and test sets overlap"
    );
    let mut scores = Vec::new();
    let mut trajectories = Vec::new();
    match fit_and_forecast(pop, cfg, task, &train, &test, &mut record) {
        Ok(results) => {
            for (cell, res) in test.iter().zip(results) {
                let ctx = &pop.cells[*cell];
                match res.and_then(|traj| {
                    let mut s = score_cell(&traj, &ctx.truth, ctx.prepared.record.nominal_capacity)?;
                    s.setting = task.setting.clone();
                    s.repeat = task.repeat;
                    Ok((s, traj))
                }) {
                    Ok((s, traj)) => {
                        scores.push(s);
                        trajectories.push(traj);
                    }
                    Err(e) => record.cell_failures.push((ctx.cell_id().to_string(), e.to_string())),
                }
            }
        }
        Err(e) => {
            log::warn!("setting {} repeat {} failed: {e}", task.setting, task.repeat);
            record.failure = Some(e.to_string());
        }
    }
    RepeatOutput {
        record,
        scores,
        trajectories,
    }
}

/// Training cells for one repeat; with `full_life = Some(c)` every cell past
/// the first `c` is cut at its observed knee.
fn training_cells(
    pop: &Population,
    train: &[usize],
    full_life: Option<usize>,
    full_life_ids: &mut Vec<String>,
) -> Result<Vec<PreparedCell>> {
    let mut train_cells: Vec<PreparedCell> = Vec::with_capacity(train.len());
    for (rank, &i) in train.iter().enumerate() {
        let ctx = &pop.cells[i];
        let keep_full = full_life.is_none_or(|c| rank < c);
        if keep_full {
            if full_life.is_some() {
                full_life_ids.push(ctx.cell_id().to_string());
            }
            train_cells.push(ctx.prepared.clone());
        } else {
            let cut = ctx.truth.knee.ok_or_else(|| {
                Error::Knee(format!("training cell {} has no observed knee to truncate at", ctx.cell_id()))
            })?;
            let cut_cell = ctx.prepared.truncated(cut);
            if cut_cell.chunks.is_empty() {
                return Err(Error::Data(format!("cell {} has no chunks before its knee", ctx.cell_id())));
            }
            train_cells.push(cut_cell);
        }
    }

    Ok(train_cells)
}

fn fit_and_forecast(
    pop: &Population,
    cfg: &TrialConfig,
    task: &RepeatTask,
    train: &[usize],
    test: &[usize],
    record: &mut RepeatRecord,
) -> Result<Vec<Result<TrajectoryForecast>>> {
    let train_cells = training_cells(pop, train, task.full_life, &mut record.full_life_ids)?;
    let records: Vec<&CellRecord> = train_cells.iter().map(|c| &c.record).collect();
    let catalog = build_catalog(&records, &cfg.percentiles)?;
    let table = assemble_table(&train_cells, &catalog)?;
    let time = catalog.time_index();
    let columns = match task.plan {
        FeaturePlan::TimeOnly => vec![time],
        FeaturePlan::TimePlus { k } => {
            let sim = build_similarity(&table)?;
            greedy_select_with(&sim, &[time], k, cfg.redundancy_threshold)?.selected
        }
    };
    record.selected_features = columns.iter().map(|&j| table.feature_names[j].clone()).collect();
    record.catalog = Some(catalog.clone());

    let mut x = Vec::with_capacity(table.len() * columns.len());
    for r in &table.rows {
        x.extend(columns.iter().map(|&j| r.values[j]));
    }
    let y = table.targets();
    record.n_train_rows = y.len();
    let fit_seed = mix(mix(cfg.seed, task.repeat as u64), fnv1a(&task.setting));
    let model = GpModel::fit(&x, columns.len(), &y, record.selected_features.clone(), &cfg.fit_options(fit_seed))?;
    record.hyperparams = Some(model.hyperparams().clone());
    record.raw_length_scales = model.raw_length_scales();

    Ok(test
        .iter()
        .map(|&i| forecast_cell(&pop.cells[i], &catalog, &columns, &model, cfg.early_fraction, cfg.late_fraction))
        .collect())
}

fn run_tasks(pop: &Population, cfg: &TrialConfig, tasks: Vec<RepeatTask>, settings: Vec<String>) -> Result<TrialRun> {
    let needed = tasks.iter().map(|t| t.n_train + t.n_test).max().unwrap_or(0);
    if pop.len() < needed {
        return Err(Error::Population(format!(
            "population has {} cells, trial needs {needed}",
            pop.len()
        )));
    }
    let work = || -> Vec<RepeatOutput> { tasks.par_iter().map(|t| run_repeat(pop, cfg, t)).collect() };
    let outputs = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    let mut run = TrialRun {
        config: cfg.clone(),
        repeats: Vec::new(),
        scores: Vec::new(),
        trajectories: Vec::new(),
        summaries: Vec::new(),
    };
    for o in outputs {
        for t in o.trajectories {
            run.trajectories.push((o.record.setting.clone(), o.record.repeat, t));
        }
        run.scores.extend(o.scores);
        run.repeats.push(o.record);
    }
    for s in settings {
        let scores: Vec<CellScore> = run.scores.iter().filter(|c| c.setting == s).cloned().collect();
        let n_trials = run.repeats.iter().filter(|r| r.setting == s && r.failure.is_none()).count();
        let summary = if scores.is_empty() { None } else { Some(summarize(&scores, n_trials)?) };
        run.summaries.push((s, summary));
    }
    Ok(run)
}

pub const LARGE_SCALE_SETTING: &str = "large_scale";
pub const TIME_ONLY_SETTING: &str = "time_only";

pub fn limited_setting(c: usize) -> String {
    format!("full_life_{c}")
}

pub fn sweep_setting(k: usize) -> String {
    format!("k_{k}")
}

pub fn run_large_scale(cfg: &TrialConfig, pop: &Population) -> Result<TrialRun> {
    let setting = LARGE_SCALE_SETTING.to_string();
    let tasks = (0..cfg.n_repeats)
        .map(|repeat| RepeatTask {
            setting: setting.clone(),
            repeat,
            plan: FeaturePlan::TimePlus { k: cfg.k_features },
            n_train: cfg.n_train,
            n_test: cfg.n_test,
            full_life: None,
        })
        .collect();
    run_tasks(pop, cfg, tasks, vec![setting])
}

pub fn run_limited_data(cfg: &TrialConfig, pop: &Population) -> Result<TrialRun> {
    let mut tasks = Vec::new();
    let mut settings = Vec::new();
    for &c in &cfg.limited_full_life_counts {
        let setting = limited_setting(c);
        settings.push(setting.clone());
        for repeat in 0..cfg.n_repeats {
            tasks.push(RepeatTask {
                setting: setting.clone(),
                repeat,
                plan: FeaturePlan::TimePlus { k: cfg.k_features },
                n_train: cfg.limited_n_train,
                n_test: cfg.limited_n_test,
                full_life: Some(c),
            });
        }
    }
    run_tasks(pop, cfg, tasks, settings)
}

pub fn run_feature_sweep(cfg: &TrialConfig, pop: &Population) -> Result<TrialRun> {
    let mut plans: Vec<(String, FeaturePlan)> = cfg
        .feature_counts
        .iter()
        .map(|&k| (sweep_setting(k), FeaturePlan::TimePlus { k }))
        .collect();
    plans.push((TIME_ONLY_SETTING.to_string(), FeaturePlan::TimeOnly));
    let mut tasks = Vec::new();
    for (setting, plan) in &plans {
        for repeat in 0..cfg.n_repeats {
            tasks.push(RepeatTask {
                setting: setting.clone(),
                repeat,
                plan: *plan,
                n_train: cfg.n_train,
                n_test: cfg.n_test,
                full_life: None,
            });
        }
    }
    let run = run_tasks(pop, cfg, tasks, plans.into_iter().map(|(s, _)| s).collect())?;
    let median = |k: usize| run.summary(&sweep_setting(k)).and_then(|s| s.rmse_q).map(|m| m.median);
    if let (Some(a), Some(b)) = (median(5), median(1)) {
        if a > b {
            log::warn!("median RMSE_Q with 5 features ({a:.3}%) exceeds that with 1 feature ({b:.3}%)");
        }
    }
    Ok(run)
}

/// Runs the configured mode on a freshly loaded population.
pub fn run(cfg: &TrialConfig) -> Result<TrialRun> {
    cfg.validate()?;
    let pop = Population::load(cfg)?;
    run_on(cfg, &pop)
}

pub fn run_on(cfg: &TrialConfig, pop: &Population) -> Result<TrialRun> {
    match cfg.mode {
        TrialMode::LargeScale => run_large_scale(cfg, pop),
        TrialMode::LimitedData => run_limited_data(cfg, pop),
        TrialMode::FeatureSweep => run_feature_sweep(cfg, pop),
    }
}
