//! `capfade` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capfade::eval::{score_cell, summarize, write_scores_csv};
use capfade::features::{assemble_table, build_catalog, FeatureCatalog, TIME_LABEL};
use capfade::gpr::GpModel;
use capfade::harness::{
    forecast_cell, read_run, render_report, run_on, write_run, DataSource, Population, TrialConfig, TrialMode,
};
use capfade::ingest::{write_population, CellRecord, SECONDS_PER_DAY};
use capfade::selection::{build_similarity, greedy_select_with, SimilarityMatrix};
use capfade::synthgen::{generate_population, write_truth_csv, SynthSpec};
use capfade::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "capfade", version, about = "Capacity-fade forecasting from usage features")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Trial configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Population manifest; overrides the data source of the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic population in the ingest format.
    Synth {
        /// Synthetic population parameters (TOML); defaults to the config's.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Validate a population and print one line per cell.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Build the feature catalog and the feature table.
    Features {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Similarity matrix and greedy selection with time forced in.
    Select {
        #[command(flatten)]
        data: DataArgs,
        /// Features picked in addition to time.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Select features and fit the GP on the whole population.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Forecast and score cells with a fitted model.
    Forecast {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Cells to forecast; all cells when omitted.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Run a trial end to end.
    Trial {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Render SVG figures for a finished trial.
    Report {
        /// Trial output directory or its run.json.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Large,
    Limited,
    Sweep,
}

impl From<Mode> for TrialMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Large => TrialMode::LargeScale,
            Mode::Limited => TrialMode::LimitedData,
            Mode::Sweep => TrialMode::FeatureSweep,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn load_config(common: &Common) -> Result<TrialConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrialConfig::load(p)?,
        None => TrialConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn with_data(mut cfg: TrialConfig, data: &DataArgs) -> TrialConfig {
    if let Some(path) = &data.manifest {
        cfg.data = DataSource::Manifest {
            path: path.clone(),
            schema: None,
            life_window_days: None,
            excluded_ids: Vec::new(),
        };
    }
    cfg
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let out = &common.out_dir;
    match &cli.command {
        Command::Synth { spec } => {
            let cfg = load_config(common)?;
            let mut spec = match spec {
                Some(p) => SynthSpec::load(p)?,
                None => match cfg.data {
                    DataSource::Synthetic { spec } => spec,
                    DataSource::Manifest { .. } => SynthSpec::default(),
                },
            };
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let (cells, truth) = generate_population(&spec)?;
            create_dir(out)?;
            let manifest = write_population(out, &cells)?;
            write_truth_csv(&out.join("truth.csv"), &truth)?;
            println!("wrote {} cells, manifest {}", cells.len(), manifest.display());
        }
        Command::Ingest { data } => {
            let cfg = with_data(load_config(common)?, data);
            let pop = Population::load(&cfg)?;
            println!("cell_id,batch,samples,cycles,grid_points,chunks,eol_days,knee_days");
            for c in &pop.cells {
                let r = &c.prepared.record;
                let days = |t: Option<f64>| t.map(|t| format!("{:.3}", t / SECONDS_PER_DAY)).unwrap_or_default();
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.cell_id,
                    r.batch,
                    r.samples.len(),
                    r.cycles.len(),
                    r.capacity.len(),
                    c.prepared.chunks.len(),
                    days(c.truth.eol),
                    days(c.truth.knee)
                );
            }
            eprintln!("{} cells valid", pop.len());
        }
        Command::Features { data } => {
            let cfg = with_data(load_config(common)?, data);
            let pop = Population::load(&cfg)?;
            let (catalog, table) = catalog_and_table(&pop, &cfg)?;
            create_dir(out)?;
            catalog.write_json(&out.join("catalog.json"))?;
            table.write_csv(&out.join("features.csv"))?;
            println!("{} rows x {} features", table.len(), table.width());
        }
        Command::Select { data, k } => {
            let cfg = with_data(load_config(common)?, data);
            let pop = Population::load(&cfg)?;
            let (catalog, table) = catalog_and_table(&pop, &cfg)?;
            let sim = build_similarity(&table)?;
            let (selected, sel) = select(&sim, &catalog, k.unwrap_or(cfg.k_features), cfg.redundancy_threshold)?;
            create_dir(out)?;
            sim.write_csv(&out.join("similarity.csv"))?;
            sel.write_csv(&sim, &out.join("selection.csv"))?;
            capfade::plots::similarity_heatmap(&sim, &out.join("similarity.svg"))?;
            println!("{}", selected.join(","));
        }
        Command::Fit { data, k } => {
            let cfg = with_data(load_config(common)?, data);
            let pop = Population::load(&cfg)?;
            let (catalog, table) = catalog_and_table(&pop, &cfg)?;
            let sim = build_similarity(&table)?;
            let (names, sel) = select(&sim, &catalog, k.unwrap_or(cfg.k_features), cfg.redundancy_threshold)?;
            let mut x = Vec::with_capacity(table.len() * sel.selected.len());
            for r in &table.rows {
                x.extend(sel.selected.iter().map(|&j| r.values[j]));
            }
            let model = GpModel::fit(&x, sel.selected.len(), &table.targets(), names, &cfg.fit_options(cfg.seed))?;
            create_dir(out)?;
            catalog.write_json(&out.join("catalog.json"))?;
            model.save(&out.join("model.json"))?;
            if let Some(d) = model.diagnostics() {
                println!("{d}");
            }
        }
        Command::Forecast {
            data,
            model,
            catalog,
            cells,
        } => {
            let cfg = with_data(load_config(common)?, data);
            let pop = Population::load(&cfg)?;
            let model = GpModel::load(model)?;
            let catalog = FeatureCatalog::read_json(catalog)?;
            let columns = model
                .feature_names()
                .iter()
                .map(|n| {
                    catalog
                        .index_of(n)
                        .ok_or_else(|| Error::Usage(format!("model feature {n} is not in the catalog")))
                })
                .collect::<Result<Vec<_>>>()?;
            let tdir = out.join("trajectories");
            create_dir(&tdir)?;
            let mut scores = Vec::new();
            for ctx in pop
                .cells
                .iter()
                .filter(|c| cells.is_empty() || cells.iter().any(|id| id == c.cell_id()))
            {
                let traj = forecast_cell(ctx, &catalog, &columns, &model, cfg.early_fraction, cfg.late_fraction)?;
                traj.write_csv(&tdir.join(format!("{}.csv", ctx.cell_id())))?;
                let mut s = score_cell(&traj, &ctx.truth, ctx.prepared.record.nominal_capacity)?;
                s.setting = "forecast".into();
                scores.push(s);
            }
            if scores.is_empty() {
                return Err(Error::Usage("no cells matched".into()));
            }
            write_scores_csv(&out.join("scores.csv"), &scores)?;
            print_summary("forecast", &summarize(&scores, 1)?);
        }
        Command::Trial { mode } => {
            let mut cfg = load_config(common)?;
            if let Some(m) = mode {
                cfg.mode = (*m).into();
            }
            cfg.validate()?;
            let pop = Population::load(&cfg)?;
            let run = run_on(&cfg, &pop)?;
            write_run(&run, out)?;
            for (setting, s) in &run.summaries {
                match s {
                    Some(s) => print_summary(setting, s),
                    None => println!("{setting}: no scored cells"),
                }
            }
            if run.failed_repeats() > 0 {
                eprintln!("{} repeat(s) failed, see repeats.csv", run.failed_repeats());
            }
        }
        Command::Report { run } => {
            let run = read_run(run)?;
            let pop = match Population::load(&run.config) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("population unavailable, skipping population figures: {e}");
                    None
                }
            };
            let files = render_report(&run, pop.as_ref(), out)?;
            println!("wrote {} figures to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn catalog_and_table(pop: &Population, cfg: &TrialConfig) -> Result<(FeatureCatalog, capfade::features::FeatureTable)> {
    let records: Vec<&CellRecord> = pop.cells.iter().map(|c| &c.prepared.record).collect();
    let catalog = build_catalog(&records, &cfg.percentiles)?;
    let prepared: Vec<_> = pop.cells.iter().map(|c| c.prepared.clone()).collect();
    let table = assemble_table(&prepared, &catalog)?;
    Ok((catalog, table))
}

fn select(
    sim: &SimilarityMatrix,
    catalog: &FeatureCatalog,
    k: usize,
    threshold: f64,
) -> Result<(Vec<String>, capfade::selection::SelectionResult)> {
    let time = catalog
        .index_of(TIME_LABEL)
        .ok_or_else(|| Error::Internal("catalog has no time feature".into()))?;
    let sel = greedy_select_with(sim, &[time], k, threshold)?;
    Ok((sel.labels(sim), sel))
}

fn print_summary(setting: &str, s: &capfade::eval::TrialSummary) {
    let med = |m: Option<capfade::eval::MetricSummary>| m.map_or("n/a".to_string(), |m| format!("{:.3}", m.median));
    println!(
        "{setting}: cells {} median RMSE_Q {}% |PE| EoL {}% |PE| knee {}% calibration {}",
        s.n_cells,
        med(s.rmse_q),
        med(s.pe_eol),
        med(s.pe_knee),
        s.calibration.map_or("n/a".to_string(), |c| format!("{c:.3}"))
    );
}
