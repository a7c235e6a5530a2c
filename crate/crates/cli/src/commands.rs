//! The five subcommands. Each validates its whole configuration before
//! computing and writes only under the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use seasonal_dstm::analysis::{
    decadal_shift, exploratory_tstats, harmonic_field, recovery_report, semiannual_contribution, PeriodSpec, SummaryGrid,
};
use seasonal_dstm::draws::{DrawMetadata, DrawWriter, PosteriorDraws};
use seasonal_dstm::gibbs::run_sampler;
use seasonal_dstm::harmonic::{Components, Extremum, Harmonic, Variable};
use seasonal_dstm::ingest::{center_by_year, crop_grid, load_csv, load_dataset, save_dataset, thin_grid, RawPanel, TemperatureDataset};
use seasonal_dstm::spatial::{build_knot_grid, default_decay, Bounds, CovarianceParams, PredictiveBasis};
use seasonal_dstm::synthetic::{simulate, TruthRecord};
use seasonal_dstm::{Error, Result};

use crate::config::{relative, RunConfig};

#[derive(Debug, Serialize)]
struct OutputFile {
    path: String,
    sha256: String,
}

/// Run record; the only output that holds wall-clock information.
#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: String,
    config_hash: String,
    seed: u64,
    started_at: String,
    wall_time_seconds: f64,
    outputs: Vec<OutputFile>,
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Times a command and writes `{output}/manifests/{command}.json` listing
/// the digests of `outputs` (files or directories).
struct Run<'a> {
    command: &'static str,
    config: &'a RunConfig,
    seed: u64,
    started_at: chrono::DateTime<chrono::Utc>,
    clock: Instant,
}

impl<'a> Run<'a> {
    fn start(command: &'static str, config: &'a RunConfig, seed: u64) -> Self {
        Self { command, config, seed, started_at: chrono::Utc::now(), clock: Instant::now() }
    }

    fn finish(self, outputs: &[PathBuf]) -> Result<PathBuf> {
        let mut files = Vec::new();
        for p in outputs {
            if p.is_dir() {
                files_under(p, &mut files)?;
            } else {
                files.push(p.clone());
            }
        }
        let outputs = files
            .iter()
            .map(|f| Ok(OutputFile { path: relative(f, &self.config.output), sha256: hex::encode(Sha256::digest(fs::read(f)?)) }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config.hash(),
            seed: self.seed,
            started_at: self.started_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            wall_time_seconds: self.clock.elapsed().as_secs_f64(),
            outputs,
        };
        let dir = self.config.output.join("manifests");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Replace a directory this command owns, so stale files never mix in.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_simulate(config: &RunConfig) -> Result<()> {
    config.simulation.validate()?;
    let run = Run::start("simulate", config, config.simulation.seed);
    let sim = simulate(&config.simulation)?;
    let dataset_dir = config.output.join("dataset");
    fresh_dir(&dataset_dir)?;
    save_dataset(&sim.dataset, &dataset_dir)?;
    let truth = config.output.join("truth.json");
    sim.truth.save(&truth)?;
    run.finish(&[dataset_dir, truth])?;
    Ok(())
}

/// The dataset named by the configuration: CSV (cropped, thinned, centered)
/// or a native dataset directory.
pub fn load_input(config: &RunConfig) -> Result<TemperatureDataset> {
    match &config.data.csv {
        Some(csv) => {
            let raw = load_csv(csv, &config.data.schema)?;
            let mut ds = center_by_year(&raw);
            if let Some(crop) = &config.data.crop {
                ds = crop_grid(&ds, crop)?;
            }
            if config.data.stride != (1, 1) {
                ds = thin_grid(&ds, config.data.stride)?;
            }
            Ok(ds)
        }
        None => load_dataset(&config.dataset_dir()),
    }
}

pub fn build_basis(config: &RunConfig, dataset: &TemperatureDataset) -> Result<PredictiveBasis> {
    let locations = dataset.locations();
    let bounds = Bounds::enclosing(&locations)?;
    let knots = build_knot_grid(&bounds, config.model.knots)?;
    let phi = config.model.phi.unwrap_or_else(|| default_decay(&bounds));
    PredictiveBasis::build(&locations, &knots, CovarianceParams::new(1.0, phi)?, config.model.jitter)
}

fn validate_fit(config: &RunConfig) -> Result<()> {
    config.sampler.validate()?;
    config.model.hyperparameters.validate()?;
    if config.chunk_draws == 0 {
        return Err(Error::InvalidArgument("chunk_draws must be positive".into()));
    }
    Ok(())
}

pub fn cmd_fit(config: &RunConfig) -> Result<()> {
    validate_fit(config)?;
    let dataset = load_input(config)?;
    let truth = config.recovery.as_ref().map(|p| TruthRecord::load(p)).transpose()?;
    let basis = build_basis(config, &dataset)?;
    let run = Run::start("fit", config, config.sampler.seed);
    let draws_dir = config.output.join("draws");
    fresh_dir(&draws_dir)?;
    let meta = DrawMetadata::new(
        dataset.sites().to_vec(),
        dataset.years().to_vec(),
        basis.n_knots(),
        basis.phi(),
        basis.jitter(),
        config.sampler.clone(),
        config.model.hyperparameters.clone(),
    );
    let mut writer = DrawWriter::create(&draws_dir, meta, config.chunk_draws)?;
    run_sampler(dataset.observations(), &basis, &config.model.hyperparameters, &config.sampler, &mut writer)?;
    writer.finish()?;
    let mut outputs = vec![draws_dir.clone()];
    if let Some(truth) = truth {
        let draws = PosteriorDraws::load(&draws_dir)?;
        let report = recovery_report(&draws, &truth)?;
        let path = config.output.join("recovery.json");
        write_json(&path, &report)?;
        outputs.push(path);
    }
    run.finish(&outputs)?;
    Ok(())
}

/// Every grid `summarize` writes, keyed by file stem.
pub fn summary_grids(config: &RunConfig, draws: &PosteriorDraws) -> Result<Vec<(String, SummaryGrid)>> {
    let periods: &PeriodSpec = &config.periods;
    periods.indices(&draws.meta.years)?;
    let field_years: Vec<usize> = match &config.summary.field_years {
        None => (0..draws.n_years()).collect(),
        Some(labels) => labels
            .iter()
            .map(|&y| draws.year_index(y).ok_or_else(|| Error::InvalidArgument(format!("field year {y} is not in the fitted years"))))
            .collect::<Result<_>>()?,
    };
    let mut out = Vec::new();
    for var in Variable::ALL {
        for mode in [Extremum::Peak, Extremum::Trough] {
            let stem = format!("{}_{}", var.name(), mode.name());
            out.push((format!("{stem}_shift"), decadal_shift(draws, var, mode, periods, Components::Both)?));
            out.push((format!("{stem}_shift_annual"), decadal_shift(draws, var, mode, periods, Components::AnnualOnly)?));
            out.push((format!("{stem}_semiannual"), semiannual_contribution(draws, var, mode, periods)?));
        }
        for &l in &field_years {
            for h in Harmonic::ALL {
                let f = harmonic_field(draws, l, var, h)?;
                let (year, order) = (f.year, h.order());
                out.push((format!("{}_amplitude{order}_{year}", var.name()), f.amplitude_grid(draws)));
                out.push((format!("{}_phase{order}_{year}", var.name()), f.phase_grid(draws)));
            }
        }
    }
    Ok(out)
}

pub fn cmd_summarize(config: &RunConfig) -> Result<()> {
    config.periods.validate()?;
    let draws = PosteriorDraws::load(&config.draws_dir())?;
    if draws.n_draws() == 0 {
        return Err(Error::InvalidArgument("draw set is empty; nothing to summarize".into()));
    }
    let run = Run::start("summarize", config, draws.meta.sampler.seed);
    let grids = summary_grids(config, &draws)?;
    let dir = config.output.join("summary");
    fresh_dir(&dir)?;
    for (stem, grid) in &grids {
        grid.write(&dir, stem)?;
    }
    run.finish(&[dir])?;
    Ok(())
}

/// Uncentered panel for the screen; least squares with an intercept makes
/// the result independent of centering.
fn raw_panel(config: &RunConfig) -> Result<RawPanel> {
    let ds = load_input(config)?;
    Ok(RawPanel { sites: ds.sites().to_vec(), years: ds.years().to_vec(), observations: ds.uncentered() })
}

pub fn explore_grids(config: &RunConfig) -> Result<Vec<(String, SummaryGrid)>> {
    config.explore_periods.validate()?;
    let panel = raw_panel(config)?;
    Ok(exploratory_tstats(&panel, &config.explore_periods)?
        .into_iter()
        .map(|r| (format!("{}_{}", r.variable.name(), r.grid.quantity), r.grid))
        .collect())
}

pub fn cmd_explore(config: &RunConfig) -> Result<()> {
    let run = Run::start("explore", config, config.sampler.seed);
    let grids = explore_grids(config)?;
    let dir = config.output.join("explore");
    fresh_dir(&dir)?;
    for (stem, grid) in &grids {
        grid.write(&dir, stem)?;
    }
    run.finish(&[dir])?;
    Ok(())
}
