//! `brainvalue`: runs declarative experiment configs and writes CSV results.

mod config;
mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use brainvalue_core::montecarlo::config_hash;
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::ExperimentConfig;
use experiments::{Artifacts, ErrorRow};

#[derive(Parser)]
#[command(name = "brainvalue", version, about = "Value of brain recordings for task learning: sweeps and budget plans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSVs, errors.csv and manifest.json.
    Run {
        config: PathBuf,
        /// Overrides the config's `output` directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Replaces both the model seed and the Monte Carlo seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print the sweep plan and regime warnings without computing anything.
    Describe { config: PathBuf },
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    rows: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    config_path: String,
    config_hash: String,
    model_seed: u64,
    mc_seed: u64,
    mc_trials: usize,
    mc_replicates: usize,
    threads: usize,
    points: usize,
    failed_points: usize,
    wall_time_seconds: f64,
    files: Vec<FileEntry>,
    config: &'a ExperimentConfig,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Describe { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", cfg.describe());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            output_dir,
            threads,
            seed_override,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.model.seed = seed;
                cfg.mc.seed = seed;
            }
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .context("configuring the worker pool")?;
            }
            let out = output_dir
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            run(&config, &cfg, &out)
        }
    }
}

fn run(config_path: &Path, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<ExitCode> {
    let start = Instant::now();
    let mut hashed = cfg.clone();
    hashed.output = None;
    let hash = config_hash(&[&hashed]);
    let art = experiments::run(cfg)?;
    if art.points == 0 {
        bail!("the sweep has no points; run `brainvalue describe` to see which axes are empty");
    }
    let total_failure = art.failed_points == art.points;
    write_outputs(config_path, cfg, out, &art, &hash, start)?;
    eprintln!(
        "{}: {} points, {} failed, {} error rows; wrote {}",
        cfg.experiment.name(),
        art.points,
        art.failed_points,
        art.errors.len(),
        out.display()
    );
    if total_failure {
        eprintln!("error: every point failed; see {}", out.join("errors.csv").display());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn write_outputs(
    config_path: &Path,
    cfg: &ExperimentConfig,
    out: &Path,
    art: &Artifacts,
    hash: &str,
    start: Instant,
) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    for f in &art.files {
        fs::write(out.join(&f.name), &f.bytes).with_context(|| format!("writing {}", f.name))?;
        files.push(FileEntry {
            name: f.name.clone(),
            rows: f.rows,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    if art.errors.is_empty() {
        w.write_record(["file", "point", "source", "message"])?;
    }
    for e in &art.errors {
        w.serialize::<&ErrorRow>(e)?;
    }
    fs::write(out.join("errors.csv"), w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    files.push(FileEntry {
        name: "errors.csv".into(),
        rows: art.errors.len(),
    });
    let manifest = Manifest {
        tool: "brainvalue",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment.name(),
        config_path: config_path.display().to_string(),
        config_hash: hash.to_string(),
        model_seed: cfg.model.seed,
        mc_seed: cfg.mc.seed,
        mc_trials: cfg.mc.trials,
        mc_replicates: cfg.mc.replicates,
        threads: rayon::current_num_threads(),
        points: art.points,
        failed_points: art.failed_points,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        files,
        config: cfg,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
