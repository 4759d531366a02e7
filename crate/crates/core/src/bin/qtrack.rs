//! Command-line front end for the qtrack toolkit.
//!
//! Subcommands: `simulate` (truth trajectory + measurement record),
//! `estimate` (conditional SME over a record file), `track` (particle
//! filter over a record file), `compare` (metrics from trajectory logs
//! and/or phase-space fields), `sweep` (KL divergence over a parameter
//! grid). Exit codes: 0 success, 2 configuration error, 3 numerical
//! invariant failure.

use clap::{Args, Parser, Subcommand};
use qtrack::experiments::{
    ExperimentConfig, RunManifest, load_trajectory_csv, parse_config, run_kl_sweep,
    save_trajectory_csv, steps_per_cycle, track_record,
};
use qtrack::phase_space::{PhaseSpaceField, kl_divergence, positive_part, trajectory_error_stats};
use qtrack::sme::{MeasurementRecord, estimate_conditional, simulate_truth};
use qtrack::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "qtrack", version, about = "Quantum trajectory tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the corresponding
/// config-file field when given.
#[derive(Args)]
struct Common {
    /// TOML configuration file (documented defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed (overrides run.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides run.out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (overrides run.parallel)
    #[arg(long)]
    parallel: Option<usize>,
    /// Log a state snapshot every N steps (overrides run.snapshot_every)
    #[arg(long)]
    snapshot_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the truth SME and emit its measurement record
    Simulate(Common),
    /// Run the conditional SME over an existing measurement record
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Measurement record CSV produced by `simulate`
        #[arg(long)]
        record: PathBuf,
    },
    /// Run the bootstrap particle filter over an existing record
    Track {
        #[command(flatten)]
        common: Common,
        /// Measurement record CSV produced by `simulate`
        #[arg(long)]
        record: PathBuf,
    },
    /// Compute tracking-error statistics and/or a KL divergence
    Compare {
        /// Truth trajectory log CSV
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Estimate trajectory log CSV (conditional or classical)
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// Steps to discard as transient before the error statistics
        #[arg(long, default_value_t = 0)]
        discard_steps: usize,
        /// First phase-space field (binary) for the KL divergence
        #[arg(long)]
        field_p1: Option<PathBuf>,
        /// Second phase-space field (binary) for the KL divergence
        #[arg(long)]
        field_p2: Option<PathBuf>,
        /// Where to write the metrics JSON (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full KL sweep over the configured parameter grid
    Sweep(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    if let Some(out) = &common.out {
        config.run.out_dir = Some(out.display().to_string());
    }
    if let Some(parallel) = common.parallel {
        config.run.parallel = parallel;
    }
    if let Some(every) = common.snapshot_every {
        config.run.snapshot_every = every;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<Option<PathBuf>> {
    match &config.run.out_dir {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            std::fs::create_dir_all(&dir)?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn cmd_simulate(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let params = config.base_params();
    let steps = config.run.cycles * steps_per_cycle(&params);
    let t0 = Instant::now();
    let (truth, record) = simulate_truth(
        &params,
        None,
        steps,
        config.run.seed,
        Some(config.run.snapshot_every),
    )?;
    let elapsed = t0.elapsed().as_secs_f64();
    println!(
        "simulated {} steps (dim {}) in {:.2}s; {} tail warnings",
        steps, params.dim, elapsed, truth.tail_warnings
    );
    if let Some(dir) = out_dir(&config)? {
        record.save(dir.join("record.csv"))?;
        save_trajectory_csv(&truth, "truth", dir.join("truth.csv"))?;
        let mut manifest = RunManifest::new(config.hash(), config.run.seed);
        manifest.timings.insert("simulate_truth".into(), elapsed);
        manifest.invariant_violations = truth.tail_warnings as u64;
        manifest.outputs = vec!["record.csv".into(), "truth.csv".into()];
        manifest.save(&dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_estimate(common: &Common, record_path: &Path) -> Result<()> {
    let config = load_config(common)?;
    let params = config.base_params();
    let record = MeasurementRecord::load(record_path)?;
    let t0 = Instant::now();
    let log = estimate_conditional(&record, &params, None, Some(config.run.snapshot_every))?;
    let elapsed = t0.elapsed().as_secs_f64();
    println!(
        "estimated {} steps (dim {}) in {:.2}s; final purity {:.4}",
        record.increments.len(),
        params.dim,
        elapsed,
        log.purity.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(dir) = out_dir(&config)? {
        save_trajectory_csv(&log, "conditional", dir.join("conditional.csv"))?;
        let mut manifest = RunManifest::new(config.hash(), record.seed);
        manifest.timings.insert("estimate_conditional".into(), elapsed);
        manifest.invariant_violations = log.tail_warnings as u64;
        manifest.outputs = vec!["conditional.csv".into()];
        manifest.save(&dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_track(common: &Common, record_path: &Path) -> Result<()> {
    let config = load_config(common)?;
    let params = config.base_params();
    let record = MeasurementRecord::load(record_path)?;
    let t0 = Instant::now();
    let (log, _) = track_record(&record, &params, config.run.particles, config.run.seed)?;
    let elapsed = t0.elapsed().as_secs_f64();
    println!(
        "tracked {} steps with {} particles in {:.2}s; final ESS/N {:.4}",
        record.increments.len(),
        config.run.particles,
        elapsed,
        log.purity.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(dir) = out_dir(&config)? {
        save_trajectory_csv(&log, "classical", dir.join("classical.csv"))?;
        let mut manifest = RunManifest::new(config.hash(), config.run.seed);
        manifest.timings.insert("particle_filter".into(), elapsed);
        manifest.outputs = vec!["classical.csv".into()];
        manifest.save(&dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_compare(
    truth: Option<&Path>,
    estimate: Option<&Path>,
    discard_steps: usize,
    field_p1: Option<&Path>,
    field_p2: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut metrics = serde_json::Map::new();
    match (truth, estimate) {
        (Some(t), Some(e)) => {
            let t_log = load_trajectory_csv(t)?;
            let e_log = load_trajectory_csv(e)?;
            let (sx, sp) = trajectory_error_stats(&t_log, &e_log, discard_steps)?;
            metrics.insert("sigma_x".into(), sx.into());
            metrics.insert("sigma_p".into(), sp.into());
        }
        (None, None) => {}
        _ => {
            return Err(Error::InvalidParameter(
                "--truth and --estimate must be given together".into(),
            ));
        }
    }
    match (field_p1, field_p2) {
        (Some(p1), Some(p2)) => {
            let f1 = normalized_pdf(PhaseSpaceField::load_binary(p1)?)?;
            let f2 = normalized_pdf(PhaseSpaceField::load_binary(p2)?)?;
            metrics.insert("kl_divergence".into(), kl_divergence(&f1, &f2)?.into());
        }
        (None, None) => {}
        _ => {
            return Err(Error::InvalidParameter(
                "--field-p1 and --field-p2 must be given together".into(),
            ));
        }
    }
    if metrics.is_empty() {
        return Err(Error::InvalidParameter(
            "compare needs trajectory logs and/or a pair of fields".into(),
        ));
    }
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    match out {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

/// Coerces a loaded field into a pdf: Wigner fields are clipped to their
/// positive part; pdfs pass through unchanged.
fn normalized_pdf(field: PhaseSpaceField) -> Result<PhaseSpaceField> {
    match field.mode() {
        qtrack::phase_space::FieldMode::Wigner => positive_part(&field),
        qtrack::phase_space::FieldMode::Pdf => Ok(field),
    }
}

fn cmd_sweep(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let t0 = Instant::now();
    let stats = run_kl_sweep(&config)?;
    println!(
        "swept {} point-replicates in {:.2}s",
        stats.len(),
        t0.elapsed().as_secs_f64()
    );
    for s in &stats {
        println!(
            "kbt={:.4} gamma={:.4} eta={:.4} rep={} mean_kl={:.6} std_kl={:.6}",
            s.kbt, s.gamma, s.eta, s.replicate, s.mean_kl, s.std_kl
        );
    }
    if let Some(dir) = &config.run.out_dir {
        println!("wrote {dir}");
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvariantViolation(_)
        | Error::NonFinite(_)
        | Error::DegenerateEnsemble
        | Error::Unnormalized(_)
        | Error::NoPositiveMass() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(common) => cmd_simulate(common),
        Command::Estimate { common, record } => cmd_estimate(common, record),
        Command::Track { common, record } => cmd_track(common, record),
        Command::Compare {
            truth,
            estimate,
            discard_steps,
            field_p1,
            field_p2,
            out,
        } => cmd_compare(
            truth.as_deref(),
            estimate.as_deref(),
            *discard_steps,
            field_p1.as_deref(),
            field_p2.as_deref(),
            out.as_deref(),
        ),
        Command::Sweep(common) => cmd_sweep(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
