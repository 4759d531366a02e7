//! Config-driven experiment pipeline: truth simulation, conditional SME
//! estimation, particle-filter tracking, phase-space comparison, and
//! parameter sweeps, with deterministic seeding and run manifests.
//!
//! Run lengths are counted in oscillation cycles of 1/(ω·Δt) steps (1000
//! steps per cycle at the default Δt = 0.001). Sweep points derive their
//! seeds from the master seed and the point's parameter values, so sweeps
//! are order-independent and any point can be re-run in isolation.

use crate::classical::{GaussianPrior, ParticleEnsemble, ensemble_moments, pf_init, pf_update};
use crate::fock::ModelParams;
use crate::phase_space::{PhaseSpaceGrid, ensemble_field, kl_divergence, positive_part, wigner};
use crate::sme::{MeasurementRecord, TrajectoryLog, estimate_conditional, simulate_truth};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Fock truncation used when the config leaves `dim` unset: grows with
/// temperature, capped at 120.
pub fn auto_dim(kbt: f64) -> usize {
    (40.0 * (1.0 + kbt)).ceil().max(60.0).min(120.0) as usize
}

/// Steps per oscillation cycle: 1/(ω·Δt), i.e. 1000 at the defaults.
pub fn steps_per_cycle(params: &ModelParams) -> usize {
    (1.0 / (params.omega * params.dt)).round().max(1.0) as usize
}

/// [model] section: physical and integration parameters. `dim` defaults to
/// the temperature-dependent [`auto_dim`] rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub k: f64,
    pub eta: f64,
    pub gamma: f64,
    pub damping: f64,
    pub kbt: f64,
    pub alpha: f64,
    pub omega: f64,
    pub dt: f64,
    pub dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ModelParams::default();
        ModelSection {
            k: p.k,
            eta: p.eta,
            gamma: p.gamma,
            damping: p.damping,
            kbt: p.kbt,
            alpha: p.alpha,
            omega: p.omega,
            dt: p.dt,
            dim: None,
        }
    }
}

/// [run] section: run length, seeding, particle count, output location.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub particles: usize,
    pub cycles: usize,
    pub transient_cycles: usize,
    pub seed: u64,
    pub snapshot_every: usize,
    pub seeds_per_point: usize,
    pub out_dir: Option<String>,
    pub parallel: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            particles: 1000,
            cycles: 200,
            transient_cycles: 20,
            seed: 0,
            snapshot_every: 100,
            seeds_per_point: 1,
            out_dir: None,
            parallel: 1,
        }
    }
}

/// [grid] section: phase-space grid used for Wigner/histogram comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub nx: usize,
    pub np: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = PhaseSpaceGrid::default_grid();
        GridSection {
            x_min: g.x_min,
            x_max: g.x_max,
            p_min: g.p_min,
            p_max: g.p_max,
            nx: g.nx,
            np: g.np,
        }
    }
}

/// [sweep] section: parameter axes; a missing axis means "the base model
/// value only".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kbt: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
}

/// Fully parsed experiment configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub run: RunSection,
    pub grid: GridSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    /// Base model parameters with the truncation rule applied.
    pub fn base_params(&self) -> ModelParams {
        let m = &self.model;
        ModelParams {
            k: m.k,
            eta: m.eta,
            gamma: m.gamma,
            damping: m.damping,
            kbt: m.kbt,
            alpha: m.alpha,
            omega: m.omega,
            dt: m.dt,
            dim: m.dim.unwrap_or_else(|| auto_dim(m.kbt)),
        }
    }

    /// Phase-space grid described by the [grid] section.
    pub fn grid(&self) -> Result<PhaseSpaceGrid> {
        PhaseSpaceGrid::new(
            self.grid.x_min,
            self.grid.x_max,
            self.grid.p_min,
            self.grid.p_max,
            self.grid.nx,
            self.grid.np,
        )
    }

    /// Cartesian sweep points in a fixed (kbt, gamma, eta) order.
    pub fn sweep_points(&self) -> Vec<ModelParams> {
        let base = &self.model;
        let kbts = self.sweep.kbt.clone().unwrap_or_else(|| vec![base.kbt]);
        let gammas = self.sweep.gamma.clone().unwrap_or_else(|| vec![base.gamma]);
        let etas = self.sweep.eta.clone().unwrap_or_else(|| vec![base.eta]);
        let mut points = Vec::new();
        for &kbt in &kbts {
            for &gamma in &gammas {
                for &eta in &etas {
                    points.push(ModelParams {
                        kbt,
                        gamma,
                        eta,
                        dim: base.dim.unwrap_or_else(|| auto_dim(kbt)),
                        ..self.base_params()
                    });
                }
            }
        }
        points
    }

    /// Collects every violated constraint (not just the first).
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.run.particles < 2 {
            v.push(format!("run.particles = {} must be >= 2", self.run.particles));
        }
        if self.run.snapshot_every == 0 {
            v.push("run.snapshot_every must be >= 1".into());
        }
        if self.run.seeds_per_point == 0 {
            v.push("run.seeds_per_point must be >= 1".into());
        }
        if self.run.parallel == 0 {
            v.push("run.parallel must be >= 1".into());
        }
        if self.run.cycles > 0 && self.run.transient_cycles >= self.run.cycles {
            v.push(format!(
                "run.transient_cycles = {} must be < run.cycles = {}",
                self.run.transient_cycles, self.run.cycles
            ));
        }
        if let Err(e) = self.grid() {
            v.push(format!("grid: {e}"));
        }
        for (name, axis) in [
            ("kbt", &self.sweep.kbt),
            ("gamma", &self.sweep.gamma),
            ("eta", &self.sweep.eta),
        ] {
            if let Some(vals) = axis {
                if vals.is_empty() {
                    v.push(format!("sweep.{name} must not be empty"));
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in std::iter::once(self.base_params()).chain(self.sweep_points()) {
            for msg in p.violations() {
                if seen.insert(msg.clone()) {
                    v.push(msg);
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() { Ok(()) } else { Err(Error::InvalidConfig(v)) }
    }

    /// Platform-stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialize");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and validates a TOML config file, reporting all violations.
pub fn parse_config<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
    let p = path.as_ref();
    let text = std::fs::read_to_string(p)?;
    let config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::MalformedFile {
        path: p.display().to_string(),
        reason: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Derives a per-run seed from the master seed, the sweep point's parameter
/// values, and the replicate index. Hash-based, so the seed depends only on
/// the point itself, never on its position in the sweep.
pub fn point_seed(master: u64, params: &ModelParams, replicate: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for v in [params.kbt, params.gamma, params.eta] {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(replicate.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Summary of one run, written once as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock seconds per pipeline stage.
    pub timings: BTreeMap<String, f64>,
    pub invariant_violations: u64,
    /// Histogram renormalizations forced by out-of-bounds particles.
    pub out_of_bounds_events: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        RunManifest {
            config_hash,
            seed,
            timings: BTreeMap::new(),
            invariant_violations: 0,
            out_of_bounds_events: 0,
            outputs: Vec::new(),
        }
    }

    /// Writes `manifest.json` into `dir`; refuses to overwrite one.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        if path.exists() {
            return Err(Error::InvalidParameter(format!(
                "manifest already written: {}",
                path.display()
            )));
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serialize");
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

/// Writes a trajectory log as CSV (t, mean_x, mean_p, purity). For
/// particle-filter logs the purity column carries ESS/N.
pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, kind: &str, w: &mut W) -> Result<()> {
    writeln!(w, "# qtrack trajectory log v1")?;
    writeln!(w, "# kind={} points={}", kind, log.len())?;
    writeln!(w, "t,mean_x,mean_p,purity")?;
    for i in 0..log.len() {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            log.times[i], log.mean_x[i], log.mean_p[i], log.purity[i]
        )?;
    }
    Ok(())
}

pub fn save_trajectory_csv<P: AsRef<Path>>(log: &TrajectoryLog, kind: &str, path: P) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_trajectory_csv(log, kind, &mut w)
}

/// Reads a trajectory log back from CSV (snapshots are not serialized).
pub fn load_trajectory_csv<P: AsRef<Path>>(path: P) -> Result<TrajectoryLog> {
    let p = path.as_ref();
    let bad = |reason: &str| Error::MalformedFile {
        path: p.display().to_string(),
        reason: reason.to_string(),
    };
    let r = BufReader::new(std::fs::File::open(p)?);
    let mut log = TrajectoryLog::default();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('t') {
            continue;
        }
        let mut cols = line.split(',').map(|c| c.parse::<f64>());
        let mut next = || -> Result<f64> {
            cols.next()
                .ok_or_else(|| bad("short row"))?
                .map_err(|_| bad("bad number"))
        };
        log.times.push(next()?);
        log.mean_x.push(next()?);
        log.mean_p.push(next()?);
        log.purity.push(next()?);
    }
    Ok(log)
}

/// Runs the bootstrap particle filter over a measurement record, logging
/// ensemble moments and ESS/N (in the purity column) each step.
pub fn track_record(
    record: &MeasurementRecord,
    params: &ModelParams,
    n_particles: usize,
    seed: u64,
) -> Result<(TrajectoryLog, ParticleEnsemble)> {
    record.check_dt(params)?;
    let mut ensemble = pf_init(n_particles, &GaussianPrior::thermal(params), seed)?;
    let mut log = TrajectoryLog::default();
    let (mx, mp) = ensemble_moments(&ensemble);
    log.times.push(0.0);
    log.mean_x.push(mx);
    log.mean_p.push(mp);
    log.purity.push(1.0);
    for (i, &dy) in record.increments.iter().enumerate() {
        let info = pf_update(&mut ensemble, dy, params)?;
        let (mx, mp) = ensemble_moments(&ensemble);
        log.times.push((i + 1) as f64 * params.dt);
        log.mean_x.push(mx);
        log.mean_p.push(mp);
        log.purity.push(info.ess / n_particles as f64);
    }
    Ok((log, ensemble))
}

/// All artifacts of one tracking run.
pub struct TrackingRun {
    pub truth: TrajectoryLog,
    pub conditional: TrajectoryLog,
    pub classical: TrajectoryLog,
    pub record: MeasurementRecord,
    /// (σx, σp) of truth − conditional and truth − classical after the
    /// transient; `None` for zero-cycle runs.
    pub quantum_stats: Option<(f64, f64)>,
    pub classical_stats: Option<(f64, f64)>,
    pub manifest: RunManifest,
}

/// Truth simulation, conditional SME, and particle filter on one shared
/// record, plus tracking-error statistics. Writes CSVs and a manifest when
/// the config names an output directory.
pub fn run_tracking(config: &ExperimentConfig) -> Result<TrackingRun> {
    config.validate()?;
    let params = config.base_params();
    let steps = config.run.cycles * steps_per_cycle(&params);
    let transient = config.run.transient_cycles * steps_per_cycle(&params);
    let seed = config.run.seed;
    let mut manifest = RunManifest::new(config.hash(), seed);

    let t0 = Instant::now();
    let (truth, record) =
        simulate_truth(&params, None, steps, seed, Some(config.run.snapshot_every))?;
    manifest.timings.insert("simulate_truth".into(), t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let conditional =
        estimate_conditional(&record, &params, None, Some(config.run.snapshot_every))?;
    manifest.timings.insert("estimate_conditional".into(), t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let (classical, _) = track_record(&record, &params, config.run.particles, seed ^ 0x9e3779b97f4a7c15)?;
    manifest.timings.insert("particle_filter".into(), t2.elapsed().as_secs_f64());

    let (quantum_stats, classical_stats) = if steps > 0 {
        (
            Some(crate::phase_space::trajectory_error_stats(&truth, &conditional, transient)?),
            Some(crate::phase_space::trajectory_error_stats(&truth, &classical, transient)?),
        )
    } else {
        (None, None)
    };
    manifest.invariant_violations = (truth.tail_warnings + conditional.tail_warnings) as u64;

    if let Some(dir) = &config.run.out_dir {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        record.save(dir.join("record.csv"))?;
        save_trajectory_csv(&truth, "truth", dir.join("truth.csv"))?;
        save_trajectory_csv(&conditional, "conditional", dir.join("conditional.csv"))?;
        save_trajectory_csv(&classical, "classical", dir.join("classical.csv"))?;
        let stats = serde_json::json!({
            "quantum": quantum_stats.map(|(x, p)| serde_json::json!({"sigma_x": x, "sigma_p": p})),
            "classical": classical_stats.map(|(x, p)| serde_json::json!({"sigma_x": x, "sigma_p": p})),
        });
        std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats).unwrap())?;
        for f in ["record.csv", "truth.csv", "conditional.csv", "classical.csv", "stats.json"] {
            manifest.outputs.push(f.into());
        }
        manifest.save(dir)?;
    }

    Ok(TrackingRun {
        truth,
        conditional,
        classical,
        record,
        quantum_stats,
        classical_stats,
        manifest,
    })
}

/// Per-replicate KL statistics at one sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlStat {
    pub kbt: f64,
    pub gamma: f64,
    pub eta: f64,
    pub replicate: u32,
    pub seed: u64,
    pub mean_kl: f64,
    pub std_kl: f64,
    pub snapshots: usize,
    pub out_of_bounds_events: u64,
}

/// Runs one sweep point with one seed: truth record, then conditional SME
/// and particle filter stepped together, comparing positive-Wigner against
/// the particle histogram at every snapshot after the transient.
pub fn run_kl_point(
    params: &ModelParams,
    grid: &PhaseSpaceGrid,
    n_particles: usize,
    steps: usize,
    transient: usize,
    snapshot_every: usize,
    seed: u64,
    replicate: u32,
) -> Result<KlStat> {
    let (_, record) = simulate_truth(params, None, steps, seed, None)?;
    let mut cond = crate::sme::ConditionalSim::new(params, None)?;
    let mut ensemble = pf_init(n_particles, &GaussianPrior::thermal(params), seed ^ 0x517cc1b727220a95)?;
    let mut kls = Vec::new();
    let mut oob_events = 0u64;
    for (i, &dy) in record.increments.iter().enumerate() {
        cond.step(dy)?;
        pf_update(&mut ensemble, dy, params)?;
        let step = i + 1;
        if step > transient && step % snapshot_every == 0 {
            let w = wigner(cond.rho(), grid)?;
            let quantum_pdf = positive_part(&w)?;
            let mut classical_pdf = ensemble_field(&ensemble, grid)?;
            if classical_pdf.out_of_bounds() > 0.0 {
                oob_events += 1;
                classical_pdf = classical_pdf.renormalized()?;
            }
            kls.push(kl_divergence(&classical_pdf, &quantum_pdf)?);
        }
    }
    let n = kls.len().max(1) as f64;
    let mean = kls.iter().sum::<f64>() / n;
    let var = kls.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / n;
    Ok(KlStat {
        kbt: params.kbt,
        gamma: params.gamma,
        eta: params.eta,
        replicate,
        seed,
        mean_kl: mean,
        std_kl: var.sqrt(),
        snapshots: kls.len(),
        out_of_bounds_events: oob_events,
    })
}

/// Full KL sweep over the configured axes × replicates. Points run in a
/// bounded work pool (`run.parallel` workers); results keep the fixed
/// sweep order regardless of scheduling. Writes `kl_sweep.csv`,
/// `kl_sweep.json`, and a manifest when an output directory is configured.
pub fn run_kl_sweep(config: &ExperimentConfig) -> Result<Vec<KlStat>> {
    config.validate()?;
    let grid = config.grid()?;
    let points = config.sweep_points();
    let mut jobs = Vec::new();
    for params in &points {
        for replicate in 0..config.run.seeds_per_point as u32 {
            jobs.push((params.clone(), replicate, point_seed(config.run.seed, params, replicate)));
        }
    }

    let spc = steps_per_cycle(&config.base_params());
    let steps = config.run.cycles * spc;
    let transient = config.run.transient_cycles * spc;
    let n_particles = config.run.particles;
    let snapshot_every = config.run.snapshot_every;

    let workers = config.run.parallel.min(jobs.len().max(1));
    let next_job = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<KlStat>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next_job.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let (params, replicate, seed) = &jobs[idx];
                let out = run_kl_point(
                    params,
                    &grid,
                    n_particles,
                    steps,
                    transient,
                    snapshot_every,
                    *seed,
                    *replicate,
                );
                *results[idx].lock().unwrap() = Some(out);
            });
        }
    });
    let mut stats = Vec::with_capacity(jobs.len());
    for cell in results {
        stats.push(cell.into_inner().unwrap().expect("worker finished")?);
    }

    if let Some(dir) = &config.run.out_dir {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        let mut manifest = RunManifest::new(config.hash(), config.run.seed);
        manifest.out_of_bounds_events = stats.iter().map(|s| s.out_of_bounds_events).sum();

        let mut w = BufWriter::new(std::fs::File::create(dir.join("kl_sweep.csv"))?);
        writeln!(w, "# qtrack kl sweep v1")?;
        writeln!(w, "kbt,gamma,eta,replicate,seed,mean_kl,std_kl,snapshots")?;
        for s in &stats {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{},{},{:.16e},{:.16e},{}",
                s.kbt, s.gamma, s.eta, s.replicate, s.seed, s.mean_kl, s.std_kl, s.snapshots
            )?;
        }
        drop(w);
        std::fs::write(
            dir.join("kl_sweep.json"),
            serde_json::to_string_pretty(&stats).expect("stats serialize"),
        )?;
        manifest.outputs.push("kl_sweep.csv".into());
        manifest.outputs.push("kl_sweep.json".into());
        manifest.save(dir)?;
    }
    Ok(stats)
}
