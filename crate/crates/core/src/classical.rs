//! Classical tracking: the equivalent classical SDE and a bootstrap
//! particle filter run against a measurement record.
//!
//! Each particle carries a phase-space point (x, p) propagated by
//! Euler–Maruyama through
//!
//! dp = (1 + α sin 2φ)(−x − γx³)dt − Γp·dt + √(2k)dY + √(2Γ·kBT)dU
//! dx = p·dt
//!
//! with φ = atan2(p, x) per particle, dY the measurement back-action noise
//! and dU the thermal noise. The filter weights particles against a record
//! increment dy via w̃⁽ⁱ⁾ ∝ exp(−(dy − √(8kη)x⁽ⁱ⁾Δt)² / 2Δt), monitors the
//! effective sample size N_eff = 1/Σw², and resamples systematically when
//! N_eff < N/2.

use crate::fock::ModelParams;
use crate::sme::{MeasurementRecord, params_hash};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// A single classical phase-space point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalState {
    pub x: f64,
    pub p: f64,
}

/// One Euler–Maruyama step of the classical SDE. `d_y` and `d_u` are the
/// pre-drawn Wiener increments (each ~ Normal(0, Δt)).
pub fn sde_step(state: ClassicalState, params: &ModelParams, d_y: f64, d_u: f64) -> ClassicalState {
    let dt = params.dt;
    let phi = if state.x == 0.0 && state.p == 0.0 {
        0.0
    } else {
        state.p.atan2(state.x)
    };
    let c_fb = 1.0 + params.alpha * (2.0 * phi).sin();
    let dp = c_fb * (-state.x - params.gamma * state.x.powi(3)) * dt - params.damping * state.p * dt
        + (2.0 * params.k).sqrt() * d_y
        + (2.0 * params.damping * params.kbt).sqrt() * d_u;
    ClassicalState {
        x: state.x + state.p * dt,
        p: state.p + dp,
    }
}

/// Gaussian initialization prior for the filter.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPrior {
    pub mean_x: f64,
    pub mean_p: f64,
    pub var_x: f64,
    pub var_p: f64,
}

impl GaussianPrior {
    /// Stationary covariance of the linear (γ = α = 0) model: the Lyapunov
    /// equation for dx = p dt, dp = −x dt − Γp dt + √(2k)dY + √(2ΓkBT)dU
    /// gives Var(x) = Var(p) = kBT + k/Γ with zero cross-covariance.
    pub fn thermal(params: &ModelParams) -> Self {
        let v = params.kbt + params.k / params.damping;
        GaussianPrior { mean_x: 0.0, mean_p: 0.0, var_x: v, var_p: v }
    }
}

/// Weighted particle ensemble representing the classical posterior.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    particles: Vec<ClassicalState>,
    weights: Vec<f64>,
    rng: ChaCha12Rng,
}

/// Diagnostics from one filter update.
#[derive(Debug, Clone, Copy)]
pub struct PfStepInfo {
    /// Effective sample size after reweighting (before any resampling).
    pub ess: f64,
    pub resampled: bool,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[ClassicalState] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[cfg(test)]
    pub(crate) fn set_for_test(&mut self, states: Vec<(f64, f64)>, weights: Vec<f64>) {
        self.particles = states.into_iter().map(|(x, p)| ClassicalState { x, p }).collect();
        self.weights = weights;
    }
}

/// Draws `n` particles from the prior with uniform weights 1/n.
pub fn pf_init(n: usize, prior: &GaussianPrior, seed: u64) -> Result<ParticleEnsemble> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("particle count {n} must be >= 2")));
    }
    if !(prior.var_x >= 0.0 && prior.var_p >= 0.0) {
        return Err(Error::InvalidParameter("prior variances must be >= 0".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nx = Normal::new(prior.mean_x, prior.var_x.sqrt()).expect("finite prior");
    let np = Normal::new(prior.mean_p, prior.var_p.sqrt()).expect("finite prior");
    let particles = (0..n)
        .map(|_| ClassicalState { x: nx.sample(&mut rng), p: np.sample(&mut rng) })
        .collect();
    Ok(ParticleEnsemble {
        particles,
        weights: vec![1.0 / n as f64; n],
        rng,
    })
}

/// One bootstrap-filter step: reweight by the likelihood of `dy` given each
/// particle's current position, resample if N_eff < N/2, then propagate
/// every particle through the SDE with fresh independent noises.
///
/// The record increment dy(tᵢ) carries the position at the start of the
/// interval, so the likelihood is evaluated before propagation.
pub fn pf_update(
    ensemble: &mut ParticleEnsemble,
    dy: f64,
    params: &ModelParams,
) -> Result<PfStepInfo> {
    if !dy.is_finite() {
        return Err(Error::NonFinite(format!("measurement increment {dy}")));
    }
    let n = ensemble.len();
    let dt = params.dt;
    let meas_coeff = (8.0 * params.k * params.eta).sqrt();

    let mut sum = 0.0;
    for (w, part) in ensemble.weights.iter_mut().zip(&ensemble.particles) {
        let resid = dy - meas_coeff * part.x * dt;
        *w *= (-resid * resid / (2.0 * dt)).exp();
        sum += *w;
    }
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::DegenerateEnsemble);
    }
    let mut ess_inv = 0.0;
    for w in ensemble.weights.iter_mut() {
        *w /= sum;
        ess_inv += *w * *w;
    }
    let ess = 1.0 / ess_inv;

    let resampled = ess < n as f64 / 2.0;
    if resampled {
        systematic_resample(ensemble)?;
    }

    let noise = Normal::new(0.0, dt.sqrt()).expect("dt > 0");
    for part in ensemble.particles.iter_mut() {
        let d_y = noise.sample(&mut ensemble.rng);
        let d_u = noise.sample(&mut ensemble.rng);
        *part = sde_step(*part, params, d_y, d_u);
    }
    Ok(PfStepInfo { ess, resampled })
}

/// N_eff = 1/Σwᵢ² for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "effective_sample_size needs normalized weights (sum = {sum})"
        )));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// Systematic resampling: one uniform offset u, selection points
/// (u + i)/N against the cumulative weights, output weights uniform.
pub fn systematic_resample(ensemble: &mut ParticleEnsemble) -> Result<()> {
    let n = ensemble.len();
    let total: f64 = ensemble.weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::DegenerateEnsemble);
    }
    let u: f64 = ensemble.rng.gen_range(0.0..1.0);
    let mut resampled = Vec::with_capacity(n);
    let mut cumulative = ensemble.weights[0] / total;
    let mut j = 0;
    for i in 0..n {
        let point = (u + i as f64) / n as f64;
        while point > cumulative && j + 1 < n {
            j += 1;
            cumulative += ensemble.weights[j] / total;
        }
        resampled.push(ensemble.particles[j]);
    }
    ensemble.particles = resampled;
    ensemble.weights.fill(1.0 / n as f64);
    Ok(())
}

/// Weighted ensemble means (⟨x⟩, ⟨p⟩).
pub fn ensemble_moments(ensemble: &ParticleEnsemble) -> (f64, f64) {
    let mut mx = 0.0;
    let mut mp = 0.0;
    for (w, part) in ensemble.weights.iter().zip(&ensemble.particles) {
        mx += w * part.x;
        mp += w * part.p;
    }
    (mx, mp)
}

/// Integrates the classical SDE as a truth trajectory, emitting the
/// measurement record dy = √(8kη)·x·Δt + dW with record noise independent
/// of the dynamical noises. Returns steps+1 states (including the initial
/// point, drawn from the thermal stationary prior).
pub fn simulate_classical_truth(
    params: &ModelParams,
    steps: usize,
    seed: u64,
) -> Result<(Vec<ClassicalState>, MeasurementRecord)> {
    params.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.dt.sqrt()).expect("dt > 0");
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let prior = GaussianPrior::thermal(params);
    let mut state = ClassicalState {
        x: prior.mean_x + prior.var_x.sqrt() * standard.sample(&mut rng),
        p: prior.mean_p + prior.var_p.sqrt() * standard.sample(&mut rng),
    };
    let meas_coeff = (8.0 * params.k * params.eta).sqrt();
    let mut states = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    states.push(state);
    for _ in 0..steps {
        let dw = noise.sample(&mut rng);
        increments.push(meas_coeff * state.x * params.dt + dw);
        let d_y = noise.sample(&mut rng);
        let d_u = noise.sample(&mut rng);
        state = sde_step(state, params, d_y, d_u);
        states.push(state);
    }
    Ok((
        states,
        MeasurementRecord {
            dt: params.dt,
            increments,
            seed,
            params_hash: params_hash(params),
        },
    ))
}
