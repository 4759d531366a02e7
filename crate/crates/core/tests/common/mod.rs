//! Shared oracles for the integration tests.

use nalgebra::{Matrix2, Vector2};
use qtrack::fock::ModelParams;

/// Discrete Kalman filter implementing exactly the Bayesian model the
/// bootstrap particle filter targets in the linear regime (γ = α = 0):
///
///   z_{k+1} = F z_k + w_k,   w ~ N(0, Q),
///   y_k     = H z_k + v_k,   v ~ N(0, R),
///
/// with F = [[1, Δt], [−Δt, 1−ΓΔt]] (Euler–Maruyama one-step map),
/// Q = diag(0, (2k + 2ΓkBT)Δt) (measurement back-action plus thermal
/// noise — the filter propagates with fresh noise draws, so the
/// back-action kick is process noise), H = (√(8kη)Δt, 0), R = Δt, and the
/// stationary prior N(0, (kBT + k/Γ)·I). The update order matches the
/// particle filter: weight on the pre-propagation state, then propagate.
pub struct KalmanFilter {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    f: Matrix2<f64>,
    q: Matrix2<f64>,
    h: f64,
    r: f64,
}

impl KalmanFilter {
    pub fn new(params: &ModelParams) -> Self {
        assert_eq!(params.gamma, 0.0, "Kalman oracle needs a linear model");
        assert_eq!(params.alpha, 0.0, "Kalman oracle needs a linear model");
        let dt = params.dt;
        let v = params.kbt + params.k / params.damping;
        KalmanFilter {
            mean: Vector2::zeros(),
            cov: Matrix2::from_diagonal_element(v),
            f: Matrix2::new(1.0, dt, -dt, 1.0 - params.damping * dt),
            q: Matrix2::new(
                0.0,
                0.0,
                0.0,
                (2.0 * params.k + 2.0 * params.damping * params.kbt) * dt,
            ),
            h: (8.0 * params.k * params.eta).sqrt() * dt,
            r: dt,
        }
    }

    /// Measurement update with the record increment, then time update.
    pub fn step(&mut self, dy: f64) {
        let h = Vector2::new(self.h, 0.0);
        let s = (h.transpose() * self.cov * h)[(0, 0)] + self.r;
        let gain = self.cov * h / s;
        let innovation = dy - (h.transpose() * self.mean)[(0, 0)];
        self.mean += gain * innovation;
        self.cov -= gain * h.transpose() * self.cov;
        self.cov = (self.cov + self.cov.transpose()) * 0.5;

        self.mean = self.f * self.mean;
        self.cov = self.f * self.cov * self.f.transpose() + self.q;
    }
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
