//! Closed-form per-mode analytics of the Ornstein-Uhlenbeck process
//! `dX_k = -a_k X_k dt + sigma sqrt(lam_k) dW_k` and of its bridges.
//!
//! Every quantity is expressed through the unit variance
//! `u(tau) = (1 - e^{-2 a tau}) / (2a)` (equal to `tau` when `a = 0`), so the
//! transition variance is `sigma^2 lam u(tau)` and the stationary variance is
//! `s_inf = sigma^2 lam / (2a)`.

use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::basis::{EigenSystem, SpectralField};
use crate::error::{Error, Result};
use crate::sde::Trajectory;

/// Gaussian law of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordGaussian {
    pub mean: f64,
    pub var: f64,
}

/// `(1 - e^{-2 a tau}) / (2a)`, exact in the small-`a tau` regime.
pub fn unit_var(a: f64, tau: f64) -> f64 {
    if a == 0.0 {
        tau
    } else {
        -(-2.0 * a * tau).exp_m1() / (2.0 * a)
    }
}

/// One scalar OU coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuCoord {
    pub a: f64,
    pub lam: f64,
    pub sigma: f64,
}

impl OuCoord {
    pub fn new(a: f64, lam: f64, sigma: f64) -> Self {
        OuCoord { a, lam, sigma }
    }

    fn diffusion2(&self) -> f64 {
        self.sigma * self.sigma * self.lam
    }

    pub fn stationary_var(&self) -> f64 {
        self.diffusion2() / (2.0 * self.a)
    }

    /// Mean factor `e^{-a tau}` and variance `sigma^2 lam u(tau)`.
    pub fn transition(&self, tau: f64) -> CoordGaussian {
        CoordGaussian { mean: (-self.a * tau).exp(), var: self.diffusion2() * unit_var(self.a, tau) }
    }

    /// Log density of `N(e^{-at} x, Sigma(t))` at `y` relative to `N(0, s_inf)`.
    pub fn log_rn_density(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, inf)".into() });
        }
        self.require_stationary()?;
        let s_inf = self.stationary_var();
        let one_m = -(-2.0 * self.a * t).exp_m1();
        let r = y - (-self.a * t).exp() * x;
        Ok(-0.5 * one_m.ln() - r * r / (2.0 * s_inf * one_m) + y * y / (2.0 * s_inf))
    }

    /// `d/dx log q_t(x, y)`.
    pub fn log_rn_density_grad_x(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, inf)".into() });
        }
        self.require_stationary()?;
        let m = (-self.a * t).exp();
        Ok(m * (y - m * x) / (self.stationary_var() * -(-2.0 * self.a * t).exp_m1()))
    }

    /// `d/dy log q_t(x, y)`.
    pub fn log_rn_density_grad_y(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, inf)".into() });
        }
        self.require_stationary()?;
        let m = (-self.a * t).exp();
        let s_inf = self.stationary_var();
        Ok(-(y - m * x) / (s_inf * -(-2.0 * self.a * t).exp_m1()) + y / s_inf)
    }

    fn require_stationary(&self) -> Result<()> {
        if !(self.a > 0.0 && self.lam > 0.0 && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density relative to the invariant law needs a, lam, sigma > 0 (got {}, {}, {})",
                self.a, self.lam, self.sigma
            )));
        }
        Ok(())
    }

    /// Coefficient `a / sinh(a tau)` multiplying `x_T - e^{-a tau} x` in the bridge drift.
    pub fn pull_coeff(&self, tau: f64) -> f64 {
        let u = self.a * tau;
        if u.abs() < 1e-6 {
            (1.0 - u * u / 6.0) / tau
        } else {
            self.a / u.sinh()
        }
    }

    /// Drift of the bridge pinned at `x_t` at remaining time `tau = T - t`.
    pub fn bridge_drift(&self, tau: f64, x: f64, x_t: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::TimeOutOfRange { t: tau, range: "remaining time must be positive".into() });
        }
        Ok(-self.a * x + self.pull_coeff(tau) * (x_t - (-self.a * tau).exp() * x))
    }

    /// Law of `X_t` given `X_0 = x0` and `X_T = x_t`.
    pub fn bridge_marginal(&self, t: f64, horizon: f64, x0: f64, x_t: f64) -> Result<CoordGaussian> {
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, range: format!("[0, {horizon}]") });
        }
        if t == 0.0 {
            return Ok(CoordGaussian { mean: x0, var: 0.0 });
        }
        if t == horizon {
            return Ok(CoordGaussian { mean: x_t, var: 0.0 });
        }
        let tau = horizon - t;
        let (ut, utau, u_all) = (unit_var(self.a, t), unit_var(self.a, tau), unit_var(self.a, horizon));
        let (mt, mtau, m_all) = ((-self.a * t).exp(), (-self.a * tau).exp(), (-self.a * horizon).exp());
        Ok(CoordGaussian {
            mean: mt * x0 + ut * mtau / u_all * (x_t - m_all * x0),
            var: self.diffusion2() * ut * utau / u_all,
        })
    }
}

/// Process constants shared by all modes.
#[derive(Debug, Clone)]
pub struct OUBridgeParams {
    pub eigs: Arc<EigenSystem>,
    pub sigma: f64,
    pub horizon: f64,
}

impl OUBridgeParams {
    /// `sigma = 0` is accepted (deterministic dynamics); operations that
    /// divide by the noise level reject it individually.
    pub fn new(eigs: Arc<EigenSystem>, sigma: f64, horizon: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(OUBridgeParams { eigs, sigma, horizon })
    }

    pub fn k(&self) -> usize {
        self.eigs.k()
    }

    pub fn coord(&self, k: usize) -> OuCoord {
        OuCoord::new(self.eigs.a()[k], self.eigs.lam()[k], self.sigma)
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k >= self.k() {
            return Err(Error::InvalidArgument(format!("mode {k} out of range ({} modes)", self.k())));
        }
        Ok(())
    }

    pub fn transition_moments(&self, k: usize, tau: f64) -> Result<CoordGaussian> {
        self.check_mode(k)?;
        if !(0.0..=self.horizon).contains(&tau) {
            return Err(Error::TimeOutOfRange { t: tau, range: format!("[0, {}]", self.horizon) });
        }
        Ok(self.coord(k).transition(tau))
    }

    pub fn log_rn_density(&self, k: usize, t: f64, x: f64, y: f64) -> Result<f64> {
        self.check_mode(k)?;
        self.coord(k).log_rn_density(t, x, y)
    }

    /// Total bridge drift of mode k at time t.
    pub fn bridge_drift(&self, k: usize, t: f64, x: f64, x_t: f64) -> Result<f64> {
        self.check_mode(k)?;
        if !(t < self.horizon) {
            return Err(Error::TimeOutOfRange { t, range: format!("[0, {})", self.horizon) });
        }
        self.coord(k).bridge_drift(self.horizon - t, x, x_t)
    }

    pub fn bridge_marginal(&self, k: usize, t: f64, x0: f64, x_t: f64) -> Result<CoordGaussian> {
        self.check_mode(k)?;
        self.coord(k).bridge_marginal(t, self.horizon, x0, x_t)
    }

    /// Draw `X_t` for every mode from the bridge marginal.
    pub fn sample_bridge_marginal<R: Rng + ?Sized>(
        &self,
        t: f64,
        x0: &[f64],
        x_t: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        (0..self.k())
            .map(|k| {
                let g = self.coord(k).bridge_marginal(t, self.horizon, x0[k], x_t[k])?;
                let z: f64 = rng.sample(StandardNormal);
                Ok(g.mean + g.var.sqrt() * z)
            })
            .collect()
    }
}

/// Sequential exact sampling of the bridge from `x0` to `x_t` on `times`.
///
/// Each step draws the next state from its Gaussian law given the current
/// state and the pinned endpoint, so there is no discretization error. The
/// final state is set to `x_t` exactly. The standard-normal draws are kept as
/// the trajectory's noise record.
pub fn sample_bridge_path<R: Rng + ?Sized>(
    p: &OUBridgeParams,
    x0: &SpectralField,
    x_t: &SpectralField,
    times: &[f64],
    rng: &mut R,
) -> Result<Trajectory> {
    let k = p.k();
    if x0.coeffs.len() != k || x_t.coeffs.len() != k {
        return Err(Error::Shape("endpoint coefficients do not match the eigen-system".into()));
    }
    validate_times(times, p.horizon)?;
    let n = times.len();
    let mut states = Array3::zeros((n, 1, k));
    let mut noises = Array3::zeros((n - 1, 1, k));
    for j in 0..k {
        states[[0, 0, j]] = x0.coeffs[j];
    }
    for i in 0..n - 1 {
        let last = i + 1 == n - 1;
        let (s, s_next) = (times[i], if last { p.horizon } else { times[i + 1] });
        let tau = p.horizon - s;
        for j in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            noises[[i, 0, j]] = z;
            let next = if last {
                x_t.coeffs[j]
            } else {
                let g = p.coord(j).bridge_marginal(s_next - s, tau, states[[i, 0, j]], x_t.coeffs[j])?;
                g.mean + g.var.sqrt() * z
            };
            states[[i + 1, 0, j]] = next;
        }
    }
    Ok(Trajectory { eigs: p.eigs.clone(), times: times.to_vec(), states, noises, controls: None })
}

/// `times` must start at 0, end at the horizon and increase strictly.
pub fn validate_times(times: &[f64], horizon: f64) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::InvalidArgument("need at least two time points".into()));
    }
    if times[0] != 0.0 {
        return Err(Error::InvalidArgument(format!("time grid starts at {} instead of 0", times[0])));
    }
    let last = *times.last().unwrap();
    if (last - horizon).abs() > 1e-12 * horizon {
        return Err(Error::InvalidArgument(format!("time grid ends at {last}, horizon is {horizon}")));
    }
    if let Some(w) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(format!(
            "degenerate time step between t[{w}] = {} and t[{}] = {}",
            times[w],
            w + 1,
            times[w + 1]
        )));
    }
    Ok(())
}

/// `n + 1` equally spaced times on `[0, horizon]`.
pub fn uniform_times(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { horizon } else { horizon * i as f64 / n as f64 }).collect()
}
