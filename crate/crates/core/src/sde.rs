//! Controlled SDE simulation in spectral coordinates and gradient replay.
//!
//! Each step evaluates the control on the grid, projects it onto the
//! retained modes and advances every mode by an affine map
//! `X' = c * X + b * alpha + d * xi` whose coefficients depend on the scheme:
//!
//! * Euler-Maruyama: `c = 1 - a dt`, `b = sigma sqrt(lam) dt`, `d = sigma sqrt(lam dt)`;
//! * exponential: `c = e^{-a dt}`, `b = sigma sqrt(lam) (1 - e^{-a dt}) / a`,
//!   `d = sigma sqrt(lam u(dt))`.
//!
//! Path `i` draws its noise from the stream `noise.child(i)` one step at a
//! time, so results do not depend on batch chunking.

use std::io::Write;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{EigenSystem, GridTransform, SpectralField};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::io::{fmt_f64, write_csv};
use crate::ou_bridge::{unit_var, uniform_times, OUBridgeParams};
use crate::rng::{StreamKey, StreamRng};

/// A control `alpha(t, x)` evaluated on a grid for a batch of states.
pub trait ControlFn: Sync {
    /// `t` has one entry per row of `x` (B x N grid values); returns B x N.
    fn eval(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec) -> Result<Array2<f64>>;
}

/// A control with parameters and reverse-mode derivatives.
pub trait DiffControl: ControlFn {
    fn n_params(&self) -> usize;

    /// Gradients of `sum(cot * eval(t, x))` with respect to the parameters
    /// (summed over the batch) and to `x`.
    fn vjp(&self, t: &[f64], x: ArrayView2<f64>, grid: &GridSpec, cot: ArrayView2<f64>)
        -> Result<(Vec<f64>, Array2<f64>)>;

    /// Evaluate, then pull back the cotangent `cot_of(output)` in one pass.
    /// Returns `(output, grad_params, grad_x)`.
    fn eval_vjp(
        &self,
        t: &[f64],
        x: ArrayView2<f64>,
        grid: &GridSpec,
        cot_of: &mut dyn FnMut(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
        let out = self.eval(t, x, grid)?;
        let cot = cot_of(&out);
        let (g, gx) = self.vjp(t, x, grid, cot.view())?;
        Ok((out, g, gx))
    }
}

/// `alpha = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl ControlFn for ZeroControl {
    fn eval(&self, _t: &[f64], x: ArrayView2<f64>, _grid: &GridSpec) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }
}

impl DiffControl for ZeroControl {
    fn n_params(&self) -> usize {
        0
    }

    fn vjp(&self, _t: &[f64], x: ArrayView2<f64>, _grid: &GridSpec, _cot: ArrayView2<f64>)
        -> Result<(Vec<f64>, Array2<f64>)> {
        Ok((Vec::new(), Array2::zeros(x.raw_dim())))
    }
}

/// Pointwise control from a closure `(t, grid values of one state) -> grid values`.
pub struct FnControl<F>(pub F);

impl<F> ControlFn for FnControl<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    fn eval(&self, t: &[f64], x: ArrayView2<f64>, _grid: &GridSpec) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (b, row) in x.outer_iter().enumerate() {
            let v = (self.0)(t[b], &row.to_vec());
            if v.len() != row.len() {
                return Err(Error::Shape(format!("control returned {} values for {} points", v.len(), row.len())));
            }
            out.row_mut(b).assign(&ndarray::ArrayView1::from(&v[..]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    EulerMaruyama,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScheme {
    pub kind: SchemeKind,
    pub n_steps: usize,
    /// Drop the noise of the last step, returning the conditional mean of
    /// the terminal state given the second-to-last one.
    #[serde(default)]
    pub denoise_final_step: bool,
    /// Step times `T (1 - (1 - i/n)^p)`; `p = 1` is the uniform grid and larger
    /// values concentrate steps near the horizon.
    #[serde(default = "one")]
    pub time_power: f64,
}

fn one() -> f64 {
    1.0
}

impl StepScheme {
    pub fn euler(n_steps: usize) -> Self {
        StepScheme { kind: SchemeKind::EulerMaruyama, n_steps, denoise_final_step: false, time_power: 1.0 }
    }

    pub fn exponential(n_steps: usize) -> Self {
        StepScheme { kind: SchemeKind::Exponential, n_steps, denoise_final_step: false, time_power: 1.0 }
    }

    pub fn denoised(mut self) -> Self {
        self.denoise_final_step = true;
        self
    }

    pub fn refined(mut self, power: f64) -> Self {
        self.time_power = power;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        if !(self.time_power >= 1.0 && self.time_power.is_finite()) {
            return Err(Error::InvalidArgument(format!("time_power must be at least 1, got {}", self.time_power)));
        }
        Ok(())
    }

    pub fn times(&self, horizon: f64) -> Vec<f64> {
        if self.time_power == 1.0 {
            return uniform_times(horizon, self.n_steps);
        }
        let n = self.n_steps as f64;
        let mut t: Vec<f64> = (0..=self.n_steps).map(|i| horizon * (1.0 - (1.0 - i as f64 / n).powf(self.time_power))).collect();
        t[self.n_steps] = horizon;
        t
    }

    /// Per-mode `(c, b, d)` for a step of length `dt`.
    fn coefficients(&self, p: &OUBridgeParams, dt: f64, last: bool) -> StepCoeffs {
        let k = p.k();
        let mut c = vec![0.0; k];
        let mut b = vec![0.0; k];
        let mut d = vec![0.0; k];
        for j in 0..k {
            let (a, lam) = (p.eigs.a()[j], p.eigs.lam()[j]);
            let g = p.sigma * lam.sqrt();
            match self.kind {
                SchemeKind::EulerMaruyama => {
                    c[j] = 1.0 - a * dt;
                    b[j] = g * dt;
                    d[j] = g * dt.sqrt();
                }
                SchemeKind::Exponential => {
                    c[j] = (-a * dt).exp();
                    b[j] = if a == 0.0 { g * dt } else { g * -(-a * dt).exp_m1() / a };
                    d[j] = g * unit_var(a, dt).sqrt();
                }
            }
            if last && self.denoise_final_step {
                d[j] = 0.0;
            }
        }
        StepCoeffs { c, b, d }
    }
}

struct StepCoeffs {
    c: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
}

/// A simulated (or bridge-sampled) batch of paths in spectral coordinates.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub eigs: Arc<EigenSystem>,
    pub times: Vec<f64>,
    /// (n_times, batch, K)
    pub states: Array3<f64>,
    /// (n_times - 1, batch, K) standard-normal draws.
    pub noises: Array3<f64>,
    /// (n_times - 1, batch, K) projected control values, when recorded.
    pub controls: Option<Array3<f64>>,
}

impl Trajectory {
    pub fn batch(&self) -> usize {
        self.states.dim().1
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, i: usize, b: usize) -> SpectralField {
        SpectralField { eigs: self.eigs.clone(), coeffs: self.states.slice(s![i, b, ..]).to_vec() }
    }

    /// Terminal states, batch x K.
    pub fn terminal(&self) -> Array2<f64> {
        self.states.index_axis(Axis(0), self.times.len() - 1).to_owned()
    }

    /// CSV with columns `t,mode_index,coeff` for path `b`.
    pub fn write_spectral_csv<W: Write>(&self, w: W, b: usize) -> Result<()> {
        let k = self.eigs.k();
        let rows = self.times.iter().enumerate().flat_map(|(i, &t)| {
            (0..k).map(move |j| vec![fmt_f64(t), j.to_string(), fmt_f64(self.states[[i, b, j]])])
        });
        write_csv(w, &["t", "mode_index", "coeff"], rows)
    }

    /// CSV with columns `t,grid_index,value` for path `b` evaluated on `grid`.
    pub fn write_grid_csv<W: Write>(&self, w: W, b: usize, grid: &GridSpec) -> Result<()> {
        let tr = self.eigs.transform_for(grid, false)?;
        let coeffs = self.states.slice(s![.., b, ..]);
        let values = tr.expand(coeffs);
        let n = grid.len();
        let rows = self.times.iter().enumerate().flat_map(|(i, &t)| {
            let values = &values;
            (0..n).map(move |p| vec![fmt_f64(t), p.to_string(), fmt_f64(values[[i, p]])])
        });
        write_csv(w, &["t", "grid_index", "value"], rows)
    }
}

/// Project grid values `x0` (batch x N on `grid`) onto the retained modes.
pub fn initial_spectral(p: &OUBridgeParams, x0: ArrayView2<f64>, grid: &GridSpec) -> Result<Array2<f64>> {
    let tr = p.eigs.transform_for(grid, false)?;
    if x0.ncols() != grid.len() {
        return Err(Error::Shape(format!("initial states have {} values, grid has {}", x0.ncols(), grid.len())));
    }
    Ok(tr.analysis(x0))
}

struct RunOut {
    traj: Option<Trajectory>,
    terminal: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run(
    p: &OUBridgeParams,
    x0_spec: Array2<f64>,
    control: &dyn ControlFn,
    scheme: &StepScheme,
    tr: &GridTransform,
    noise: &StreamKey,
    path_offset: u64,
    store: bool,
) -> Result<RunOut> {
    scheme.validate()?;
    let (nb, k) = x0_spec.dim();
    let n = scheme.n_steps;
    let times = scheme.times(p.horizon);
    let mut rngs: Vec<StreamRng> = (0..nb as u64).map(|b| noise.child(path_offset + b).rng()).collect();

    let mut states = if store { Array3::zeros((n + 1, nb, k)) } else { Array3::zeros((0, 0, 0)) };
    let mut noises = if store { Array3::zeros((n, nb, k)) } else { Array3::zeros((0, 0, 0)) };
    let mut controls = if store { Array3::zeros((n, nb, k)) } else { Array3::zeros((0, 0, 0)) };
    if store {
        states.index_axis_mut(Axis(0), 0).assign(&x0_spec);
    }
    let mut x = x0_spec;
    let mut xi = Array2::<f64>::zeros((nb, k));
    for i in 0..n {
        let dt = times[i + 1] - times[i];
        let coeffs = scheme.coefficients(p, dt, i + 1 == n);
        let grid_x = tr.expand(x.view());
        let alpha = control.eval(&vec![times[i]; nb], grid_x.view(), tr.grid())?;
        if alpha.dim() != grid_x.dim() {
            return Err(Error::Shape(format!("control output {:?}, expected {:?}", alpha.dim(), grid_x.dim())));
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i, what: "control output".into() });
        }
        let alpha_spec = tr.analysis(alpha.view());
        for (b, rng) in rngs.iter_mut().enumerate() {
            for j in 0..k {
                xi[[b, j]] = rng.sample(StandardNormal);
            }
        }
        for b in 0..nb {
            for j in 0..k {
                x[[b, j]] = coeffs.c[j] * x[[b, j]] + coeffs.b[j] * alpha_spec[[b, j]] + coeffs.d[j] * xi[[b, j]];
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i + 1, what: "state".into() });
        }
        if store {
            states.index_axis_mut(Axis(0), i + 1).assign(&x);
            noises.index_axis_mut(Axis(0), i).assign(&xi);
            controls.index_axis_mut(Axis(0), i).assign(&alpha_spec);
        }
    }
    let traj = store.then(|| Trajectory { eigs: p.eigs.clone(), times, states, noises, controls: Some(controls) });
    Ok(RunOut { traj, terminal: x })
}

/// Simulate a batch of controlled paths started from grid values `x0`
/// (batch x N on `grid`), recording states, noises and projected controls.
pub fn simulate(
    p: &OUBridgeParams,
    x0: ArrayView2<f64>,
    control: &dyn ControlFn,
    scheme: &StepScheme,
    grid: &GridSpec,
    noise: &StreamKey,
) -> Result<Trajectory> {
    let tr = p.eigs.transform_for(grid, false)?;
    let x0_spec = initial_spectral(p, x0, grid)?;
    Ok(run(p, x0_spec, control, scheme, &tr, noise, 0, true)?.traj.unwrap())
}

/// As [`simulate`] from spectral initial states (batch x K).
pub fn simulate_spectral(
    p: &OUBridgeParams,
    x0_spec: ArrayView2<f64>,
    control: &dyn ControlFn,
    scheme: &StepScheme,
    grid: &GridSpec,
    noise: &StreamKey,
) -> Result<Trajectory> {
    let tr = p.eigs.transform_for(grid, false)?;
    Ok(run(p, x0_spec.to_owned(), control, scheme, &tr, noise, 0, true)?.traj.unwrap())
}

/// Terminal spectral states (batch x K) of `x0_spec.nrows()` paths, simulated
/// `chunk` paths at a time without storing trajectories.
pub fn simulate_terminal(
    p: &OUBridgeParams,
    x0_spec: ArrayView2<f64>,
    control: &dyn ControlFn,
    scheme: &StepScheme,
    grid: &GridSpec,
    noise: &StreamKey,
    chunk: usize,
) -> Result<Array2<f64>> {
    let tr = p.eigs.transform_for(grid, false)?;
    let nb = x0_spec.nrows();
    let chunk = chunk.max(1);
    let mut out = Array2::zeros(x0_spec.raw_dim());
    let mut start = 0;
    while start < nb {
        let end = (start + chunk).min(nb);
        let part = x0_spec.slice(s![start..end, ..]).to_owned();
        let r = run(p, part, control, scheme, &tr, noise, start as u64, false)?;
        out.slice_mut(s![start..end, ..]).assign(&r.terminal);
        start = end;
    }
    Ok(out)
}

/// Which running cost the replay differentiates in addition to the terminal term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunningCost {
    None,
    /// `sum_i 1/2 |alpha_spec_i|^2 dt_i`.
    ControlEnergy,
}

/// Gradients of a pathwise loss.
#[derive(Debug, Clone)]
pub struct ControlGradient {
    /// Summed over the batch.
    pub theta: Vec<f64>,
    /// d loss / d initial spectral state, batch x K.
    pub x0_spectral: Array2<f64>,
    /// d loss / d initial grid values, batch x N.
    pub x0_grid: Array2<f64>,
}

/// Reverse accumulation through the recorded discrete recursion.
///
/// `terminal_grad` is `d loss / d X_N` in spectral coordinates (batch x K).
/// The noises are treated as constants, so the result is the exact gradient
/// of the discretized objective.
pub fn replay_gradient(
    traj: &Trajectory,
    p: &OUBridgeParams,
    control: &dyn DiffControl,
    scheme: &StepScheme,
    grid: &GridSpec,
    terminal_grad: ArrayView2<f64>,
    running: RunningCost,
) -> Result<ControlGradient> {
    let n = traj.n_steps();
    if traj.noises.dim().0 != n || n != scheme.n_steps {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} steps and {} noise records, scheme has {}",
            n,
            traj.noises.dim().0,
            scheme.n_steps
        )));
    }
    let tr = p.eigs.transform_for(grid, false)?;
    let nb = traj.batch();
    if terminal_grad.dim() != (nb, p.k()) {
        return Err(Error::Shape(format!("terminal gradient {:?}, expected ({nb}, {})", terminal_grad.dim(), p.k())));
    }
    let w = tr.weight();
    let mut g = terminal_grad.to_owned();
    let mut theta = vec![0.0; control.n_params()];
    for i in (0..n).rev() {
        let dt = traj.times[i + 1] - traj.times[i];
        let coeffs = scheme.coefficients(p, dt, i + 1 == n);
        let x_spec = traj.states.index_axis(Axis(0), i);
        let x_grid = tr.expand(x_spec);
        let t = vec![traj.times[i]; nb];

        let mut g_alpha = g.clone();
        for mut row in g_alpha.outer_iter_mut() {
            for (v, b) in row.iter_mut().zip(&coeffs.b) {
                *v *= b;
            }
        }
        if running == RunningCost::ControlEnergy {
            let alpha_spec = match &traj.controls {
                Some(c) => c.index_axis(Axis(0), i).to_owned(),
                None => tr.analysis(control.eval(&t, x_grid.view(), grid)?.view()),
            };
            g_alpha.scaled_add(dt, &alpha_spec);
        }
        let mut cot = tr.expand(g_alpha.view());
        cot *= w;
        let (gt, gx) = control.vjp(&t, x_grid.view(), grid, cot.view())?;
        for (acc, v) in theta.iter_mut().zip(&gt) {
            *acc += v;
        }
        let back = tr.project(gx.view());
        for b in 0..nb {
            for j in 0..p.k() {
                g[[b, j]] = coeffs.c[j] * g[[b, j]] + back[[b, j]];
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i, what: "adjoint state".into() });
        }
    }
    let mut x0_grid = tr.expand(g.view());
    x0_grid *= w;
    Ok(ControlGradient { theta, x0_spectral: g, x0_grid })
}

/// `sum_i 1/2 |alpha_spec_i|^2 dt_i` per path, from recorded controls.
pub fn control_energy(traj: &Trajectory) -> Result<Vec<f64>> {
    let controls = traj
        .controls
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("trajectory has no recorded controls".into()))?;
    let mut out = vec![0.0; traj.batch()];
    for i in 0..traj.n_steps() {
        let dt = traj.times[i + 1] - traj.times[i];
        for (b, row) in controls.index_axis(Axis(0), i).outer_iter().enumerate() {
            out[b] += 0.5 * dt * row.dot(&row);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_kernel_basis_1d;

    fn params() -> OUBridgeParams {
        let g = GridSpec::line(20, -1.0, 1.0).unwrap();
        let e = Arc::new(build_kernel_basis_1d(&g, 0.2, None).unwrap());
        OUBridgeParams::new(e, 1.0, 1.0).unwrap()
    }

    #[test]
    fn chunking_does_not_change_paths() {
        let p = params();
        let grid = p.eigs.grid().clone();
        let x0 = Array2::from_shape_fn((5, p.k()), |(b, j)| (b + j) as f64 * 0.1);
        let key = StreamKey::new(3, &[1]);
        let s = StepScheme::euler(4);
        let a = simulate_terminal(&p, x0.view(), &ZeroControl, &s, &grid, &key, 2).unwrap();
        let b = simulate_terminal(&p, x0.view(), &ZeroControl, &s, &grid, &key, 5).unwrap();
        let c = simulate_spectral(&p, x0.view(), &ZeroControl, &s, &grid, &key).unwrap().terminal();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn nan_control_reports_step() {
        let p = params();
        let grid = p.eigs.grid().clone();
        let x0 = Array2::zeros((1, grid.len()));
        let bad = FnControl(|t: f64, x: &[f64]| vec![if t > 0.4 { f64::NAN } else { 0.0 }; x.len()]);
        let err = simulate(&p, x0.view(), &bad, &StepScheme::euler(5), &grid, &StreamKey::new(0, &[])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 3, .. }), "{err}");
    }
}
