//! Bridge matching: regress the control onto the drift correction of the
//! bridge pinned at a sampled endpoint, with endpoints drawn from a coupling.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{EigenSystem, SpectralField};
use crate::control_net::{ControlNet, NetArch};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::optim::{clip_norm, Adam, Ema};
use crate::ou_bridge::{sample_bridge_path, OUBridgeParams};
use crate::rng::{stream, tag, StreamKey, StreamRng};
use crate::sde::{simulate_terminal, ControlFn, DiffControl, StepScheme};

/// A source of functions, produced directly as spectral coefficients.
#[derive(Debug, Clone)]
pub enum FieldSampler {
    /// Always the same function.
    Dirac(Vec<f64>),
    /// Uniform draws (with replacement) from a fixed set, one row per member.
    Empirical(Array2<f64>),
    /// Independent centred Gaussian coefficients with the given variances.
    Gaussian(Vec<f64>),
}

impl FieldSampler {
    /// Dirac at a grid function on the eigen-system's grid.
    pub fn dirac_grid(eigs: &EigenSystem, values: &[f64]) -> Result<Self> {
        let c = project_rows(eigs, ArrayView2::from_shape((1, values.len()), values).map_err(shape_err)?)?;
        Ok(FieldSampler::Dirac(c.row(0).to_vec()))
    }

    /// Empirical law of grid functions (rows) on the eigen-system's grid.
    pub fn empirical_grid(eigs: &EigenSystem, rows: ArrayView2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidArgument("empirical sampler needs at least one sample".into()));
        }
        Ok(FieldSampler::Empirical(project_rows(eigs, rows)?))
    }

    /// Stationary law `N(0, sigma^2 lam_k / (2 a_k))` of the uncontrolled process.
    pub fn stationary(p: &OUBridgeParams) -> Self {
        FieldSampler::Gaussian((0..p.k()).map(|k| p.coord(k).stationary_var()).collect())
    }

    pub fn dim(&self) -> usize {
        match self {
            FieldSampler::Dirac(c) => c.len(),
            FieldSampler::Empirical(m) => m.ncols(),
            FieldSampler::Gaussian(v) => v.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            FieldSampler::Dirac(c) => c.clone(),
            FieldSampler::Empirical(m) => m.row(rng.random_range(0..m.nrows())).to_vec(),
            FieldSampler::Gaussian(v) => v.iter().map(|s| s.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::Shape(e.to_string())
}

fn project_rows(eigs: &EigenSystem, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    if rows.ncols() != eigs.grid().len() {
        return Err(Error::GridMismatch(format!(
            "fields have {} values, basis grid has {} points",
            rows.ncols(),
            eigs.grid().len()
        )));
    }
    Ok(eigs.transform().analysis(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    IndependentProduct,
    Paired,
}

/// Joint law of the endpoints `(x0, xT)`.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub initial: FieldSampler,
    pub terminal: FieldSampler,
}

impl Coupling {
    pub fn independent(initial: FieldSampler, terminal: FieldSampler) -> Result<Self> {
        if initial.dim() != terminal.dim() {
            return Err(Error::Shape("endpoint samplers have different dimensions".into()));
        }
        Ok(Coupling { kind: CouplingKind::IndependentProduct, initial, terminal })
    }

    /// Rows of `x0` and `xT` are drawn together with the same index.
    pub fn paired(x0: Array2<f64>, xt: Array2<f64>) -> Result<Self> {
        if x0.dim() != xt.dim() || x0.nrows() == 0 {
            return Err(Error::Shape("paired coupling needs equally shaped, non-empty sets".into()));
        }
        Ok(Coupling { kind: CouplingKind::Paired, initial: FieldSampler::Empirical(x0), terminal: FieldSampler::Empirical(xt) })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        match (self.kind, &self.initial, &self.terminal) {
            (CouplingKind::Paired, FieldSampler::Empirical(a), FieldSampler::Empirical(b)) => {
                let i = rng.random_range(0..a.nrows());
                (a.row(i).to_vec(), b.row(i).to_vec())
            }
            _ => (self.initial.sample(rng), self.terminal.sample(rng)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BMConfig {
    pub batch_size: usize,
    pub n_iters: usize,
    pub lr: f64,
    pub ema_rate: f64,
    pub scheme: StepScheme,
    pub seed: u64,
    /// Times are drawn from `U(0, T - eps_frac * T)`.
    #[serde(default = "default_eps_frac")]
    pub eps_frac: f64,
    /// Regression targets are rescaled to at most this norm.
    #[serde(default = "default_target_clamp")]
    pub target_clamp: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Draw `x_t` by sequential path sampling instead of the closed-form marginal.
    #[serde(default)]
    pub simulate_paths: bool,
}

fn default_eps_frac() -> f64 {
    1e-3
}

fn default_target_clamp() -> f64 {
    1e4
}

impl BMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_iters == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("batch_size, n_iters and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::InvalidArgument(format!("ema_rate {} outside [0, 1)", self.ema_rate)));
        }
        if !(self.eps_frac > 0.0 && self.eps_frac < 1.0) {
            return Err(Error::InvalidArgument("eps_frac must lie in (0, 1)".into()));
        }
        self.scheme.validate()
    }
}

/// Control whose effect `sigma sqrt(lam_k) alpha_k` equals the bridge drift
/// correction toward `x_T`: `alpha_k = a/sinh(a tau) / (sigma sqrt(lam_k)) (x_T,k - e^{-a tau} x_k)`.
pub fn regression_target(p: &OUBridgeParams, t: f64, x_t: &[f64], x_end: &[f64]) -> Result<Vec<f64>> {
    if !(t < p.horizon) || t < 0.0 {
        return Err(Error::TimeOutOfRange { t, range: format!("[0, {})", p.horizon) });
    }
    if !(p.sigma > 0.0) {
        return Err(Error::InvalidArgument("regression target needs sigma > 0".into()));
    }
    let tau = p.horizon - t;
    Ok((0..p.k())
        .map(|k| {
            let c = p.coord(k);
            c.pull_coeff(tau) / (p.sigma * c.lam.sqrt()) * (x_end[k] - (-c.a * tau).exp() * x_t[k])
        })
        .collect())
}

/// Training state: parameters, optimizer moments, EMA and iteration counter.
#[derive(Debug, Clone)]
pub struct BMState {
    pub net: ControlNet,
    pub adam: Adam,
    pub ema: Ema,
    pub iter: usize,
}

impl BMState {
    pub fn new(net: ControlNet, cfg: &BMConfig) -> Self {
        let adam = Adam::new(net.n_params(), cfg.lr);
        let ema = Ema::new(&net.theta, cfg.ema_rate);
        BMState { net, adam, ema, iter: 0 }
    }

    /// Copy of the network carrying the EMA weights.
    pub fn ema_net(&self) -> ControlNet {
        let mut n = self.net.clone();
        n.theta = self.ema.shadow.clone();
        n
    }
}

/// One regression batch in spectral coordinates.
pub struct BMBatch {
    pub t: Vec<f64>,
    /// batch x K
    pub x_t: Array2<f64>,
    /// batch x K, clamped
    pub target: Array2<f64>,
}

/// Draw endpoints, times and bridge states for one batch.
pub fn sample_batch(p: &OUBridgeParams, cfg: &BMConfig, coupling: &Coupling, rng: &mut StreamRng) -> Result<BMBatch> {
    let k = p.k();
    let nb = cfg.batch_size;
    let t_max = p.horizon * (1.0 - cfg.eps_frac);
    let mut t = Vec::with_capacity(nb);
    let mut x_t = Array2::zeros((nb, k));
    let mut target = Array2::zeros((nb, k));
    for b in 0..nb {
        let (x0, x_end) = coupling.sample(rng);
        let tb = t_max * rng.random::<f64>();
        let xs = if cfg.simulate_paths {
            let e = p.eigs.clone();
            let traj = sample_bridge_path(
                p,
                &SpectralField::new(e.clone(), x0)?,
                &SpectralField::new(e, x_end.clone())?,
                &[0.0, tb.max(f64::MIN_POSITIVE), p.horizon],
                rng,
            )?;
            traj.state(1, 0).coeffs
        } else {
            p.sample_bridge_marginal(tb, &x0, &x_end, rng)?
        };
        let mut tg = regression_target(p, tb, &xs, &x_end)?;
        let norm = tg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cfg.target_clamp {
            tg.iter_mut().for_each(|v| *v *= cfg.target_clamp / norm);
        }
        t.push(tb);
        x_t.row_mut(b).assign(&ndarray::ArrayView1::from(&xs[..]));
        target.row_mut(b).assign(&ndarray::ArrayView1::from(&tg[..]));
    }
    Ok(BMBatch { t, x_t, target })
}

/// `1/2 |target - alpha|^2` under the grid quadrature, averaged over the batch,
/// and its parameter gradient.
pub fn bm_loss(
    p: &OUBridgeParams,
    control: &dyn DiffControl,
    batch: &BMBatch,
    grid: &GridSpec,
) -> Result<(f64, Vec<f64>)> {
    let tr = p.eigs.transform_for(grid, false)?;
    let nb = batch.t.len() as f64;
    let x_grid = tr.expand(batch.x_t.view());
    let target_grid = tr.expand(batch.target.view());
    let w = tr.weight();
    let mut loss = 0.0;
    let (_, g, _) = control.eval_vjp(&batch.t, x_grid.view(), grid, &mut |alpha| {
        let resid = alpha - &target_grid;
        loss = 0.5 * w * resid.iter().map(|r| r * r).sum::<f64>() / nb;
        resid * (w / nb)
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: 0, what: "bridge matching loss".into() });
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step; the batch is drawn from the stream of `(seed, iter)`.
pub fn bm_step(state: &mut BMState, p: &OUBridgeParams, cfg: &BMConfig, coupling: &Coupling) -> Result<LogEntry> {
    let mut rng = stream(cfg.seed, &[tag::BM_ITER, state.iter as u64]);
    let batch = sample_batch(p, cfg, coupling, &mut rng)?;
    let grid = p.eigs.grid().clone();
    let (loss, mut g) = bm_loss(p, &state.net, &batch, &grid).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { step: state.iter, what },
        e => e,
    })?;
    let grad_norm = clip_norm(&mut g, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { step: state.iter, what: "gradient".into() });
    }
    state.adam.step(&mut state.net.theta, &g);
    state.ema.update(&state.net.theta);
    let entry = LogEntry { iter: state.iter, loss, grad_norm };
    state.iter += 1;
    state.net.train_step = state.iter as u64;
    Ok(entry)
}

/// Run `cfg.n_iters` steps. `on_step` receives every log entry with the
/// elapsed wall time in milliseconds; returning an error aborts training.
pub fn bm_train(
    cfg: &BMConfig,
    coupling: &Coupling,
    p: &OUBridgeParams,
    arch: NetArch,
    mut on_step: impl FnMut(&LogEntry, f64, &BMState) -> Result<()>,
) -> Result<(BMState, Vec<LogEntry>)> {
    cfg.validate()?;
    if coupling.initial.dim() != p.k() {
        return Err(Error::Shape(format!("coupling has {} modes, process has {}", coupling.initial.dim(), p.k())));
    }
    let net = ControlNet::init(arch, cfg.seed)?;
    let mut state = BMState::new(net, cfg);
    let mut log = Vec::with_capacity(cfg.n_iters);
    let start = Instant::now();
    for _ in 0..cfg.n_iters {
        let e = bm_step(&mut state, p, cfg, coupling)?;
        on_step(&e, start.elapsed().as_secs_f64() * 1e3, &state)?;
        log.push(e);
    }
    state.net.train_step = state.iter as u64;
    Ok((state, log))
}

/// Terminal spectral states of the controlled SDE from initial spectral states.
pub fn bm_sample(
    p: &OUBridgeParams,
    control: &dyn ControlFn,
    x0_spec: ArrayView2<f64>,
    scheme: &StepScheme,
    grid: &GridSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    simulate_terminal(p, x0_spec, control, scheme, grid, &StreamKey::new(seed, &[tag::PATH]), 64)
}

/// Initial states for sampling: `n` draws of the coupling's first marginal.
pub fn initial_draws(coupling: &Coupling, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[tag::EVAL, 0]);
    let k = coupling.initial.dim();
    let mut out = Array2::zeros((n, k));
    for mut row in out.axis_iter_mut(Axis(0)) {
        row.assign(&ndarray::ArrayView1::from(&coupling.initial.sample(&mut rng)[..]));
    }
    out
}
