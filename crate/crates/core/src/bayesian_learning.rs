//! Posterior sampling by stochastic optimal control: train a control so that
//! the terminal state of the controlled SDE, started from a fixed function,
//! is distributed as `exp(-U) d(prior)`.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::control_net::{ControlNet, NetArch};
use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::optim::{clip_norm, Adam, Ema};
use crate::ou_bridge::OUBridgeParams;
use crate::rng::{tag, StreamKey};
use crate::sde::{control_energy, replay_gradient, simulate, simulate_terminal, ControlFn, DiffControl, RunningCost, StepScheme, Trajectory};

/// Gaussian negative log-likelihood of point observations of the terminal field.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyFunctional {
    pub grid: GridSpec,
    /// Grid indices of the observed points.
    pub observed: Vec<usize>,
    pub values: Vec<f64>,
    /// Grid indices where the posterior is read out.
    pub targets: Vec<usize>,
    pub sigma_obs: f64,
    /// When set, `U` also carries `n ln sigma_obs` and `sigma_obs` is trained.
    pub learnable_sigma: bool,
}

impl EnergyFunctional {
    /// Points must coincide with grid points.
    pub fn new(
        grid: GridSpec,
        observed: &[(Vec<f64>, f64)],
        targets: &[Vec<f64>],
        sigma_obs: f64,
        learnable_sigma: bool,
    ) -> Result<Self> {
        if observed.is_empty() {
            return Err(Error::InvalidArgument("no observed points".into()));
        }
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_obs must be positive, got {sigma_obs}")));
        }
        let locate = |p: &[f64]| {
            grid.index_of(p).ok_or_else(|| Error::InvalidArgument(format!("point {p:?} is not a grid point")))
        };
        let mut idx = Vec::with_capacity(observed.len());
        let mut values = Vec::with_capacity(observed.len());
        for (p, y) in observed {
            if !y.is_finite() {
                return Err(Error::NonFinite { step: 0, what: format!("observation at {p:?}") });
            }
            idx.push(locate(p)?);
            values.push(*y);
        }
        let targets = targets.iter().map(|p| locate(p)).collect::<Result<Vec<_>>>()?;
        Ok(EnergyFunctional { grid, observed: idx, values, targets, sigma_obs, learnable_sigma })
    }

    /// `U` at grid values `x` (length N).
    pub fn energy(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma_obs * self.sigma_obs;
        let mut u: f64 = self.observed.iter().zip(&self.values).map(|(&i, y)| (x[i] - y).powi(2)).sum::<f64>() / (2.0 * s2);
        if self.learnable_sigma {
            u += self.observed.len() as f64 * self.sigma_obs.ln();
        }
        u
    }

    /// `(dU/dx, dU/d ln sigma_obs)`.
    pub fn energy_grad(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let s2 = self.sigma_obs * self.sigma_obs;
        let mut g = vec![0.0; x.len()];
        let mut sq = 0.0;
        for (&i, y) in self.observed.iter().zip(&self.values) {
            let r = x[i] - y;
            g[i] += r / s2;
            sq += r * r;
        }
        let gs = if self.learnable_sigma { -sq / s2 + self.observed.len() as f64 } else { 0.0 };
        (g, gs)
    }

    pub fn target_values(&self, x: &[f64]) -> Vec<f64> {
        self.targets.iter().map(|&i| x[i]).collect()
    }
}

/// Regression task file: a 1-D grid, observed `[p, y]` pairs, read-out points
/// and the observation noise (`null` for a learnable scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionTask {
    pub grid: GridSpec,
    pub observed: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    pub sigma_obs: Option<f64>,
}

impl RegressionTask {
    /// Initial scale used when `sigma_obs` is learnable.
    pub const LEARNABLE_SIGMA_INIT: f64 = 0.5;

    pub fn energy(&self) -> Result<EnergyFunctional> {
        self.grid.validate()?;
        if self.grid.dims() != 1 {
            return Err(Error::InvalidArgument("regression tasks live on 1-D grids".into()));
        }
        let obs: Vec<(Vec<f64>, f64)> = self.observed.iter().map(|[p, y]| (vec![*p], *y)).collect();
        let tgt: Vec<Vec<f64>> = self.targets.iter().map(|p| vec![*p]).collect();
        match self.sigma_obs {
            Some(s) => EnergyFunctional::new(self.grid.clone(), &obs, &tgt, s, false),
            None => EnergyFunctional::new(self.grid.clone(), &obs, &tgt, Self::LEARNABLE_SIGMA_INIT, true),
        }
    }
}

fn check_grid(f: &GridField, grid: &GridSpec, what: &str) -> Result<()> {
    if &f.grid != grid {
        return Err(Error::GridMismatch(format!("{what} lives on {:?}, expected {:?}", f.grid.res, grid.res)));
    }
    Ok(())
}

/// `-log dpi_T/dmu_T (x_T)` up to a constant.
///
/// `prior_x0` is the initial condition defining the prior mean
/// `e^{-TA} prior_x0`; `None` ties it to `x0`, in which case the two
/// density terms cancel and only `U` is evaluated.
pub fn terminal_cost(
    x_t: &GridField,
    energy: &EnergyFunctional,
    p: &OUBridgeParams,
    x0: &GridField,
    prior_x0: Option<&GridField>,
) -> Result<f64> {
    check_grid(x_t, &energy.grid, "terminal state")?;
    check_grid(x0, &energy.grid, "initial condition")?;
    let u = energy.energy(&x_t.values);
    let Some(prior) = prior_x0 else { return Ok(u) };
    check_grid(prior, &energy.grid, "prior initial condition")?;
    let tr = p.eigs.transform_for(&energy.grid, false)?;
    let spec = |f: &GridField| tr.analysis(ArrayView2::from_shape((1, f.values.len()), &f.values[..]).unwrap());
    let (xs, ms, x0s) = (spec(x_t), spec(prior), spec(x0));
    let mut c = u;
    for k in 0..p.k() {
        c += p.log_rn_density(k, p.horizon, ms[[0, k]], xs[[0, k]])?;
        c -= p.log_rn_density(k, p.horizon, x0s[[0, k]], xs[[0, k]])?;
    }
    Ok(c)
}

/// Per-batch gradients of the Bayesian loss.
#[derive(Debug, Clone)]
pub struct BayesGradient {
    pub theta: Vec<f64>,
    /// With respect to the shared initial grid values.
    pub x0: Vec<f64>,
    pub log_sigma: f64,
}

/// Batch mean of `sum_i 1/2 |alpha_i|^2 dt_i + terminal cost`, with the pathwise
/// gradient through the recorded noises. All paths of `traj` must start from
/// `x0`; `prior_x0` is as in [`terminal_cost`].
pub fn bayes_loss(
    traj: &Trajectory,
    control: &dyn DiffControl,
    energy: &EnergyFunctional,
    p: &OUBridgeParams,
    scheme: &StepScheme,
    prior_x0: Option<&GridField>,
) -> Result<(f64, BayesGradient)> {
    let grid = &energy.grid;
    let tr = p.eigs.transform_for(grid, false)?;
    let nb = traj.batch();
    let running = control_energy(traj)?;
    let term_spec = traj.terminal();
    let term_grid = tr.expand(term_spec.view());

    let prior_spec = match prior_x0 {
        Some(f) => {
            check_grid(f, grid, "prior initial condition")?;
            Some(tr.analysis(ArrayView2::from_shape((1, f.values.len()), &f.values[..]).unwrap()))
        }
        None => None,
    };
    let x0_spec = traj.states.index_axis(Axis(0), 0);

    let mut total = 0.0;
    let mut tgrad = Array2::<f64>::zeros((nb, p.k()));
    let mut gx0_rn = Array2::<f64>::zeros((nb, p.k()));
    let mut g_log_sigma = 0.0;
    for b in 0..nb {
        let xg = term_grid.row(b);
        let xv = xg.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| xg.to_vec());
        let mut cost = energy.energy(&xv);
        let (gu, gs) = energy.energy_grad(&xv);
        g_log_sigma += gs;
        let gspec = tr.project(ArrayView2::from_shape((1, gu.len()), &gu[..]).unwrap());
        tgrad.row_mut(b).assign(&gspec.row(0));
        if let Some(ms) = &prior_spec {
            for k in 0..p.k() {
                let (x, m, x0) = (term_spec[[b, k]], ms[[0, k]], x0_spec[[b, k]]);
                cost += p.log_rn_density(k, p.horizon, m, x)? - p.log_rn_density(k, p.horizon, x0, x)?;
                let c = p.coord(k);
                tgrad[[b, k]] += c.log_rn_density_grad_y(p.horizon, m, x)? - c.log_rn_density_grad_y(p.horizon, x0, x)?;
                gx0_rn[[b, k]] -= c.log_rn_density_grad_x(p.horizon, x0, x)?;
            }
        }
        total += running[b] + cost;
    }
    let rg = replay_gradient(traj, p, control, scheme, grid, tgrad.view(), RunningCost::ControlEnergy)?;
    let inv = 1.0 / nb as f64;
    let mut gx0 = rg.x0_grid.sum_axis(Axis(0));
    if prior_spec.is_some() {
        let mut extra = tr.expand(gx0_rn.view());
        extra *= tr.weight();
        gx0 += &extra.sum_axis(Axis(0));
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: traj.n_steps(), what: "Bayesian loss".into() });
    }
    Ok((
        loss,
        BayesGradient {
            theta: rg.theta.iter().map(|v| v * inv).collect(),
            x0: (gx0 * inv).to_vec(),
            log_sigma: g_log_sigma * inv,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine annealing from `lr` to zero over `n_iters`.
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesConfig {
    /// Simulated paths per step.
    pub batch_size: usize,
    pub n_iters: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub ema_rate: f64,
    pub scheme: StepScheme,
    /// Train the initial condition (and with it the tied prior mean).
    #[serde(default)]
    pub learnable_x0: bool,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl BayesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_iters == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("batch_size, n_iters and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::InvalidArgument(format!("ema_rate {} outside [0, 1)", self.ema_rate)));
        }
        self.scheme.validate()
    }

    fn lr_at(&self, iter: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * iter as f64 / self.n_iters as f64).cos())
            }
        }
    }
}

/// Trainable quantities plus optimizer state. The optimizer sees the
/// concatenation `theta ++ x0 (if learnable) ++ ln sigma_obs (if learnable)`.
#[derive(Debug, Clone)]
pub struct BayesState {
    pub net: ControlNet,
    pub x0: GridField,
    pub sigma_obs: f64,
    pub adam: Adam,
    pub ema: Ema,
    pub iter: usize,
    learn_x0: bool,
    learn_sigma: bool,
}

impl BayesState {
    pub fn new(net: ControlNet, x0: GridField, energy: &EnergyFunctional, cfg: &BayesConfig) -> Self {
        let learn_x0 = cfg.learnable_x0;
        let learn_sigma = energy.learnable_sigma;
        let mut s = BayesState {
            net,
            x0,
            sigma_obs: energy.sigma_obs,
            adam: Adam::new(0, cfg.lr),
            ema: Ema::new(&[], cfg.ema_rate),
            iter: 0,
            learn_x0,
            learn_sigma,
        };
        let flat = s.flat();
        s.adam = Adam::new(flat.len(), cfg.lr);
        s.ema = Ema::new(&flat, cfg.ema_rate);
        s
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.net.theta.clone();
        if self.learn_x0 {
            v.extend_from_slice(&self.x0.values);
        }
        if self.learn_sigma {
            v.push(self.sigma_obs.ln());
        }
        v
    }

    fn unflatten(&self, v: &[f64]) -> (Vec<f64>, Option<Vec<f64>>, Option<f64>) {
        let n = self.net.theta.len();
        let mut off = n;
        let x0 = self.learn_x0.then(|| {
            off += self.x0.values.len();
            v[n..off].to_vec()
        });
        let ls = self.learn_sigma.then(|| v[off].exp());
        (v[..n].to_vec(), x0, ls)
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (theta, x0, s) = self.unflatten(v);
        self.net.theta = theta;
        if let Some(x0) = x0 {
            self.x0.values = x0;
        }
        if let Some(s) = s {
            self.sigma_obs = s;
        }
    }

    /// Network, initial condition and noise scale carrying the EMA weights.
    pub fn ema_params(&self) -> (ControlNet, GridField, f64) {
        let mut s = self.clone();
        s.set_flat(&self.ema.shadow);
        (s.net, s.x0, s.sigma_obs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BayesLogEntry {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub sigma_obs: f64,
}

/// One step of simulate, differentiate, update. Path noise comes from the
/// stream of `(seed, iter)`.
pub fn bayes_step(
    state: &mut BayesState,
    energy: &EnergyFunctional,
    p: &OUBridgeParams,
    cfg: &BayesConfig,
) -> Result<BayesLogEntry> {
    let mut en = energy.clone();
    en.sigma_obs = state.sigma_obs;
    let n = state.x0.values.len();
    let x0 = Array1::from(state.x0.values.clone());
    let x0b = x0.broadcast((cfg.batch_size, n)).unwrap().to_owned();
    let key = StreamKey::new(cfg.seed, &[tag::BAYES_ITER, state.iter as u64]);
    let step_err = |e: Error| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { step: state.iter, what },
        e => e,
    };
    let traj = simulate(p, x0b.view(), &state.net, &cfg.scheme, &en.grid, &key).map_err(step_err)?;
    let (loss, g) = bayes_loss(&traj, &state.net, &en, p, &cfg.scheme, None).map_err(step_err)?;
    let mut flat_g = g.theta;
    if state.learn_x0 {
        flat_g.extend_from_slice(&g.x0);
    }
    if state.learn_sigma {
        flat_g.push(g.log_sigma);
    }
    let grad_norm = clip_norm(&mut flat_g, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { step: state.iter, what: "gradient".into() });
    }
    let mut flat = state.flat();
    state.adam.lr = cfg.lr_at(state.iter);
    state.adam.step(&mut flat, &flat_g);
    state.set_flat(&flat);
    state.ema.update(&flat);
    let entry = BayesLogEntry { iter: state.iter, loss, grad_norm, sigma_obs: en.sigma_obs };
    state.iter += 1;
    state.net.train_step = state.iter as u64;
    Ok(entry)
}

/// Run `cfg.n_iters` steps from a freshly initialized network and the
/// initial condition `x0`. `on_step` receives each entry with the elapsed
/// wall time in milliseconds.
pub fn bayes_train(
    cfg: &BayesConfig,
    energy: &EnergyFunctional,
    p: &OUBridgeParams,
    arch: NetArch,
    x0: GridField,
    mut on_step: impl FnMut(&BayesLogEntry, f64, &BayesState) -> Result<()>,
) -> Result<(BayesState, Vec<BayesLogEntry>)> {
    cfg.validate()?;
    check_grid(&x0, &energy.grid, "initial condition")?;
    let net = ControlNet::init(arch, cfg.seed)?;
    let mut state = BayesState::new(net, x0, energy, cfg);
    let mut log = Vec::with_capacity(cfg.n_iters);
    let start = Instant::now();
    for _ in 0..cfg.n_iters {
        let e = bayes_step(&mut state, energy, p, cfg)?;
        on_step(&e, start.elapsed().as_secs_f64() * 1e3, &state)?;
        log.push(e);
    }
    Ok((state, log))
}

/// `n` independent terminal states of the controlled SDE started at `x0`.
pub fn posterior_sample(
    control: &dyn ControlFn,
    x0: &GridField,
    p: &OUBridgeParams,
    scheme: &StepScheme,
    n: usize,
    seed: u64,
) -> Result<Vec<GridField>> {
    let tr = p.eigs.transform_for(&x0.grid, false)?;
    let x0s = tr.analysis(ArrayView2::from_shape((1, x0.values.len()), &x0.values[..]).unwrap());
    let x0b = x0s.broadcast((n, p.k())).unwrap().to_owned();
    let key = StreamKey::new(seed, &[tag::PATH]);
    let term = simulate_terminal(p, x0b.view(), control, scheme, &x0.grid, &key, 64)?;
    let grid_vals = tr.expand(term.view());
    grid_vals
        .outer_iter()
        .map(|r| GridField::new(x0.grid.clone(), r.to_vec()))
        .collect()
}
