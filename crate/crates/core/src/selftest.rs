//! Quick oracle checks run by the `selftest` command.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::basis::build_kernel_basis_1d;
use crate::bayesian_learning::{bayes_loss, EnergyFunctional};
use crate::bridge_matching::{bm_loss, sample_batch, BMConfig, Coupling, FieldSampler};
use crate::control_net::{ControlNet, NetArch};
use crate::error::Result;
use crate::grid::GridSpec;
use crate::ou_bridge::{OUBridgeParams, OuCoord};
use crate::rng::{stream, StreamKey};
use crate::sde::{control_energy, replay_gradient, simulate, simulate_terminal, RunningCost, StepScheme, ZeroControl};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error and its tolerance.
    pub detail: String,
}

fn check(name: &'static str, err: f64, tol: f64) -> Check {
    Check { name, passed: err <= tol, detail: format!("{err:.3e} (tol {tol:.0e})") }
}

fn random_coord<R: Rng>(rng: &mut R) -> (OuCoord, f64) {
    let c = OuCoord::new(rng.random_range(0.1..3.0), rng.random_range(0.1..2.0), rng.random_range(0.3..2.0));
    (c, rng.random_range(0.5..2.0))
}

/// Bridge drift against `-a x + sigma^2 lam d/dx log q`, the derivative taken
/// by central differences of the log density.
fn drift_identity() -> Result<Check> {
    let mut rng = stream(1, &[1]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (c, horizon) = random_coord(&mut rng);
        let t = rng.random_range(0.0..0.9) * horizon;
        let (x, y) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let tau = horizon - t;
        let h = 1e-5;
        let dq = (c.log_rn_density(tau, x + h, y)? - c.log_rn_density(tau, x - h, y)?) / (2.0 * h);
        let expect = -c.a * x + c.sigma * c.sigma * c.lam * dq;
        let got = c.bridge_drift(tau, x, y)?;
        worst = worst.max((got - expect).abs() / expect.abs().max(1e-3));
    }
    Ok(check("drift = -a x + sigma^2 lam score", worst, 1e-6))
}

/// `int q_t dN(0, s_inf) = 1` by the trapezoid rule over +-12 standard deviations.
fn density_normalization() -> Result<Check> {
    let mut rng = stream(1, &[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (c, _) = random_coord(&mut rng);
        let t = rng.random_range(0.05..2.0);
        let x = rng.random_range(-2.0..2.0);
        let g = c.transition(t);
        let (lo, hi) = (g.mean - 12.0 * g.var.sqrt(), g.mean + 12.0 * g.var.sqrt());
        let s_inf = c.stationary_var();
        let n = 4000;
        let dy = (hi - lo) / n as f64;
        let mut sum = 0.0;
        for i in 0..=n {
            let y = lo + i as f64 * dy;
            let ref_pdf = (-y * y / (2.0 * s_inf)).exp() / (2.0 * std::f64::consts::PI * s_inf).sqrt();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            sum += w * c.log_rn_density(t, x, y)?.exp() * ref_pdf * dy;
        }
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(check("RN density integrates to one", worst, 1e-8))
}

fn brownian_limit() -> Result<Check> {
    let c = OuCoord::new(1e-10, 1.0, 1.0);
    let mut worst: f64 = 0.0;
    for (tau, x, y) in [(0.5, 0.3, -1.0), (0.1, 2.0, 1.0), (1.5, -0.7, 0.4)] {
        let expect = (y - x) / tau;
        worst = worst.max((c.bridge_drift(tau, x, y)? - expect).abs() / expect.abs());
    }
    Ok(check("Brownian bridge limit", worst, 1e-6))
}

fn scalar_process(a: f64, sigma: f64) -> Result<OUBridgeParams> {
    let grid = GridSpec::line(8, -1.0, 1.0)?;
    let base = build_kernel_basis_1d(&grid, 0.5, None)?.truncated(1)?;
    let eigs = Arc::new(base.with_spectrum(vec![a], vec![1.0])?);
    OUBridgeParams::new(eigs, sigma, 1.0)
}

/// Exponential-scheme terminal moments against the closed form, as z-scores.
fn transition_moments() -> Result<Check> {
    let p = scalar_process(0.7, 1.2)?;
    let n = 20_000;
    let x0 = Array2::from_elem((n, 1), 1.5);
    let term = simulate_terminal(&p, x0.view(), &ZeroControl, &StepScheme::exponential(5), p.eigs.grid(), &StreamKey::new(1, &[3]), 4096)?;
    let g = p.transition_moments(0, 1.0)?;
    let col = term.column(0);
    let mean = col.mean().unwrap_or(f64::NAN);
    let var = col.var(1.0);
    let zm = (mean - 1.5 * g.mean) / (g.var / n as f64).sqrt();
    let zv = (var - g.var) / (g.var * (2.0 / (n as f64 - 1.0)).sqrt());
    Ok(check("terminal moments (|z|)", zm.abs().max(zv.abs()), 5.0))
}

fn small_net(dims: usize) -> Result<ControlNet> {
    let arch = NetArch {
        dims,
        n_layers: 2,
        width: 4,
        mlp_width: 5,
        n_spectral_modes: 3,
        fourier_features_m: 2,
        fourier_scale: 1.0,
        time_embed_dim: 4,
        time_hidden: 5,
        horizon: 1.0,
    };
    let mut net = ControlNet::init(arch, 3)?;
    net.randomize(4, 0.3);
    Ok(net)
}

fn fd_worst(net: &mut ControlNet, grad: &[f64], h: f64, loss: impl Fn(&ControlNet) -> Result<f64>) -> Result<f64> {
    let mut rng = stream(2, &[1]);
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let i = rng.random_range(0..net.n_params());
        let base = net.theta[i];
        net.theta[i] = base + h;
        let up = loss(net)?;
        net.theta[i] = base - h;
        let dn = loss(net)?;
        net.theta[i] = base;
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    Ok(worst)
}

fn kernel_process() -> Result<OUBridgeParams> {
    let grid = GridSpec::line(10, -1.0, 1.0)?;
    OUBridgeParams::new(Arc::new(build_kernel_basis_1d(&grid, 0.5, None)?), 0.8, 1.0)
}

fn replay_gradient_check() -> Result<Check> {
    let p = kernel_process()?;
    let grid = p.eigs.grid().clone();
    let mut net = small_net(1)?;
    let scheme = StepScheme::euler(3);
    let key = StreamKey::new(5, &[1]);
    let mut rng = stream(3, &[1]);
    let x0 = Array2::from_shape_fn((2, 10), |_| rng.sample::<f64, _>(StandardNormal));
    let gt = Array2::from_shape_fn((2, p.k()), |_| rng.sample::<f64, _>(StandardNormal));
    let loss = |net: &ControlNet| -> Result<f64> {
        let traj = simulate(&p, x0.view(), net, &scheme, &grid, &key)?;
        Ok((&traj.terminal() * &gt).sum() + control_energy(&traj)?.iter().sum::<f64>())
    };
    let traj = simulate(&p, x0.view(), &net, &scheme, &grid, &key)?;
    let g = replay_gradient(&traj, &p, &net, &scheme, &grid, gt.view(), RunningCost::ControlEnergy)?;
    let worst = fd_worst(&mut net, &g.theta, 1e-5, loss)?;
    Ok(check("pathwise gradient vs finite differences", worst, 1e-4))
}

fn bm_gradient_check() -> Result<Check> {
    let p = kernel_process()?;
    let grid = p.eigs.grid().clone();
    let mut net = small_net(1)?;
    let cfg = BMConfig {
        batch_size: 8,
        n_iters: 1,
        lr: 1e-3,
        ema_rate: 0.0,
        scheme: StepScheme::euler(3),
        seed: 1,
        eps_frac: 0.2,
        target_clamp: 1e4,
        grad_clip: None,
        simulate_paths: false,
    };
    let coupling = Coupling::independent(FieldSampler::stationary(&p), FieldSampler::Dirac(vec![0.5; p.k()]))?;
    let batch = sample_batch(&p, &cfg, &coupling, &mut stream(4, &[1]))?;
    let (_, g) = bm_loss(&p, &net, &batch, &grid)?;
    let worst = fd_worst(&mut net, &g, 1e-3, |n| Ok(bm_loss(&p, n, &batch, &grid)?.0))?;
    Ok(check("bridge matching loss gradient", worst, 1e-4))
}

fn bayes_gradient_check() -> Result<Check> {
    let p = kernel_process()?;
    let grid = p.eigs.grid().clone();
    let pts = grid.axis_points(0);
    let energy = EnergyFunctional::new(grid.clone(), &[(vec![pts[2]], 0.4), (vec![pts[7]], -0.3)], &[vec![pts[5]]], 0.3, false)?;
    let mut net = small_net(1)?;
    let scheme = StepScheme::euler(3);
    let key = StreamKey::new(6, &[1]);
    let x0 = Array2::from_elem((3, 10), 0.1);
    let loss = |net: &ControlNet| -> Result<f64> {
        let traj = simulate(&p, x0.view(), net, &scheme, &grid, &key)?;
        Ok(bayes_loss(&traj, net, &energy, &p, &scheme, None)?.0)
    };
    let traj = simulate(&p, x0.view(), &net, &scheme, &grid, &key)?;
    let (_, g) = bayes_loss(&traj, &net, &energy, &p, &scheme, None)?;
    let worst = fd_worst(&mut net, &g.theta, 1e-5, loss)?;
    Ok(check("posterior loss gradient", worst, 1e-4))
}

/// Run every check. An error inside a check is reported as a failure.
pub fn run_all() -> Vec<Check> {
    let suite: [(&'static str, fn() -> Result<Check>); 7] = [
        ("drift = -a x + sigma^2 lam score", drift_identity),
        ("RN density integrates to one", density_normalization),
        ("Brownian bridge limit", brownian_limit),
        ("terminal moments (|z|)", transition_moments),
        ("pathwise gradient vs finite differences", replay_gradient_check),
        ("bridge matching loss gradient", bm_gradient_check),
        ("posterior loss gradient", bayes_gradient_check),
    ];
    suite
        .iter()
        .map(|(name, f)| f().unwrap_or_else(|e| Check { name, passed: false, detail: e.to_string() }))
        .collect()
}
