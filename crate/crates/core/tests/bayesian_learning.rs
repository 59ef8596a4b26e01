use std::sync::Arc;

use fnbridge::basis::build_kernel_basis_1d;
use fnbridge::bayesian_learning::*;
use fnbridge::control_net::{ControlNet, NetArch};
use fnbridge::grid::{GridField, GridSpec};
use fnbridge::ou_bridge::OUBridgeParams;
use fnbridge::rng::{stream, StreamKey};
use fnbridge::sde::{simulate, FnControl, StepScheme, ZeroControl};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, Normal};

fn setup(res: usize) -> (GridSpec, OUBridgeParams) {
    let grid = GridSpec::line(res, -2.0, 2.0).unwrap();
    let eigs = Arc::new(build_kernel_basis_1d(&grid, 0.5, None).unwrap());
    let p = OUBridgeParams::new(eigs, 0.8, 1.0).unwrap();
    (grid, p)
}

fn energy(grid: &GridSpec, sigma: f64, learnable: bool) -> EnergyFunctional {
    let pts = grid.axis_points(0);
    let obs = vec![(vec![pts[1]], 0.3), (vec![pts[4]], -0.2), (vec![pts[7]], 0.5)];
    EnergyFunctional::new(grid.clone(), &obs, &[vec![pts[2]], vec![pts[5]]], sigma, learnable).unwrap()
}

fn in_span(p: &OUBridgeParams, seed: u64) -> GridField {
    let mut rng = stream(seed, &[1]);
    let c = Array2::from_shape_fn((1, p.k()), |_| rng.sample::<f64, _>(StandardNormal) * 0.5);
    let g = p.eigs.transform().expand(c.view());
    GridField::new(p.eigs.grid().clone(), g.row(0).to_vec()).unwrap()
}

fn small_arch() -> NetArch {
    NetArch {
        dims: 1,
        n_layers: 1,
        width: 4,
        mlp_width: 6,
        n_spectral_modes: 3,
        fourier_features_m: 2,
        fourier_scale: 1.0,
        time_embed_dim: 4,
        time_hidden: 6,
        horizon: 1.0,
    }
}

#[test]
fn tied_prior_leaves_only_the_likelihood() {
    let (grid, p) = setup(12);
    let e = energy(&grid, 0.4, false);
    let x = in_span(&p, 2);
    let x0 = in_span(&p, 3);
    let by_hand: f64 = e.observed.iter().zip(&e.values).map(|(&i, y)| (x.values[i] - y).powi(2) / (2.0 * 0.16)).sum();
    let c = terminal_cost(&x, &e, &p, &x0, None).unwrap();
    assert!((c - by_hand).abs() < 1e-12 * by_hand.max(1.0));

    // independent of the process parameters
    let p2 = OUBridgeParams::new(p.eigs.clone(), 3.0, 0.2).unwrap();
    assert_eq!(terminal_cost(&x, &e, &p2, &x0, None).unwrap(), c);
}

#[test]
fn interpolant_has_zero_cost() {
    let (grid, p) = setup(12);
    let e = energy(&grid, 0.1, false);
    let mut v = vec![0.0; 12];
    for (&i, y) in e.observed.iter().zip(&e.values) {
        v[i] = *y;
    }
    let x = GridField::new(grid.clone(), v).unwrap();
    assert_eq!(terminal_cost(&x, &e, &p, &GridField::zeros(grid), None).unwrap(), 0.0);
}

#[test]
fn distinct_prior_adds_gaussian_log_density_ratio() {
    let (grid, p) = setup(12);
    let e = energy(&grid, 0.4, false);
    let x = in_span(&p, 4);
    let x0 = in_span(&p, 5);
    let m = in_span(&p, 6);
    let spec = |f: &GridField| p.eigs.transform().analysis(ArrayView2::from_shape((1, 12), &f.values[..]).unwrap());
    let (xs, x0s, ms) = (spec(&x), spec(&x0), spec(&m));
    let mut expect = e.energy(&x.values);
    for k in 0..p.k() {
        let (a, lam) = (p.eigs.a()[k], p.eigs.lam()[k]);
        let decay = (-a * p.horizon).exp();
        let var = p.sigma * p.sigma * lam * (1.0 - (-2.0 * a * p.horizon).exp()) / (2.0 * a);
        let prior = Normal::new(decay * ms[[0, k]], var.sqrt()).unwrap();
        let base = Normal::new(decay * x0s[[0, k]], var.sqrt()).unwrap();
        expect += prior.ln_pdf(xs[[0, k]]) - base.ln_pdf(xs[[0, k]]);
    }
    let c = terminal_cost(&x, &e, &p, &x0, Some(&m)).unwrap();
    assert!((c - expect).abs() < 1e-8 * expect.abs().max(1.0), "{c} vs {expect}");
}

#[test]
fn grid_mismatch_rejected() {
    let (grid, p) = setup(12);
    let e = energy(&grid, 0.4, false);
    let other = GridField::zeros(GridSpec::line(10, -2.0, 2.0).unwrap());
    assert!(terminal_cost(&other, &e, &p, &GridField::zeros(grid), None).is_err());
}

#[test]
fn off_grid_observation_rejected() {
    let grid = GridSpec::line(12, -2.0, 2.0).unwrap();
    let r = EnergyFunctional::new(grid, &[(vec![0.0123], 1.0)], &[], 0.1, false);
    assert!(r.is_err());
}

#[test]
fn zero_control_loss_is_mean_terminal_cost() {
    let (grid, p) = setup(12);
    let e = energy(&grid, 0.3, false);
    let x0 = Array2::zeros((8, 12));
    let scheme = StepScheme::exponential(5);
    let traj = simulate(&p, x0.view(), &ZeroControl, &scheme, &grid, &StreamKey::new(1, &[1])).unwrap();
    let (loss, _) = bayes_loss(&traj, &ZeroControl, &e, &p, &scheme, None).unwrap();
    let term = p.eigs.transform().expand(traj.terminal().view());
    let mean: f64 = term.outer_iter().map(|r| e.energy(&r.to_vec())).sum::<f64>() / 8.0;
    assert!((loss - mean).abs() < 1e-12 * mean.max(1.0));
}

#[test]
fn constant_control_running_cost_is_exact() {
    let (grid, p) = setup(12);
    let mut rng = stream(8, &[2]);
    let c = Array2::from_shape_fn((1, p.k()), |_| rng.sample::<f64, _>(StandardNormal));
    let cg = p.eigs.transform().expand(c.view()).row(0).to_vec();
    let control = FnControl(move |_t: f64, _x: &[f64]| cg.clone());
    let scheme = StepScheme::euler(7);
    let traj = simulate(&p, Array2::zeros((4, 12)).view(), &control, &scheme, &grid, &StreamKey::new(2, &[1])).unwrap();
    let running = fnbridge::sde::control_energy(&traj).unwrap();
    let expect = 0.5 * p.horizon * c.iter().map(|v| v * v).sum::<f64>();
    for r in running {
        assert!((r - expect).abs() < 1e-10 * expect);
    }
}

fn fd_check(learn_sigma: bool, prior: bool) {
    let (grid, p) = setup(10);
    let e0 = energy(&grid, 0.5, learn_sigma);
    let scheme = StepScheme::euler(3);
    let key = StreamKey::new(4, &[9]);
    let mut net = ControlNet::init(small_arch(), 3).unwrap();
    net.randomize(2, 0.3);
    let x0 = in_span(&p, 11);
    let prior_x0 = prior.then(|| in_span(&p, 12));
    let nb = 3;

    let loss_at = |net: &ControlNet, x0: &[f64], sigma: f64| {
        let mut e = e0.clone();
        e.sigma_obs = sigma;
        let x0b = Array1::from(x0.to_vec()).broadcast((nb, 10)).unwrap().to_owned();
        let traj = simulate(&p, x0b.view(), net, &scheme, &grid, &key).unwrap();
        bayes_loss(&traj, net, &e, &p, &scheme, prior_x0.as_ref()).unwrap()
    };
    let (_, g) = loss_at(&net, &x0.values, 0.5);
    let h = 1e-6;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);

    let mut rng = stream(5, &[3]);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let d: Vec<f64> = (0..net.n_params()).map(|_| rng.sample(StandardNormal)).collect();
        let an: f64 = g.theta.iter().zip(&d).map(|(a, b)| a * b).sum();
        let base = net.theta.clone();
        net.theta = base.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let up = loss_at(&net, &x0.values, 0.5).0;
        net.theta = base.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let dn = loss_at(&net, &x0.values, 0.5).0;
        net.theta = base;
        worst = worst.max(rel((up - dn) / (2.0 * h), an));
    }
    for _ in 0..5 {
        let d: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let an: f64 = g.x0.iter().zip(&d).map(|(a, b)| a * b).sum();
        let up: Vec<f64> = x0.values.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let dn: Vec<f64> = x0.values.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let fd = (loss_at(&net, &up, 0.5).0 - loss_at(&net, &dn, 0.5).0) / (2.0 * h);
        worst = worst.max(rel(fd, an));
    }
    if learn_sigma {
        let fd = (loss_at(&net, &x0.values, 0.5 * h.exp()).0 - loss_at(&net, &x0.values, 0.5 * (-h).exp()).0) / (2.0 * h);
        worst = worst.max(rel(fd, g.log_sigma));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_match_finite_differences() {
    fd_check(false, false);
}

#[test]
fn gradients_with_learnable_noise_and_separate_prior() {
    fd_check(true, true);
}

/// Without an informative likelihood the zero control is stationary: a freshly
/// initialized network (zero output layer) gets no gradient.
#[test]
fn uninformative_likelihood_makes_zero_control_stationary() {
    let (grid, p) = setup(10);
    let scheme = StepScheme::exponential(4);
    let net = ControlNet::init(small_arch(), 1).unwrap();
    let traj = simulate(&p, Array2::zeros((6, 10)).view(), &net, &scheme, &grid, &StreamKey::new(3, &[1])).unwrap();
    let informative = bayes_loss(&traj, &net, &energy(&grid, 0.3, false), &p, &scheme, None).unwrap().1;
    let flat = bayes_loss(&traj, &net, &energy(&grid, 1e8, false), &p, &scheme, None).unwrap().1;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm(&informative.theta) > 1e-3);
    assert!(norm(&flat.theta) < 1e-12, "{}", norm(&flat.theta));

    let trained = posterior_sample(&net, &GridField::zeros(grid.clone()), &p, &scheme, 16, 3).unwrap();
    let free = posterior_sample(&ZeroControl, &GridField::zeros(grid), &p, &scheme, 16, 3).unwrap();
    assert_eq!(trained, free);
}

#[test]
fn training_and_sampling_are_reproducible() {
    let (grid, p) = setup(10);
    let e = energy(&grid, 0.2, true);
    let cfg = BayesConfig {
        batch_size: 3,
        n_iters: 5,
        lr: 1e-2,
        lr_schedule: LrSchedule::Cosine,
        ema_rate: 0.9,
        scheme: StepScheme::euler(4),
        learnable_x0: true,
        seed: 7,
        grad_clip: Some(10.0),
    };
    let run = || {
        let (s, log) = bayes_train(&cfg, &e, &p, small_arch(), GridField::zeros(grid.clone()), |_, _, _| Ok(())).unwrap();
        let (net, x0, _) = s.ema_params();
        (log, posterior_sample(&net, &x0, &p, &cfg.scheme, 5, 2).unwrap(), s.sigma_obs, s.x0)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
    assert!(a.2 != 0.2, "noise scale should have moved");
    assert!(a.3.values.iter().any(|v| *v != 0.0), "initial condition should have moved");
}

#[test]
fn regression_task_file_roundtrip() {
    let s = r#"{"grid": {"res": [8], "bounds": [[-2.0, 2.0]]}, "observed": [[-1.75, 0.1], [0.25, -0.3]], "targets": [1.25], "sigma_obs": null}"#;
    let task: RegressionTask = serde_json::from_str(s).unwrap();
    let e = task.energy().unwrap();
    assert_eq!(e.observed, vec![0, 4]);
    assert_eq!(e.targets, vec![6]);
    assert!(e.learnable_sigma);
    let bad = s.replace("\"targets\"", "\"extra\": 1, \"targets\"");
    assert!(serde_json::from_str::<RegressionTask>(&bad).is_err());
}
