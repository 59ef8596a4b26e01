use std::sync::Arc;

use fnbridge::basis::{build_cosine_basis, build_kernel_basis_1d};
use fnbridge::bridge_matching::regression_target;
use fnbridge::control_net::{ControlNet, LinearControl, NetArch};
use fnbridge::evaluation::ks_two_sample;
use fnbridge::grid::GridSpec;
use fnbridge::ou_bridge::OUBridgeParams;
use fnbridge::rng::{stream, StreamKey};
use fnbridge::sde::*;
use fnbridge::Error;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn kernel_process(res: usize, sigma: f64) -> (GridSpec, OUBridgeParams) {
    let grid = GridSpec::line(res, -1.0, 1.0).unwrap();
    let eigs = Arc::new(build_kernel_basis_1d(&grid, 0.5, None).unwrap());
    (grid.clone(), OUBridgeParams::new(eigs, sigma, 1.0).unwrap())
}

fn randn(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[42]);
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn uncontrolled_terminal_moments_match_closed_form() {
    let (grid, p) = kernel_process(12, 0.9);
    let n = 10_000;
    let x0s = Array2::from_shape_fn((n, p.k()), |(_, k)| 1.0 / (1.0 + k as f64));
    let term = simulate_terminal(&p, x0s.view(), &ZeroControl, &StepScheme::exponential(10), &grid, &StreamKey::new(1, &[1]), 512).unwrap();
    for k in 0..3 {
        let g = p.transition_moments(k, 1.0).unwrap();
        let col = term.column(k);
        let mean = col.mean().unwrap();
        let var = col.var(0.0);
        let m = g.mean * x0s[[0, k]];
        assert!((mean - m).abs() < 0.02 * m.abs().max(g.var.sqrt()), "mode {k}: {mean} vs {m}");
        assert!(rel(var, g.var) < 0.05, "mode {k}: {var} vs {}", g.var);
    }
}

#[test]
fn noiseless_exponential_scheme_is_exact() {
    let (grid, p) = kernel_process(12, 0.0);
    let x0 = randn((2, 12), 1);
    let traj = simulate(&p, x0.view(), &ZeroControl, &StepScheme::exponential(7), &grid, &StreamKey::new(1, &[1])).unwrap();
    let x0s = traj.states.index_axis(Axis(0), 0);
    let xt = traj.terminal();
    for b in 0..2 {
        for k in 0..p.k() {
            let expect = (-p.eigs.a()[k]).exp() * x0s[[b, k]];
            assert!((xt[[b, k]] - expect).abs() < 1e-13 * expect.abs().max(1.0));
        }
    }
}

#[test]
fn oracle_bridge_control_converges_at_half_order() {
    let (grid, p) = kernel_process(16, 1.0);
    let tr = p.eigs.transform().clone();
    let target: Vec<f64> = (0..p.k()).map(|k| 1.0 / (1.0 + k as f64)).collect();
    let pc = p.clone();
    let tgt = target.clone();
    let oracle = FnControl(move |t: f64, x: &[f64]| {
        let xs = tr.analysis(ndarray::ArrayView2::from_shape((1, x.len()), x).unwrap());
        let a = regression_target(&pc, t, xs.row(0).as_slice().unwrap(), &tgt).unwrap();
        tr.expand(ndarray::ArrayView2::from_shape((1, a.len()), &a).unwrap()).row(0).to_vec()
    });
    let n = 2000;
    let x0 = Array2::zeros((n, 16));
    let mut errs = Vec::new();
    for steps in [16, 64, 256] {
        let term = simulate_terminal(&p, p.eigs.transform().analysis(x0.view()).view(), &oracle, &StepScheme::euler(steps), &grid, &StreamKey::new(2, &[1]), 256).unwrap();
        let mse: f64 = term
            .outer_iter()
            .map(|r| r.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        errs.push(mse.sqrt());
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.5).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn identical_seeds_give_identical_paths() {
    let (grid, p) = kernel_process(10, 0.7);
    let net = ControlNet::init(NetArch { n_layers: 1, width: 4, mlp_width: 4, n_spectral_modes: 3, ..NetArch::default_1d(1.0) }, 1).unwrap();
    let x0 = randn((3, 10), 2);
    let a = simulate(&p, x0.view(), &net, &StepScheme::euler(5), &grid, &StreamKey::new(9, &[3])).unwrap();
    let b = simulate(&p, x0.view(), &net, &StepScheme::euler(5), &grid, &StreamKey::new(9, &[3])).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.noises, b.noises);
    let c = simulate(&p, x0.view(), &net, &StepScheme::euler(5), &grid, &StreamKey::new(10, &[3])).unwrap();
    assert_ne!(a.states, c.states);
}

#[test]
fn exponential_scheme_is_exact_for_any_step_count() {
    let (grid, p) = kernel_process(8, 1.0);
    let n = 10_000;
    let x0 = Array2::from_elem((n, p.k()), 0.5);
    let one = simulate_terminal(&p, x0.view(), &ZeroControl, &StepScheme::exponential(1), &grid, &StreamKey::new(3, &[1]), 1024).unwrap();
    let many = simulate_terminal(&p, x0.view(), &ZeroControl, &StepScheme::exponential(100), &grid, &StreamKey::new(4, &[1]), 1024).unwrap();
    let refined = simulate_terminal(&p, x0.view(), &ZeroControl, &StepScheme::exponential(20).refined(3.0), &grid, &StreamKey::new(5, &[1]), 1024).unwrap();
    for k in 0..2 {
        let a = one.column(k).to_vec();
        let r = ks_two_sample(&a, &many.column(k).to_vec());
        assert!(r.p_value > 0.01, "mode {k}: {r:?}");
        let r = ks_two_sample(&a, &refined.column(k).to_vec());
        assert!(r.p_value > 0.01, "mode {k} refined: {r:?}");
    }
}

#[test]
fn refined_time_grid() {
    let s = StepScheme::euler(10).refined(3.0);
    let t = s.times(2.0);
    assert_eq!(t.len(), 11);
    assert_eq!((t[0], t[10]), (0.0, 2.0));
    assert!(t.windows(2).all(|w| w[1] > w[0]));
    assert!(t[10] - t[9] < t[1] - t[0]);
    assert_eq!(StepScheme::euler(4).times(1.0), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert!(StepScheme::euler(4).refined(0.5).validate().is_err());
}

#[test]
fn zero_cotangents_give_zero_gradient() {
    let (grid, p) = kernel_process(10, 0.8);
    let mut net = ControlNet::init(NetArch { n_layers: 1, width: 4, mlp_width: 4, n_spectral_modes: 3, ..NetArch::default_1d(1.0) }, 1).unwrap();
    net.randomize(3, 0.2);
    let scheme = StepScheme::euler(4);
    let traj = simulate(&p, randn((2, 10), 3).view(), &net, &scheme, &grid, &StreamKey::new(1, &[1])).unwrap();
    let g = replay_gradient(&traj, &p, &net, &scheme, &grid, Array2::zeros((2, p.k())).view(), RunningCost::None).unwrap();
    assert!(g.theta.iter().all(|&v| v == 0.0));
    assert!(g.x0_grid.iter().all(|&v| v == 0.0));
}

#[test]
fn one_step_linear_control_gradient_by_hand() {
    let (grid, p) = kernel_process(10, 0.8);
    let ctrl = LinearControl { theta: [0.7, -0.2] };
    let scheme = StepScheme::exponential(1);
    let x0 = p.eigs.transform().expand(randn((1, p.k()), 4).view());
    let traj = simulate(&p, x0.view(), &ctrl, &scheme, &grid, &StreamKey::new(1, &[1])).unwrap();
    let gt = randn((1, p.k()), 5);
    let g = replay_gradient(&traj, &p, &ctrl, &scheme, &grid, gt.view(), RunningCost::None).unwrap();

    // X1 = c X0 + b P(theta0 x0 + theta1) + d xi, with P the analysis map
    let tr = p.eigs.transform();
    let x0s = tr.analysis(x0.view());
    let ones = tr.analysis(Array2::from_elem((1, 10), 1.0).view());
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    let mut dx = vec![0.0; p.k()];
    for k in 0..p.k() {
        let (a, lam) = (p.eigs.a()[k], p.eigs.lam()[k]);
        let b = p.sigma * lam.sqrt() * (1.0 - (-a).exp()) / a;
        let c = (-a).exp();
        d0 += gt[[0, k]] * b * x0s[[0, k]];
        d1 += gt[[0, k]] * b * ones[[0, k]];
        dx[k] = gt[[0, k]] * (c + b * 0.7);
    }
    assert!(rel(g.theta[0], d0) < 1e-10);
    assert!(rel(g.theta[1], d1) < 1e-10);
    for k in 0..p.k() {
        assert!((g.x0_spectral[[0, k]] - dx[k]).abs() < 1e-10 * dx[k].abs().max(1e-3));
    }
}

#[test]
fn replay_gradient_matches_finite_differences() {
    let (grid, p) = kernel_process(10, 0.8);
    let arch = NetArch { n_layers: 2, width: 5, mlp_width: 6, n_spectral_modes: 3, fourier_features_m: 2, time_embed_dim: 4, time_hidden: 5, ..NetArch::default_1d(1.0) };
    let mut net = ControlNet::init(arch, 1).unwrap();
    net.randomize(7, 0.3);
    let scheme = StepScheme::euler(3);
    let key = StreamKey::new(6, &[1]);
    let x0 = randn((2, 10), 6);
    let gt = randn((2, p.k()), 7);
    let loss = |net: &ControlNet| {
        let traj = simulate(&p, x0.view(), net, &scheme, &grid, &key).unwrap();
        (&traj.terminal() * &gt).sum() + control_energy(&traj).unwrap().iter().sum::<f64>()
    };
    let traj = simulate(&p, x0.view(), &net, &scheme, &grid, &key).unwrap();
    let g = replay_gradient(&traj, &p, &net, &scheme, &grid, gt.view(), RunningCost::ControlEnergy).unwrap();
    let h = 1e-5;
    let mut rng = stream(8, &[1]);
    for _ in 0..20 {
        let i = rng.random_range(0..net.n_params());
        let base = net.theta[i];
        net.theta[i] = base + h;
        let up = loss(&net);
        net.theta[i] = base - h;
        let dn = loss(&net);
        net.theta[i] = base;
        let fd = (up - dn) / (2.0 * h);
        assert!((fd - g.theta[i]).abs() / fd.abs().max(g.theta[i].abs()).max(1e-6) < 1e-4, "param {i}: fd {fd} vs {}", g.theta[i]);
    }
}

#[test]
fn replay_needs_matching_noise_record() {
    let (grid, p) = kernel_process(10, 0.8);
    let traj = simulate(&p, Array2::zeros((1, 10)).view(), &ZeroControl, &StepScheme::euler(3), &grid, &StreamKey::new(1, &[1])).unwrap();
    let r = replay_gradient(&traj, &p, &ZeroControl, &StepScheme::euler(4), &grid, Array2::zeros((1, p.k())).view(), RunningCost::None);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn cosine_process_runs_at_a_finer_grid() {
    let g = GridSpec::square(8, 0.0, 1.0).unwrap();
    let eigs = Arc::new(build_cosine_basis(&g, &[4, 4], 1e-3).unwrap());
    let p = OUBridgeParams::new(eigs, 0.2, 1.0).unwrap();
    let fine = GridSpec::square(16, 0.0, 1.0).unwrap();
    let traj = simulate(&p, Array2::zeros((2, 256)).view(), &ZeroControl, &StepScheme::euler(3), &fine, &StreamKey::new(1, &[1])).unwrap();
    let mut buf = Vec::new();
    traj.write_grid_csv(&mut buf, 0, &fine).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,grid_index,value\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 256);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn chunk_size_never_changes_results(chunk in 1usize..9, seed in 0u64..100) {
        let (grid, p) = kernel_process(8, 0.6);
        let x0 = Array2::from_elem((7, p.k()), 0.1);
        let key = StreamKey::new(seed, &[1]);
        let all = simulate_terminal(&p, x0.view(), &ZeroControl, &StepScheme::euler(4), &grid, &key, 7).unwrap();
        let parts = simulate_terminal(&p, x0.view(), &ZeroControl, &StepScheme::euler(4), &grid, &key, chunk).unwrap();
        prop_assert_eq!(all, parts);
    }
}
