use std::io::Write;
use std::path::Path;

use anyhow::Result;
use fnbridge::bayesian_learning::{bayes_train, posterior_sample, BayesConfig, RegressionTask};
use fnbridge::basis::SpectralField;
use fnbridge::bridge_matching::{bm_sample, bm_train, initial_draws, BMConfig, Coupling, FieldSampler};
use fnbridge::datasets::{density_pair_2d, gp_task_on_grid, quadratic_dataset, Kernel};
use fnbridge::evaluation::{gp_posterior_oracle, mmd_test_power, MetricsReport};
use fnbridge::grid::{GridField, GridSpec};
use fnbridge::ou_bridge::{sample_bridge_path, uniform_times, OUBridgeParams};
use fnbridge::rng::{stream, tag};
use fnbridge::selftest;
use ndarray::{Array2, ArrayView2};
use serde_json::json;

use crate::artifacts::{create, load_net, read_fields, read_text, write_fields, write_text, BayesCheckpoint, OutDir, TrainLogs};
use crate::config::{config_err, Config, DatasetKind};

fn progress(iter: usize, total: usize, loss: f64, ms: f64) {
    let every = (total / 10).max(1);
    if (iter + 1) % every == 0 || iter + 1 == total {
        eprintln!("iter {:>7}/{total}  loss {loss:.5}  {:.1}s", iter + 1, ms / 1e3);
    }
}

pub fn basis_build(cfg: &Config, out: &Path) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let (_, p) = cfg.process()?;
    write_text(&out.path("eigs.json"), &p.eigs.to_json()?)?;
    println!("K = {} modes written to {}", p.k(), out.path("eigs.json").display());
    Ok(())
}

pub fn bridge_sample(cfg: &Config, out: &Path) -> Result<()> {
    let bc = cfg.bridge.as_ref().ok_or_else(|| config_err("bridge sample needs a [bridge] section"))?;
    let out = OutDir::new(out, Some(cfg))?;
    let (grid, p) = cfg.process()?;
    let project = |v: Vec<f64>| -> Result<SpectralField> {
        let c = p.eigs.transform().analysis(ArrayView2::from_shape((1, v.len()), &v)?);
        Ok(SpectralField::new(p.eigs.clone(), c.row(0).to_vec())?)
    };
    let x0 = project(bc.x0.values(grid.len(), "x0")?)?;
    let xt = project(bc.xt.values(grid.len(), "xt")?)?;
    let times = uniform_times(p.horizon, bc.steps);
    for i in 0..bc.n_paths {
        let mut rng = stream(cfg.train.seed, &[tag::PATH, i as u64]);
        let traj = sample_bridge_path(&p, &x0, &xt, &times, &mut rng)?;
        let mut w = create(&out.path(&format!("bridge_{i}_spectral.csv")))?;
        traj.write_spectral_csv(&mut w, 0)?;
        w.flush()?;
        let mut w = create(&out.path(&format!("bridge_{i}_grid.csv")))?;
        traj.write_grid_csv(&mut w, 0, &grid)?;
        w.flush()?;
    }
    println!("{} bridge path(s) with {} steps written to {}", bc.n_paths, bc.steps, out.root.display());
    Ok(())
}

fn peak_scaled(f: &GridField) -> Vec<f64> {
    let m = f.values.iter().cloned().fold(0.0, f64::max);
    f.values.iter().map(|v| v / m).collect()
}

/// Endpoint coupling of the configured dataset. Writes the data sets when `out` is given.
fn coupling(cfg: &Config, grid: &GridSpec, p: &OUBridgeParams, out: Option<&OutDir>) -> Result<Coupling> {
    match cfg.data()?.dataset {
        DatasetKind::Quadratic => {
            let q = cfg.quadratic()?;
            let mut rng = stream(q.data_seed, &[tag::DATA]);
            let train = quadratic_dataset(q.n_train, grid, q.noise, q.noise_std, &mut rng)?;
            if let Some(out) = out {
                let held = quadratic_dataset(q.n_heldout, grid, q.noise, q.noise_std, &mut rng)?;
                write_fields(&out.path("train.csv"), train.values.view())?;
                write_fields(&out.path("heldout.csv"), held.values.view())?;
            }
            Ok(Coupling::independent(
                FieldSampler::stationary(p),
                FieldSampler::empirical_grid(&p.eigs, train.values.view())?,
            )?)
        }
        DatasetKind::Density2d => {
            let res = grid.res[0];
            let (src, tgt) = density_pair_2d(res)?;
            if &src.grid != grid {
                return Err(config_err(format!("density-2d needs a square {res}x{res} grid on [-7, 7]^2")));
            }
            if let Some(out) = out {
                let rows = Array2::from_shape_vec((2, grid.len()), [peak_scaled(&src), peak_scaled(&tgt)].concat())?;
                write_fields(&out.path("endpoints.csv"), rows.view())?;
            }
            Ok(Coupling::independent(
                FieldSampler::dirac_grid(&p.eigs, &peak_scaled(&src))?,
                FieldSampler::dirac_grid(&p.eigs, &peak_scaled(&tgt))?,
            )?)
        }
        DatasetKind::GpTask => Err(config_err("bridge matching needs the quadratic or density-2d dataset")),
    }
}

fn bm_config(cfg: &Config) -> BMConfig {
    let t = &cfg.train;
    BMConfig {
        batch_size: t.batch,
        n_iters: t.iters,
        lr: t.lr,
        ema_rate: t.ema,
        scheme: t.scheme(),
        seed: t.seed,
        eps_frac: t.eps_frac,
        target_clamp: t.target_clamp,
        grad_clip: t.grad_clip,
        simulate_paths: false,
    }
}

pub fn bm_train_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let (grid, p) = cfg.process()?;
    let coupling = coupling(cfg, &grid, &p, Some(&out))?;
    let bm = bm_config(cfg);
    let mut logs = TrainLogs::new(&out)?;
    let (state, log) = bm_train(&bm, &coupling, &p, cfg.arch(grid.dims()), |e, ms, _| {
        logs.push(e.iter, e, ms)?;
        progress(e.iter, bm.n_iters, e.loss, ms);
        Ok(())
    })?;
    logs.finish()?;
    write_text(&out.path("checkpoint.json"), &state.ema_net().to_json()?)?;
    let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!("trained {} iterations, final loss {last:.5}; checkpoint {}", log.len(), out.path("checkpoint.json").display());
    Ok(())
}

fn sampling_grid(grid: &GridSpec, res: &[usize]) -> Result<GridSpec> {
    if res.is_empty() {
        return Ok(grid.clone());
    }
    let res = if res.len() == 1 { vec![res[0]; grid.dims()] } else { res.to_vec() };
    grid.with_res(res).map_err(|e| config_err(format!("--res: {e}")))
}

pub fn bm_sample_cmd(cfg: &Config, out: &Path, checkpoint: Option<&Path>, n: Option<usize>, res: &[usize]) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let (grid, p) = cfg.process()?;
    let net = load_net(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.path("checkpoint.json")))?;
    let coupling = coupling(cfg, &grid, &p, None)?;
    let n = n.unwrap_or(cfg.eval.n_samples);
    let target = sampling_grid(&grid, res)?;
    let x0 = initial_draws(&coupling, n, cfg.train.seed);
    let term = bm_sample(&p, &net, x0.view(), &cfg.train.scheme(), &target, cfg.train.seed)?;
    let fields = p.eigs.transform_for(&target, false)?.expand(term.view());
    write_fields(&out.path("samples.csv"), fields.view())?;
    println!("{n} samples on a {:?} grid written to {}", target.res, out.path("samples.csv").display());
    Ok(())
}

/// The configured regression task, from file or drawn from the RBF prior on the grid.
fn regression_task(cfg: &Config, grid: &GridSpec) -> Result<(RegressionTask, Option<Kernel>)> {
    let g = cfg.gp_task()?;
    let kernel = match (g.l1, g.l2) {
        (Some(l1), Some(l2)) => Some(Kernel::rbf(l1, l2)),
        (None, None) => None,
        _ => return Err(config_err("gp-task needs both l1 and l2 or neither")),
    };
    let sigma = if g.learnable_sigma { None } else { Some(g.sigma_obs.unwrap_or(g.noise_var.sqrt())) };
    if let Some(file) = &g.task_file {
        let task: RegressionTask = serde_json::from_str(&read_text(Path::new(file))?)
            .map_err(|e| config_err(format!("{file}: {e}")))?;
        if &task.grid != grid {
            return Err(config_err(format!("{file}: task grid differs from [grid]")));
        }
        return Ok((task, kernel));
    }
    let k = kernel.ok_or_else(|| config_err("gp-task needs l1 and l2 (or a task_file)"))?;
    let s = gp_task_on_grid(k, grid, g.n_context, g.n_target, g.noise_var, &mut stream(g.data_seed, &[tag::DATA]))?;
    let task = RegressionTask {
        grid: grid.clone(),
        observed: s.context_x.iter().zip(&s.context_y).map(|(&x, &y)| [x, y]).collect(),
        targets: s.target_x,
        sigma_obs: sigma,
    };
    Ok((task, kernel))
}

fn bayes_config(cfg: &Config) -> BayesConfig {
    let t = &cfg.train;
    BayesConfig {
        batch_size: t.batch,
        n_iters: t.iters,
        lr: t.lr,
        lr_schedule: t.lr_schedule,
        ema_rate: t.ema,
        scheme: t.scheme(),
        learnable_x0: t.learnable_x0,
        seed: t.seed,
        grad_clip: t.grad_clip,
    }
}

pub fn bayes_train_cmd(cfg: &Config, out: &Path) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let (grid, p) = cfg.process()?;
    let (task, _) = regression_task(cfg, &grid)?;
    write_text(&out.path("task.json"), &serde_json::to_string_pretty(&task)?)?;
    let energy = task.energy()?;
    let bc = bayes_config(cfg);
    let mut logs = TrainLogs::new(&out)?;
    let (state, log) = bayes_train(&bc, &energy, &p, cfg.arch(grid.dims()), GridField::zeros(grid.clone()), |e, ms, _| {
        logs.push(e.iter, e, ms)?;
        progress(e.iter, bc.n_iters, e.loss, ms);
        Ok(())
    })?;
    logs.finish()?;
    let (net, x0, sigma) = state.ema_params();
    let ck = BayesCheckpoint::new(&net, &x0, sigma)?;
    write_text(&out.path("checkpoint.json"), &serde_json::to_string_pretty(&ck)?)?;
    let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!("trained {} iterations, final loss {last:.5}, sigma_obs {sigma:.5}", log.len());
    Ok(())
}

pub fn bayes_sample_cmd(cfg: &Config, out: &Path, checkpoint: Option<&Path>, n: Option<usize>) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let (grid, p) = cfg.process()?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.path("checkpoint.json"));
    let (net, x0, _) = BayesCheckpoint::load(&ck, &grid)?;
    let n = n.unwrap_or(cfg.eval.n_samples);
    let samples = posterior_sample(&net, &x0, &p, &cfg.train.scheme(), n, cfg.train.seed)?;
    let rows = Array2::from_shape_vec((n, grid.len()), samples.into_iter().flat_map(|f| f.values).collect())?;
    write_fields(&out.path("samples.csv"), rows.view())?;
    println!("{n} posterior samples written to {}", out.path("samples.csv").display());
    Ok(())
}

fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(reports)?)
}

pub fn eval_mmd(cfg: &Config, out: &Path, generated: &Path, reference: &Path) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let gen = read_fields(generated)?;
    let real = read_fields(reference)?;
    if gen.ncols() != real.ncols() {
        return Err(config_err(format!("{} has {} columns, {} has {}", generated.display(), gen.ncols(), reference.display(), real.ncols())));
    }
    let e = &cfg.eval;
    let r = mmd_test_power(gen.view(), real.view(), e.repeats, e.n, e.alpha, e.n_perm, cfg.train.seed)?;
    let report = MetricsReport {
        metric: "mmd_test_power".into(),
        value: r.power,
        stderr: r.stderr,
        config: json!({
            "resolved": cfg.to_json()?,
            "generated": generated.display().to_string(),
            "reference": reference.display().to_string(),
            "bandwidth": r.bandwidth,
            "disjoint": r.disjoint,
        }),
    };
    write_reports(&out.path("mmd_metrics.json"), &[report])?;
    println!("mmd test power {:.4} +- {:.4} (alpha {}, n {}, {} repeats)", r.power, r.stderr, e.alpha, e.n, e.repeats);
    Ok(())
}

/// Compare posterior draws at the task's target points with the closed-form GP posterior.
pub fn eval_gp(cfg: &Config, out: &Path, samples: &Path) -> Result<()> {
    let out = OutDir::new(out, Some(cfg))?;
    let grid = cfg.grid()?;
    let (task, kernel) = regression_task(cfg, &grid)?;
    let kernel = kernel.ok_or_else(|| config_err("eval gp needs the kernel parameters l1 and l2"))?;
    let noise_var = cfg.gp_task()?.noise_var;
    let energy = task.energy()?;
    let draws = read_fields(samples)?;
    if draws.ncols() != grid.len() || draws.nrows() < 2 {
        return Err(config_err(format!("{}: expected at least 2 rows of {} values", samples.display(), grid.len())));
    }
    let cx: Vec<f64> = task.observed.iter().map(|o| o[0]).collect();
    let cy: Vec<f64> = task.observed.iter().map(|o| o[1]).collect();
    let post = gp_posterior_oracle(&kernel, &cx, &cy, &task.targets, noise_var)?;
    let oracle_std = post.std();
    let n = draws.nrows() as f64;
    let mut sq = 0.0;
    let mut ok = 0usize;
    let mut mc_var = 0.0;
    let mut rows = Vec::new();
    for (j, &gi) in energy.targets.iter().enumerate() {
        let col = draws.column(gi);
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        sq += (mean - post.mean[j]).powi(2);
        mc_var += std * std / n;
        let within = (std - oracle_std[j]).abs() <= 0.3 * oracle_std[j];
        ok += within as usize;
        rows.push(json!({"x": task.targets[j], "mean": mean, "oracle_mean": post.mean[j], "std": std, "oracle_std": oracle_std[j]}));
    }
    let m = energy.targets.len() as f64;
    let rmse = (sq / m).sqrt();
    let frac = ok as f64 / m;
    let detail = json!({"resolved": cfg.to_json()?, "samples": samples.display().to_string(), "targets": rows});
    let reports = [
        MetricsReport { metric: "posterior_mean_rmse".into(), value: rmse, stderr: (mc_var / m).sqrt(), config: detail.clone() },
        MetricsReport { metric: "posterior_std_within_30pct".into(), value: frac, stderr: (frac * (1.0 - frac) / m).sqrt(), config: detail },
    ];
    write_reports(&out.path("gp_metrics.json"), &reports)?;
    println!("posterior mean RMSE {rmse:.4}; std within 30% at {ok}/{} targets", energy.targets.len());
    Ok(())
}

/// Returns whether every check passed.
pub fn selftest_cmd() -> Result<bool> {
    let checks = selftest::run_all();
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!("{}  {:<width$}  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(failed == 0)
}
