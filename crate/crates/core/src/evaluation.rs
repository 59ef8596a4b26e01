//! Two-sample testing, GP posterior oracle and marginal diagnostics.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datasets::{cholesky_with_jitter, Kernel};
use crate::error::{Error, Result};
use crate::ou_bridge::CoordGaussian;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    pub power: f64,
    pub n_repeats: usize,
    pub n_per_sample: usize,
    pub alpha: f64,
    /// Median of the per-repeat bandwidths.
    pub bandwidth: f64,
    /// Binomial standard error of the power estimate.
    pub stderr: f64,
    /// Whether repeats used disjoint subsets of both sets.
    pub disjoint: bool,
}

fn sq_dists(z: ArrayView2<f64>) -> Array2<f64> {
    let n = z.nrows();
    let norms: Vec<f64> = z.outer_iter().map(|r| r.dot(&r)).collect();
    let g = z.dot(&z.t());
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { (norms[i] + norms[j] - 2.0 * g[[i, j]]).max(0.0) })
}

/// Median pairwise Euclidean distance over distinct pairs.
pub fn median_distance(d2: &Array2<f64>) -> f64 {
    let n = d2.nrows();
    let mut v: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            v.push(d2[[i, j]]);
        }
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    m.sqrt()
}

/// Unbiased MMD^2 between the first `nx` rows and the rest of a pooled
/// kernel matrix, under the labeling `idx` (first `nx` entries are X).
fn mmd2_from_kernel(k: &Array2<f64>, idx: &[usize], nx: usize) -> f64 {
    let n = idx.len();
    let ny = n - nx;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for a in 0..n {
        let row = k.row(idx[a]);
        for b in a + 1..n {
            let v = row[idx[b]];
            match (a < nx, b < nx) {
                (true, true) => sxx += v,
                (false, false) => syy += v,
                _ => sxy += v,
            }
        }
    }
    2.0 * sxx / (nx * (nx - 1)) as f64 + 2.0 * syy / (ny * (ny - 1)) as f64 - 2.0 * sxy / (nx * ny) as f64
}

/// Unbiased MMD^2 with `k(x, y) = exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd2_unbiased(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidth: f64) -> f64 {
    let pooled = ndarray::concatenate![ndarray::Axis(0), x, y];
    let k = sq_dists(pooled.view()).mapv(|d| (-d / (2.0 * bandwidth * bandwidth)).exp());
    let idx: Vec<usize> = (0..pooled.nrows()).collect();
    mmd2_from_kernel(&k, &idx, x.nrows())
}

/// Permutation p-value `(1 + #{perm >= observed}) / (1 + n_perm)` with the
/// median-heuristic bandwidth of the pooled sample. Returns `(p, bandwidth)`.
pub fn mmd_permutation_test<R: rand::Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    n_perm: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if x.nrows() < 2 || y.nrows() < 2 || x.ncols() != y.ncols() {
        return Err(Error::InvalidArgument("two-sample test needs >= 2 rows per set and equal widths".into()));
    }
    let pooled = ndarray::concatenate![ndarray::Axis(0), x, y];
    let d2 = sq_dists(pooled.view());
    let h = median_distance(&d2).max(1e-12);
    let k = d2.mapv(|d| (-d / (2.0 * h * h)).exp());
    let nx = x.nrows();
    let mut idx: Vec<usize> = (0..pooled.nrows()).collect();
    let observed = mmd2_from_kernel(&k, &idx, nx);
    let mut count = 0usize;
    for _ in 0..n_perm {
        idx.shuffle(rng);
        if mmd2_from_kernel(&k, &idx, nx) >= observed {
            count += 1;
        }
    }
    Ok(((1 + count) as f64 / (1 + n_perm) as f64, h))
}

fn rows(m: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(ndarray::Axis(0), idx)
}

/// Rejection rate of the permutation MMD test over `repeats` resamples of
/// `n` rows from each set. Disjoint subsets are used when both sets hold at
/// least `repeats * n` rows; otherwise each repeat draws `n` rows without
/// replacement independently.
pub fn mmd_test_power(
    gen: ArrayView2<f64>,
    real: ArrayView2<f64>,
    repeats: usize,
    n: usize,
    alpha: f64,
    n_perm: usize,
    seed: u64,
) -> Result<TwoSampleResult> {
    if n < 2 || n > gen.nrows() || n > real.nrows() {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= n <= min set size (n = {n}, sets of {} and {})",
            gen.nrows(),
            real.nrows()
        )));
    }
    if repeats == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument("repeats must be positive and alpha in (0, 1)".into()));
    }
    let disjoint = repeats * n <= gen.nrows() && repeats * n <= real.nrows();
    let mut rng = stream(seed, &[tag::EVAL, 1]);
    let mut perm_g: Vec<usize> = (0..gen.nrows()).collect();
    let mut perm_r: Vec<usize> = (0..real.nrows()).collect();
    perm_g.shuffle(&mut rng);
    perm_r.shuffle(&mut rng);

    let outcomes: Vec<Result<(bool, f64)>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rr = stream(seed, &[tag::EVAL, 2, r as u64]);
            let (ig, ir) = if disjoint {
                (perm_g[r * n..(r + 1) * n].to_vec(), perm_r[r * n..(r + 1) * n].to_vec())
            } else {
                let mut a: Vec<usize> = (0..gen.nrows()).collect();
                let mut b: Vec<usize> = (0..real.nrows()).collect();
                a.shuffle(&mut rr);
                b.shuffle(&mut rr);
                (a[..n].to_vec(), b[..n].to_vec())
            };
            let (p, h) = mmd_permutation_test(rows(gen, &ig).view(), rows(real, &ir).view(), n_perm, &mut rr)?;
            Ok((p <= alpha, h))
        })
        .collect();
    let mut rejections = 0;
    let mut hs = Vec::with_capacity(repeats);
    for o in outcomes {
        let (rej, h) = o?;
        rejections += rej as usize;
        hs.push(h);
    }
    hs.sort_by(f64::total_cmp);
    let power = rejections as f64 / repeats as f64;
    Ok(TwoSampleResult {
        power,
        n_repeats: repeats,
        n_per_sample: n,
        alpha,
        bandwidth: hs[hs.len() / 2],
        stderr: (power * (1.0 - power) / repeats as f64).sqrt(),
        disjoint,
    })
}

/// Closed-form GP posterior at `target_x` given noisy observations.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl GpPosterior {
    pub fn std(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }
}

/// Posterior of the latent function (no observation noise added at the targets).
pub fn gp_posterior_oracle(
    kernel: &Kernel,
    context_x: &[f64],
    context_y: &[f64],
    target_x: &[f64],
    noise_var: f64,
) -> Result<GpPosterior> {
    if context_x.len() != context_y.len() {
        return Err(Error::Shape("context points and values differ in length".into()));
    }
    let kss = kernel.gram(target_x, target_x);
    if context_x.is_empty() {
        return Ok(GpPosterior { mean: vec![0.0; target_x.len()], cov: kss });
    }
    let mut koo = kernel.gram(context_x, context_x);
    for i in 0..context_x.len() {
        koo[(i, i)] += noise_var;
    }
    let chol = cholesky_with_jitter(&koo)?;
    let kso = kernel.gram(target_x, context_x);
    let alpha = chol.solve(&DVector::from_column_slice(context_y));
    let mean = &kso * alpha;
    let v = chol.solve(&kso.transpose());
    let cov = kss - &kso * v;
    Ok(GpPosterior { mean: mean.iter().copied().collect(), cov })
}

/// Kolmogorov limiting tail `P(K > lambda)`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        s += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test against a Gaussian.
pub fn ks_normal(samples: &[f64], mean: f64, std: f64) -> Result<KsResult> {
    let dist = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = dist.cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let en = n.sqrt();
    Ok(KsResult { statistic: d, p_value: kolmogorov_tail((en + 0.12 + 0.11 / en) * d) })
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let en = ((na * nb) as f64 / (na + nb) as f64).sqrt();
    KsResult { statistic: d, p_value: kolmogorov_tail((en + 0.12 + 0.11 / en) * d) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: usize,
    pub mean: f64,
    pub var: f64,
    /// (sample mean - reference mean) / standard error.
    pub mean_z: f64,
    /// (sample var - reference var) / its Gaussian standard error.
    pub var_z: f64,
    pub ks: Option<KsResult>,
}

/// Per-mode mean/variance z-scores and KS statistics of `samples` (n x K)
/// against reference Gaussians. KS is skipped for degenerate references.
pub fn marginal_check(samples: ArrayView2<f64>, reference: &[CoordGaussian]) -> Result<Vec<ModeReport>> {
    if samples.ncols() != reference.len() || samples.nrows() < 2 {
        return Err(Error::Shape("samples must be n x K with n >= 2".into()));
    }
    let n = samples.nrows() as f64;
    let mut out = Vec::with_capacity(reference.len());
    for (k, r) in reference.iter().enumerate() {
        let col = samples.column(k);
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let se_mean = (r.var / n).sqrt();
        let se_var = r.var * (2.0 / (n - 1.0)).sqrt();
        let z = |d: f64, se: f64| if se > 0.0 { d / se } else if d == 0.0 { 0.0 } else { f64::INFINITY };
        let ks = if r.var > 0.0 { Some(ks_normal(&col.to_vec(), r.mean, r.var.sqrt())?) } else { None };
        out.push(ModeReport { mode: k, mean, var, mean_z: z(mean - r.mean, se_mean), var_z: z(var - r.var, se_var), ks });
    }
    Ok(out)
}

/// Metric report written by the evaluation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub config: serde_json::Value,
}
