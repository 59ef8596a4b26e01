//! Synthetic data: Gaussian-process curves, the quadratic curve family and
//! the pair of 2D densities used for the bridging-field experiment.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Matern52,
    Periodic,
}

/// Stationary covariance functions of the GP regression tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub l1: f64,
    pub l2: f64,
    /// Only used by the periodic kernel.
    #[serde(default)]
    pub period: f64,
}

impl Kernel {
    pub fn rbf(l1: f64, l2: f64) -> Self {
        Kernel { kind: KernelKind::Rbf, l1, l2, period: 0.0 }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let d = (x - y).abs();
        let s2 = self.l1 * self.l1;
        match self.kind {
            KernelKind::Rbf => s2 * (-d * d / (self.l2 * self.l2)).exp(),
            KernelKind::Matern52 => {
                let r = 5f64.sqrt() * d / self.l2;
                s2 * (1.0 + r + 5.0 * d * d / (3.0 * self.l2 * self.l2)) * (-r).exp()
            }
            KernelKind::Periodic => {
                let s = (std::f64::consts::PI * d * d / self.period).sin();
                s2 * (-2.0 * s * s / self.l2).exp()
            }
        }
    }

    pub fn gram(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), ys.len(), |i, j| self.eval(xs[i], ys[j]))
    }
}

/// Cholesky factor of `m + jitter I`, escalating the jitter tenfold from
/// `1e-10 * mean diagonal` up to `1e-2 * mean diagonal`.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10 * scale;
    while jitter <= 1e-2 * scale {
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Cholesky { jitter: jitter / 10.0 })
}

/// One joint draw of `f(x) + noise` at `xs`.
pub fn sample_gp_values<R: Rng + ?Sized>(kernel: &Kernel, xs: &[f64], noise_var: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mut k = kernel.gram(xs, xs);
    for i in 0..xs.len() {
        k[(i, i)] += noise_var;
    }
    // indefinite kernels fall back to the nearest PSD matrix (negative eigenvalues clipped)
    let l = match cholesky_with_jitter(&k) {
        Ok(c) => c.l(),
        Err(_) => {
            let e = k.symmetric_eigen();
            let mut v = e.eigenvectors;
            for (j, lam) in e.eigenvalues.iter().enumerate() {
                v.column_mut(j).scale_mut(lam.max(0.0).sqrt());
            }
            v
        }
    };
    let z = DVector::from_fn(xs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((l * z).iter().copied().collect())
}

/// Hyperparameter ranges of the GP regression tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPTask {
    pub kind: KernelKind,
    pub l1: [f64; 2],
    pub l2: [f64; 2],
    pub period: [f64; 2],
    /// Inclusive range of the context size.
    pub n_context: [usize; 2],
    /// Upper bound on context plus target size; the target size is uniform on `[3, max_total - |O|]`.
    pub max_total: usize,
    pub noise_var: f64,
    pub domain: [f64; 2],
}

impl GPTask {
    pub fn new(kind: KernelKind) -> Self {
        GPTask {
            kind,
            l1: [0.1, 1.0],
            l2: [0.1, 0.6],
            period: [0.1, 0.5],
            n_context: [3, 37],
            max_total: 50,
            noise_var: 1e-2,
            domain: [-2.0, 2.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.l1[0] >= 0.0
            && self.l1[0] <= self.l1[1]
            && self.l2[0] > 0.0
            && self.l2[0] <= self.l2[1]
            && self.period[0] > 0.0
            && self.period[0] <= self.period[1]
            && self.n_context[0] >= 1
            && self.n_context[0] <= self.n_context[1]
            && self.n_context[1] + 3 <= self.max_total
            && self.noise_var >= 0.0
            && self.domain[0] < self.domain[1];
        if !ok {
            return Err(Error::InvalidArgument(format!("inconsistent GP task ranges {self:?}")));
        }
        Ok(())
    }
}

/// A regression problem: context (observed) and target points with values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPSample {
    pub kernel: Kernel,
    pub context_x: Vec<f64>,
    pub context_y: Vec<f64>,
    pub target_x: Vec<f64>,
    pub target_y: Vec<f64>,
}

fn uniform<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

pub fn sample_gp_task<R: Rng + ?Sized>(spec: &GPTask, rng: &mut R) -> Result<GPSample> {
    spec.validate()?;
    let kernel = Kernel {
        kind: spec.kind,
        l1: uniform(spec.l1, rng),
        l2: uniform(spec.l2, rng),
        period: if spec.kind == KernelKind::Periodic { uniform(spec.period, rng) } else { 0.0 },
    };
    let n_ctx = rng.random_range(spec.n_context[0]..=spec.n_context[1]);
    let n_tgt = rng.random_range(3..=spec.max_total - n_ctx);
    let xs: Vec<f64> = (0..n_ctx + n_tgt).map(|_| uniform(spec.domain, rng)).collect();
    let ys = sample_gp_values(&kernel, &xs, spec.noise_var, rng)?;
    Ok(GPSample {
        kernel,
        context_x: xs[..n_ctx].to_vec(),
        context_y: ys[..n_ctx].to_vec(),
        target_x: xs[n_ctx..].to_vec(),
        target_y: ys[n_ctx..].to_vec(),
    })
}

/// A regression task whose points are distinct points of `grid`, drawn
/// from a fixed kernel.
pub fn gp_task_on_grid<R: Rng + ?Sized>(
    kernel: Kernel,
    grid: &GridSpec,
    n_context: usize,
    n_target: usize,
    noise_var: f64,
    rng: &mut R,
) -> Result<GPSample> {
    if grid.dims() != 1 || n_context + n_target > grid.len() {
        return Err(Error::InvalidArgument("need a 1-D grid with enough points".into()));
    }
    let mut idx: Vec<usize> = (0..grid.len()).collect();
    for i in 0..n_context + n_target {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let pts = grid.axis_points(0);
    let xs: Vec<f64> = idx[..n_context + n_target].iter().map(|&i| pts[i]).collect();
    let ys = sample_gp_values(&kernel, &xs, noise_var, rng)?;
    Ok(GPSample {
        kernel,
        context_x: xs[..n_context].to_vec(),
        context_y: ys[..n_context].to_vec(),
        target_x: xs[n_context..].to_vec(),
        target_y: ys[n_context..].to_vec(),
    })
}

/// How the 0.05-scale noise enters a quadratic curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadraticNoise {
    /// One offset per curve, shared by all points.
    CurveOffset,
    /// Independent noise at every point.
    Pointwise,
}

pub const QUADRATIC_NOISE_STD: f64 = 0.05;

/// Quadratic curves `a p^2 + noise` with `a` uniform on `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct QuadraticSamples {
    pub grid: GridSpec,
    /// n x N
    pub values: Array2<f64>,
    pub signs: Vec<f64>,
}

/// Default grid of the quadratic family: 100 points on `[-1, 1]`.
pub fn quadratic_grid() -> GridSpec {
    GridSpec::line(100, -1.0, 1.0).expect("valid grid")
}

pub fn quadratic_dataset<R: Rng + ?Sized>(
    n: usize,
    grid: &GridSpec,
    noise: QuadraticNoise,
    noise_std: f64,
    rng: &mut R,
) -> Result<QuadraticSamples> {
    if grid.dims() != 1 {
        return Err(Error::InvalidGrid("quadratic curves live on a 1-D grid".into()));
    }
    let pts = grid.axis_points(0);
    let mut values = Array2::zeros((n, pts.len()));
    let mut signs = Vec::with_capacity(n);
    for i in 0..n {
        let a = if rng.random::<bool>() { 1.0 } else { -1.0 };
        signs.push(a);
        let offset = noise_std * rng.sample::<f64, _>(StandardNormal);
        for (j, p) in pts.iter().enumerate() {
            let e = match noise {
                QuadraticNoise::CurveOffset => offset,
                QuadraticNoise::Pointwise => noise_std * rng.sample::<f64, _>(StandardNormal),
            };
            values[[i, j]] = a * p * p + e;
        }
    }
    Ok(QuadraticSamples { grid: grid.clone(), values, signs })
}

/// Log-density (unnormalized) of the 8-component Gaussian mixture: centres
/// at radius 5 in the 8 compass directions, covariance `sqrt(0.1) I`.
pub fn eight_gaussians_log_density(p: &[f64]) -> f64 {
    let var = 0.1f64.sqrt();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let centres = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (s, s), (s, -s), (-s, s), (-s, -s)];
    let terms: Vec<f64> = centres
        .iter()
        .map(|(cx, cy)| {
            let dx = p[0] - 5.0 * cx;
            let dy = p[1] - 5.0 * cy;
            -(dx * dx + dy * dy) / (2.0 * var)
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `-min(|p - (1,1)|^2, |p - (3,3)|^2, |p - (5,5)|^2) / 0.05`.
pub fn three_wells_log_density(p: &[f64]) -> f64 {
    let d = [1.0, 3.0, 5.0]
        .iter()
        .map(|c| (p[0] - c) * (p[0] - c) + (p[1] - c) * (p[1] - c))
        .fold(f64::INFINITY, f64::min);
    -d / 0.05
}

fn normalized_density(grid: &GridSpec, logp: impl Fn(&[f64]) -> f64) -> Result<GridField> {
    let logs: Vec<f64> = grid.points().iter().map(|p| logp(p)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let un: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z = grid.weight() * un.iter().sum::<f64>();
    GridField::new(grid.clone(), un.iter().map(|v| v / z).collect())
}

/// Source and target densities on `res x res` points of `[-7, 7]^2`,
/// normalized to unit mass under the grid quadrature.
pub fn density_pair_2d(res: usize) -> Result<(GridField, GridField)> {
    let grid = GridSpec::square(res, -7.0, 7.0)?;
    Ok((
        normalized_density(&grid, eight_gaussians_log_density)?,
        normalized_density(&grid, three_wells_log_density)?,
    ))
}
