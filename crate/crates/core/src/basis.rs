//! Eigen-systems of the drift/covariance pair and grid <-> spectral transforms.
//!
//! An [`EigenSystem`] holds decay rates `a_k` (the drift acts as `-a_k` on
//! mode k), covariance eigenvalues `lam_k`, and the eigenfunctions evaluated at
//! the points of a training grid. Two constructions are provided:
//!
//! * analytic cosine (Neumann Laplacian eigenfunctions on a box, identity
//!   covariance, decay from the Laplacian spectrum), separable in 2D;
//! * numerical RBF kernel (eigendecomposition of the quadrature-weighted Gram
//!   matrix, constant decay 1/2).
//!
//! Mode ordering for separable systems is row-major over per-axis mode
//! numbers: `k = n0 * M1 + n1`.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::io::{decode_f64s, encode_f64s};

pub const EIGS_VERSION: u32 = 1;
pub const DEFAULT_DECAY_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    AnalyticCosine,
    NumericalKernel,
}

/// Evaluations of K basis functions at the points of one grid.
#[derive(Debug, Clone)]
pub struct GridTransform {
    grid: GridSpec,
    weight: f64,
    repr: Repr,
}

#[derive(Debug, Clone)]
enum Repr {
    /// K x N matrix of values.
    Dense(Array2<f64>),
    /// Per-axis factors, M0 x R0 and M1 x R1.
    Separable { f0: Array2<f64>, f1: Array2<f64> },
}

/// `sqrt(c_n / W) cos(pi n (x - lo) / W)` for n < modes at the cell centres of `axis`.
fn cosine_factor(grid: &GridSpec, axis: usize, modes: usize) -> Array2<f64> {
    let lo = grid.bounds[axis][0];
    let w = grid.width(axis);
    let pts = grid.axis_points(axis);
    Array2::from_shape_fn((modes, pts.len()), |(n, i)| {
        let c = if n == 0 { 1.0 } else { 2.0 };
        (c / w).sqrt() * (PI * n as f64 * (pts[i] - lo) / w).cos()
    })
}

impl GridTransform {
    /// Cosine eigenfunctions with `modes[d]` modes along axis d.
    pub fn cosine(grid: &GridSpec, modes: &[usize]) -> Result<Self> {
        grid.validate()?;
        if modes.len() != grid.dims() {
            return Err(Error::InvalidArgument(format!(
                "{} mode counts for a {}-D grid",
                modes.len(),
                grid.dims()
            )));
        }
        if modes.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument("mode count must be positive".into()));
        }
        let repr = match grid.dims() {
            1 => Repr::Dense(cosine_factor(grid, 0, modes[0])),
            _ => Repr::Separable {
                f0: cosine_factor(grid, 0, modes[0]),
                f1: cosine_factor(grid, 1, modes[1]),
            },
        };
        Ok(GridTransform { grid: grid.clone(), weight: grid.weight(), repr })
    }

    pub fn dense(grid: &GridSpec, basis: Array2<f64>) -> Result<Self> {
        if basis.ncols() != grid.len() {
            return Err(Error::Shape(format!(
                "basis has {} columns, grid has {} points",
                basis.ncols(),
                grid.len()
            )));
        }
        Ok(GridTransform { grid: grid.clone(), weight: grid.weight(), repr: Repr::Dense(basis) })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn n_modes(&self) -> usize {
        match &self.repr {
            Repr::Dense(b) => b.nrows(),
            Repr::Separable { f0, f1 } => f0.nrows() * f1.nrows(),
        }
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    /// Dense K x N evaluation matrix.
    pub fn basis_matrix(&self) -> Array2<f64> {
        match &self.repr {
            Repr::Dense(b) => b.clone(),
            Repr::Separable { f0, f1 } => {
                let (m0, r0) = f0.dim();
                let (m1, r1) = f1.dim();
                Array2::from_shape_fn((m0 * m1, r0 * r1), |(k, p)| {
                    f0[[k / m1, p / r1]] * f1[[k % m1, p % r1]]
                })
            }
        }
    }

    /// Rows of `f` (B x N) times the basis transposed: B x K, no quadrature weight.
    pub fn project(&self, f: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(f.ncols(), self.n_points(), "project: width mismatch");
        match &self.repr {
            Repr::Dense(b) => f.dot(&b.t()),
            Repr::Separable { f0, f1 } => {
                let (m0, r0) = f0.dim();
                let (m1, r1) = f1.dim();
                let nb = f.nrows();
                let f = f.as_standard_layout();
                let flat = f.view().into_shape_with_order((nb * r0, r1)).unwrap();
                let t = flat.dot(&f1.t());
                let mut out = Array2::zeros((nb, m0 * m1));
                for b in 0..nb {
                    let tb = t.slice(s![b * r0..(b + 1) * r0, ..]);
                    let ob = f0.dot(&tb);
                    out.row_mut(b).assign(&ob.into_shape_with_order(m0 * m1).unwrap());
                }
                out
            }
        }
    }

    /// Rows of `c` (B x K) times the basis: grid values B x N.
    pub fn expand(&self, c: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(c.ncols(), self.n_modes(), "expand: width mismatch");
        match &self.repr {
            Repr::Dense(b) => c.dot(b),
            Repr::Separable { f0, f1 } => {
                let (m0, r0) = f0.dim();
                let (m1, r1) = f1.dim();
                let nb = c.nrows();
                let mut t = Array2::zeros((nb * r0, m1));
                for b in 0..nb {
                    let cb = c.row(b);
                    let cb = cb.into_shape_with_order((m0, m1)).unwrap();
                    t.slice_mut(s![b * r0..(b + 1) * r0, ..]).assign(&f0.t().dot(&cb));
                }
                t.dot(f1).into_shape_with_order((nb, r0 * r1)).unwrap()
            }
        }
    }

    /// Quadrature coefficients `w * F * B^T`.
    pub fn analysis(&self, f: ArrayView2<f64>) -> Array2<f64> {
        let mut c = self.project(f);
        c *= self.weight;
        c
    }

    /// Max deviation of `B diag(w) B^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let b = self.basis_matrix();
        let g = self.analysis(b.view());
        let mut err: f64 = 0.0;
        for ((i, j), v) in g.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((v - target).abs());
        }
        err
    }
}

#[derive(Debug, Clone)]
pub struct EigenSystem {
    kind: BasisKind,
    a: Vec<f64>,
    lam: Vec<f64>,
    grid: GridSpec,
    modes_per_dim: Vec<usize>,
    gamma: Option<f64>,
    decay_floor: Option<f64>,
    own: GridTransform,
}

/// Cosine system on a 2D box; see [`build_cosine_basis`].
pub fn build_cosine_basis_2d(grid: &GridSpec, modes_per_dim: usize, decay_floor: f64) -> Result<EigenSystem> {
    if grid.dims() != 2 {
        return Err(Error::InvalidGrid(format!("expected a 2-D grid, got {} dims", grid.dims())));
    }
    build_cosine_basis(grid, &[modes_per_dim, modes_per_dim], decay_floor)
}

/// Neumann-Laplacian cosine eigenfunctions with `lam = 1` and
/// `a = max(pi^2 sum_d n_d^2 / W_d^2, decay_floor)`.
pub fn build_cosine_basis(grid: &GridSpec, modes: &[usize], decay_floor: f64) -> Result<EigenSystem> {
    grid.validate()?;
    if !(decay_floor > 0.0 && decay_floor.is_finite()) {
        return Err(Error::InvalidArgument(format!("decay_floor must be positive, got {decay_floor}")));
    }
    if modes.len() != grid.dims() {
        return Err(Error::InvalidArgument(format!(
            "{} mode counts for a {}-D grid",
            modes.len(),
            grid.dims()
        )));
    }
    for (d, (&m, &r)) in modes.iter().zip(&grid.res).enumerate() {
        if m == 0 || m > r {
            return Err(Error::InvalidArgument(format!(
                "axis {d}: {m} modes requested but resolution is {r} (need 1 <= modes <= resolution)"
            )));
        }
    }
    let own = GridTransform::cosine(grid, modes)?;
    let k = modes.iter().product::<usize>();
    let mut a = Vec::with_capacity(k);
    for idx in 0..k {
        let mut rem = idx;
        let mut eig = 0.0;
        for d in (0..modes.len()).rev() {
            let n = (rem % modes[d]) as f64;
            rem /= modes[d];
            eig += PI * PI * n * n / (grid.width(d) * grid.width(d));
        }
        a.push(eig.max(decay_floor));
    }
    Ok(EigenSystem {
        kind: BasisKind::AnalyticCosine,
        a,
        lam: vec![1.0; k],
        grid: grid.clone(),
        modes_per_dim: modes.to_vec(),
        gamma: None,
        decay_floor: Some(decay_floor),
        own,
    })
}

fn rbf(x: f64, y: f64, gamma: f64) -> f64 {
    (-(x - y) * (x - y) / gamma).exp()
}

/// Default jitter for the kernel eigendecomposition: `1e-8 * trace(G) / N`.
/// The RBF Gram matrix has unit diagonal, so this is `1e-8`.
pub const DEFAULT_KERNEL_JITTER: f64 = 1e-8;

/// Eigendecompose `w * G` with `G_ij = exp(-(p_i - p_j)^2 / gamma)`.
///
/// Eigenpairs whose Gram eigenvalue `mu / w` exceeds `jitter` are retained,
/// with eigenfunction values `v / sqrt(w)` so that they are orthonormal under
/// the rectangle rule. `lam` holds the operator eigenvalues `mu`.
pub fn build_kernel_basis_1d(grid: &GridSpec, gamma: f64, jitter: Option<f64>) -> Result<EigenSystem> {
    grid.validate()?;
    if grid.dims() != 1 {
        return Err(Error::InvalidGrid(format!("kernel basis needs a 1-D grid, got {} dims", grid.dims())));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let pts = grid.axis_points(0);
    let n = pts.len();
    let w = grid.weight();
    let jitter = jitter.unwrap_or(DEFAULT_KERNEL_JITTER);
    if !(jitter > 0.0) {
        return Err(Error::InvalidArgument(format!("jitter must be positive, got {jitter}")));
    }
    let g = DMatrix::from_fn(n, n, |i, j| w * rbf(pts[i], pts[j], gamma));
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let min_eig = eig.eigenvalues[order[n - 1]] / w;
    if min_eig < -jitter {
        return Err(Error::NotPsd { min_eig, jitter });
    }

    let kept: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] / w > jitter).collect();
    if kept.is_empty() {
        return Err(Error::NotPsd { min_eig, jitter });
    }
    let k = kept.len();
    let mut basis = Array2::zeros((k, n));
    let mut lam = Vec::with_capacity(k);
    for (row, &i) in kept.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        // Fix the sign so that the largest-magnitude entry is positive.
        let imax = (0..n).max_by(|&p, &q| v[p].abs().total_cmp(&v[q].abs())).unwrap();
        let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
        for p in 0..n {
            basis[[row, p]] = sign * v[p] / w.sqrt();
        }
        lam.push(eig.eigenvalues[i]);
    }
    let own = GridTransform::dense(grid, basis)?;
    Ok(EigenSystem {
        kind: BasisKind::NumericalKernel,
        a: vec![0.5; k],
        lam,
        grid: grid.clone(),
        modes_per_dim: vec![k],
        gamma: Some(gamma),
        decay_floor: None,
        own,
    })
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    dims: usize,
    res: Vec<usize>,
    bounds: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EigenDoc {
    version: u32,
    kind: BasisKind,
    #[serde(rename = "K")]
    k: usize,
    a: Vec<f64>,
    lam: Vec<f64>,
    grid: GridDoc,
    basis: String,
    modes_per_dim: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decay_floor: Option<f64>,
}

impl EigenSystem {
    /// Same eigenfunctions with a different spectrum: an operator pair
    /// `(A, Q)` that shares this basis. Requires positive, finite values.
    pub fn with_spectrum(&self, a: Vec<f64>, lam: Vec<f64>) -> Result<Self> {
        if a.len() != self.k() || lam.len() != self.k() {
            return Err(Error::Shape(format!("spectrum of length ({}, {}) for {} modes", a.len(), lam.len(), self.k())));
        }
        if a.iter().chain(&lam).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("a and lam must be positive and finite".into()));
        }
        Ok(EigenSystem { a, lam, ..self.clone() })
    }

    /// Keep the `k` leading modes of a kernel system (largest eigenvalues first).
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if self.kind != BasisKind::NumericalKernel {
            return Err(Error::Unsupported("cosine systems are sized by modes per axis".into()));
        }
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!("cannot keep {k} of {} modes", self.k())));
        }
        let basis = self.own.basis_matrix().slice(s![..k, ..]).to_owned();
        Ok(EigenSystem {
            a: self.a[..k].to_vec(),
            lam: self.lam[..k].to_vec(),
            modes_per_dim: vec![k],
            own: GridTransform::dense(&self.grid, basis)?,
            ..self.clone()
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of retained modes.
    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn modes_per_dim(&self) -> &[usize] {
        &self.modes_per_dim
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn decay_floor(&self) -> Option<f64> {
        self.decay_floor
    }

    /// Transform on the grid the system was built on.
    pub fn transform(&self) -> &GridTransform {
        &self.own
    }

    pub fn basis_matrix(&self) -> Array2<f64> {
        self.own.basis_matrix()
    }

    /// Transform evaluating the retained eigenfunctions on `target`.
    ///
    /// Cosine systems evaluate analytically on any grid over the same domain.
    /// Kernel systems only support their own grid unless `nystrom` is set.
    pub fn transform_for(&self, target: &GridSpec, nystrom: bool) -> Result<Cow<'_, GridTransform>> {
        target.validate()?;
        if *target == self.grid {
            return Ok(Cow::Borrowed(&self.own));
        }
        if !target.same_domain(&self.grid) {
            return Err(Error::GridMismatch(format!(
                "target bounds {:?} differ from basis bounds {:?}",
                target.bounds, self.grid.bounds
            )));
        }
        match self.kind {
            BasisKind::AnalyticCosine => Ok(Cow::Owned(GridTransform::cosine(target, &self.modes_per_dim)?)),
            BasisKind::NumericalKernel if nystrom => Ok(Cow::Owned(self.nystrom(target)?)),
            BasisKind::NumericalKernel => Err(Error::GridMismatch(format!(
                "kernel eigen-system is tabulated on {:?} points; resolution {:?} needs the Nystrom extension",
                self.grid.res, target.res
            ))),
        }
    }

    /// `phi_k(x) = (1 / mu_k) sum_i w k(x, p_i) phi_k(p_i)`.
    fn nystrom(&self, target: &GridSpec) -> Result<GridTransform> {
        let gamma = self.gamma.expect("kernel system carries gamma");
        let src = self.grid.axis_points(0);
        let dst = target.axis_points(0);
        let w = self.grid.weight();
        let kx = Array2::from_shape_fn((src.len(), dst.len()), |(i, j)| w * rbf(src[i], dst[j], gamma));
        let Repr::Dense(b) = &self.own.repr else { unreachable!("kernel systems are dense") };
        let mut out = b.dot(&kx);
        for (mut row, &mu) in out.axis_iter_mut(Axis(0)).zip(&self.lam) {
            row /= mu;
        }
        GridTransform::dense(target, out)
    }

    pub fn to_json(&self) -> Result<String> {
        let basis = self.basis_matrix();
        let doc = EigenDoc {
            version: EIGS_VERSION,
            kind: self.kind,
            k: self.k(),
            a: self.a.clone(),
            lam: self.lam.clone(),
            grid: GridDoc { dims: self.grid.dims(), res: self.grid.res.clone(), bounds: self.grid.bounds.clone() },
            basis: encode_f64s(basis.as_slice().expect("standard layout")),
            modes_per_dim: self.modes_per_dim.clone(),
            gamma: self.gamma,
            decay_floor: self.decay_floor,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: EigenDoc = serde_json::from_str(s)?;
        if doc.version != EIGS_VERSION {
            return Err(Error::Version { expected: EIGS_VERSION, found: doc.version });
        }
        let grid = GridSpec::new(doc.grid.res, doc.grid.bounds)?;
        if doc.grid.dims != grid.dims() {
            return Err(Error::Serialization("grid.dims disagrees with res".into()));
        }
        let k = doc.k;
        if doc.a.len() != k || doc.lam.len() != k || doc.modes_per_dim.iter().product::<usize>() != k {
            return Err(Error::Serialization("mode counts disagree with K".into()));
        }
        if doc.a.iter().chain(&doc.lam).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Serialization("a and lam must be positive and finite".into()));
        }
        let values = decode_f64s(&doc.basis)?;
        if values.len() != k * grid.len() {
            return Err(Error::Serialization(format!(
                "basis payload has {} values, expected {}",
                values.len(),
                k * grid.len()
            )));
        }
        let stored = Array2::from_shape_vec((k, grid.len()), values).unwrap();
        let own = match doc.kind {
            BasisKind::AnalyticCosine => {
                let t = GridTransform::cosine(&grid, &doc.modes_per_dim)?;
                let diff = (&t.basis_matrix() - &stored).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if diff > 1e-12 {
                    return Err(Error::Serialization(format!(
                        "stored cosine basis deviates from the analytic one by {diff:e}"
                    )));
                }
                t
            }
            BasisKind::NumericalKernel => {
                if doc.gamma.is_none() {
                    return Err(Error::Serialization("kernel system without gamma".into()));
                }
                GridTransform::dense(&grid, stored)?
            }
        };
        Ok(EigenSystem {
            kind: doc.kind,
            a: doc.a,
            lam: doc.lam,
            grid,
            modes_per_dim: doc.modes_per_dim,
            gamma: doc.gamma,
            decay_floor: doc.decay_floor,
            own,
        })
    }
}

/// Eigenbasis coefficients of a function.
#[derive(Debug, Clone)]
pub struct SpectralField {
    pub eigs: Arc<EigenSystem>,
    pub coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(eigs: Arc<EigenSystem>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != eigs.k() {
            return Err(Error::Shape(format!("{} coefficients for {} modes", coeffs.len(), eigs.k())));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { step: 0, what: "spectral coefficient".into() });
        }
        Ok(SpectralField { eigs, coeffs })
    }

    pub fn zeros(eigs: Arc<EigenSystem>) -> Self {
        let k = eigs.k();
        SpectralField { eigs, coeffs: vec![0.0; k] }
    }
}

/// Quadrature inner products with the retained eigenfunctions.
pub fn to_spectral(f: &GridField, eigs: &Arc<EigenSystem>) -> Result<SpectralField> {
    if f.grid != *eigs.grid() {
        return Err(Error::GridMismatch(format!(
            "field grid {:?} {:?} vs basis grid {:?} {:?}",
            f.grid.res,
            f.grid.bounds,
            eigs.grid().res,
            eigs.grid().bounds
        )));
    }
    let view = ArrayView2::from_shape((1, f.values.len()), &f.values).unwrap();
    let c = eigs.transform().analysis(view);
    Ok(SpectralField { eigs: eigs.clone(), coeffs: c.into_raw_vec_and_offset().0 })
}

/// Evaluate the expansion on `target`; kernel systems require their own grid.
pub fn from_spectral(c: &SpectralField, target: &GridSpec) -> Result<GridField> {
    from_spectral_with(c, target, false)
}

/// As [`from_spectral`], optionally using the Nystrom extension for kernel systems.
pub fn from_spectral_with(c: &SpectralField, target: &GridSpec, nystrom: bool) -> Result<GridField> {
    let t = c.eigs.transform_for(target, nystrom)?;
    let view = ArrayView2::from_shape((1, c.coeffs.len()), &c.coeffs).unwrap();
    let v = t.expand(view);
    GridField::new(target.clone(), v.into_raw_vec_and_offset().0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    Bilinear,
    Spectral,
}

/// Move a field to another resolution over the same domain.
///
/// `Bilinear` interpolates between cell centres (clamped at the boundary
/// half-cells) and only upsamples. `Spectral` expands the field in the full
/// cosine basis of its own grid, truncates to the modes the target can carry
/// and evaluates them on the target, so upsampling zero-pads and downsampling
/// is the exact spectral restriction.
pub fn resample_initial(f: &GridField, target: &GridSpec, method: ResampleMethod) -> Result<GridField> {
    target.validate()?;
    if f.grid.dims() != target.dims() {
        return Err(Error::GridMismatch(format!("{}-D field, {}-D target", f.grid.dims(), target.dims())));
    }
    if !f.grid.same_domain(target) {
        return Err(Error::GridMismatch("resampling requires identical domain bounds".into()));
    }
    if *target == f.grid {
        return Ok(f.clone());
    }
    match method {
        ResampleMethod::Bilinear => bilinear(f, target),
        ResampleMethod::Spectral => spectral_resample(f, target),
    }
}

fn spectral_resample(f: &GridField, target: &GridSpec) -> Result<GridField> {
    let modes: Vec<usize> = f.grid.res.iter().zip(&target.res).map(|(&a, &b)| a.min(b)).collect();
    let src = GridTransform::cosine(&f.grid, &modes)?;
    let dst = GridTransform::cosine(target, &modes)?;
    let view = ArrayView2::from_shape((1, f.values.len()), &f.values).unwrap();
    let c = src.analysis(view);
    GridField::new(target.clone(), dst.expand(c.view()).into_raw_vec_and_offset().0)
}

/// Fractional source index and interpolation weight for each target point on one axis.
fn axis_stencil(src: &GridSpec, dst: &GridSpec, axis: usize) -> Vec<(usize, f64)> {
    let r = src.res[axis];
    let h = src.spacing(axis);
    let lo = src.bounds[axis][0];
    dst.axis_points(axis)
        .into_iter()
        .map(|x| {
            let s = ((x - lo) / h - 0.5).clamp(0.0, (r - 1) as f64);
            let i = (s.floor() as usize).min(r - 2);
            (i, s - i as f64)
        })
        .collect()
}

fn bilinear(f: &GridField, target: &GridSpec) -> Result<GridField> {
    if f.grid.res.iter().zip(&target.res).any(|(s, t)| t < s) {
        return Err(Error::InvalidArgument(format!(
            "bilinear resampling only upsamples ({:?} -> {:?}); use spectral restriction",
            f.grid.res, target.res
        )));
    }
    let v = &f.values;
    let values = match target.dims() {
        1 => axis_stencil(&f.grid, target, 0)
            .into_iter()
            .map(|(i, t)| (1.0 - t) * v[i] + t * v[i + 1])
            .collect(),
        _ => {
            let r1 = f.grid.res[1];
            let sx = axis_stencil(&f.grid, target, 0);
            let sy = axis_stencil(&f.grid, target, 1);
            let mut out = Vec::with_capacity(target.len());
            for &(i, tx) in &sx {
                for &(j, ty) in &sy {
                    let at = |a: usize, b: usize| v[a * r1 + b];
                    out.push(
                        (1.0 - tx) * ((1.0 - ty) * at(i, j) + ty * at(i, j + 1))
                            + tx * ((1.0 - ty) * at(i + 1, j) + ty * at(i + 1, j + 1)),
                    );
                }
            }
            out
        }
    };
    GridField::new(target.clone(), values)
}
