//! Regular grids and functions sampled on them.
//!
//! Grid points are cell centres: along an axis with `res` cells on
//! `[lo, hi]` the i-th point is `lo + (i + 1/2) * (hi - lo) / res`. The
//! quadrature rule is the rectangle rule with the uniform weight equal to the
//! cell volume. For 2D grids values are stored row-major with the first axis
//! outermost: index `i0 * res1 + i1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub res: Vec<usize>,
    pub bounds: Vec<[f64; 2]>,
}

impl GridSpec {
    pub fn new(res: Vec<usize>, bounds: Vec<[f64; 2]>) -> Result<Self> {
        let g = GridSpec { res, bounds };
        g.validate()?;
        Ok(g)
    }

    pub fn line(res: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![res], vec![[lo, hi]])
    }

    pub fn square(res: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![res, res], vec![[lo, hi], [lo, hi]])
    }

    pub fn validate(&self) -> Result<()> {
        if self.res.is_empty() || self.res.len() > 2 || self.res.len() != self.bounds.len() {
            return Err(Error::InvalidGrid(format!(
                "expected 1 or 2 dims with matching bounds, got res {:?} bounds {:?}",
                self.res, self.bounds
            )));
        }
        for (r, b) in self.res.iter().zip(&self.bounds) {
            if *r < 2 {
                return Err(Error::InvalidGrid(format!("resolution {r} < 2")));
            }
            if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                return Err(Error::InvalidGrid(format!("bad bounds {b:?}")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.res.len()
    }

    pub fn len(&self) -> usize {
        self.res.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.bounds[axis][1] - self.bounds[axis][0]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.width(axis) / self.res[axis] as f64
    }

    /// Quadrature weight of every grid point (cell volume).
    pub fn weight(&self) -> f64 {
        (0..self.dims()).map(|d| self.spacing(d)).product()
    }

    /// Total measure of the domain.
    pub fn volume(&self) -> f64 {
        (0..self.dims()).map(|d| self.width(d)).product()
    }

    pub fn axis_points(&self, axis: usize) -> Vec<f64> {
        let h = self.spacing(axis);
        let lo = self.bounds[axis][0];
        (0..self.res[axis]).map(|i| lo + (i as f64 + 0.5) * h).collect()
    }

    /// All grid points, in storage order; each point has `dims()` coordinates.
    pub fn points(&self) -> Vec<Vec<f64>> {
        match self.dims() {
            1 => self.axis_points(0).into_iter().map(|x| vec![x]).collect(),
            _ => {
                let xs = self.axis_points(0);
                let ys = self.axis_points(1);
                let mut out = Vec::with_capacity(self.len());
                for &x in &xs {
                    for &y in &ys {
                        out.push(vec![x, y]);
                    }
                }
                out
            }
        }
    }

    /// Same domain, different resolution.
    pub fn with_res(&self, res: Vec<usize>) -> Result<Self> {
        Self::new(res, self.bounds.clone())
    }

    pub fn same_domain(&self, other: &GridSpec) -> bool {
        self.bounds == other.bounds && self.dims() == other.dims()
    }

    /// Index of the grid point that coincides with `p` (within 1e-9 of a cell width).
    pub fn index_of(&self, p: &[f64]) -> Option<usize> {
        if p.len() != self.dims() {
            return None;
        }
        let mut idx = 0;
        for d in 0..self.dims() {
            let h = self.spacing(d);
            let f = (p[d] - self.bounds[d][0]) / h - 0.5;
            let i = f.round();
            if (f - i).abs() > 1e-9 || i < 0.0 || i as usize >= self.res[d] {
                return None;
            }
            idx = idx * self.res[d] + i as usize;
        }
        Some(idx)
    }
}

/// A function given by its values at the points of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub channels: usize,
}

impl GridField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values but grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: 0, what: format!("grid value at index {i}") });
        }
        Ok(GridField { grid, values, channels: 1 })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        GridField { grid, values: vec![0.0; n], channels: 1 }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = grid.points().iter().map(|p| f(p)).collect();
        GridField { grid, values, channels: 1 }
    }

    /// Quadrature inner product.
    pub fn dot(&self, other: &GridField) -> f64 {
        self.grid.weight() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn integral(&self) -> f64 {
        self.grid.weight() * self.values.iter().sum::<f64>()
    }
}
