//! Node-centered tensor grids and scalar fields on them.
//!
//! A grid on `[lo, hi]` with `nx` nodes per axis has spacing
//! `dx = (hi - lo) / (nx - 1)` and node coordinates `lo + i * dx`. Every
//! node carries the cell `[x - dx/2, x + dx/2]`, so sums weighted with the
//! cell volume are the quadrature used for mass, moments, and distances.
//! Storage is row-major: in 2d the node `(i, j)` lives at `i * nx[1] + j`.

use thiserror::Error;

use crate::model::MAX_DIM;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dim must be 1 or 2, got {0}")]
    BadDim(usize),
    #[error("axis {axis}: lower bound {lo} must be below upper bound {hi}")]
    BadBounds { axis: usize, lo: f64, hi: f64 },
    #[error("axis {axis}: need at least 2 nodes, got {nx}")]
    TooFewNodes { axis: usize, nx: usize },
    #[error("field has no mass to normalize")]
    ZeroMass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    dim: usize,
    lo: [f64; MAX_DIM],
    hi: [f64; MAX_DIM],
    nx: [usize; MAX_DIM],
    values: Vec<f64>,
}

impl GridField {
    /// Zero-valued field. Unused trailing axes are collapsed to one node.
    pub fn new(dim: usize, lo: &[f64], hi: &[f64], nx: &[usize]) -> Result<Self, GridError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(GridError::BadDim(dim));
        }
        let mut glo = [0.0; MAX_DIM];
        let mut ghi = [0.0; MAX_DIM];
        let mut gnx = [1usize; MAX_DIM];
        for a in 0..dim {
            if !(lo[a] < hi[a]) {
                return Err(GridError::BadBounds { axis: a, lo: lo[a], hi: hi[a] });
            }
            if nx[a] < 2 {
                return Err(GridError::TooFewNodes { axis: a, nx: nx[a] });
            }
            glo[a] = lo[a];
            ghi[a] = hi[a];
            gnx[a] = nx[a];
        }
        let len = gnx[0] * gnx[1];
        Ok(GridField { dim, lo: glo, hi: ghi, nx: gnx, values: vec![0.0; len] })
    }

    /// Field with values from a function of the node coordinates.
    pub fn from_fn<F>(
        dim: usize,
        lo: &[f64],
        hi: &[f64],
        nx: &[usize],
        mut f: F,
    ) -> Result<Self, GridError>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut field = Self::new(dim, lo, hi, nx)?;
        let mut x = [0.0; MAX_DIM];
        for idx in 0..field.values.len() {
            field.point_at(idx, &mut x);
            field.values[idx] = f(&x[..dim]);
        }
        Ok(field)
    }

    /// Zero field with the same geometry as `self`.
    pub fn like(&self) -> Self {
        GridField { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self, axis: usize) -> usize {
        self.nx[axis]
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.lo[axis]
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.hi[axis]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.nx[axis] - 1) as f64
    }

    pub fn min_dx(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).fold(f64::INFINITY, f64::min)
    }

    /// Quadrature weight of one node.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).product()
    }

    pub fn node(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + i as f64 * self.dx(axis)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.nx[1] + j
    }

    /// Writes the coordinates of the node with flat index `idx`; components
    /// beyond `dim` are zeroed.
    #[inline]
    pub fn point_at(&self, idx: usize, out: &mut [f64; MAX_DIM]) {
        let i = idx / self.nx[1];
        let j = idx % self.nx[1];
        out[0] = self.node(0, i);
        out[1] = if self.dim > 1 { self.node(1, j) } else { 0.0 };
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same shape and bitwise-identical bounds. Fields meant to be compared
    /// should be built from each other's geometry so this holds exactly.
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.nx == other.nx
            && self.lo.iter().zip(&other.lo).all(|(a, b)| a == b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a == b)
    }

    /// Total mass, summed in index order so results are reproducible.
    pub fn mass(&self) -> f64 {
        let s: f64 = self.values.iter().sum();
        s * self.cell_volume()
    }

    /// First moment (not divided by mass); components beyond `dim` are zero.
    pub fn first_moment(&self) -> [f64; MAX_DIM] {
        let mut m = [0.0; MAX_DIM];
        let mut x = [0.0; MAX_DIM];
        for (idx, &f) in self.values.iter().enumerate() {
            self.point_at(idx, &mut x);
            for a in 0..self.dim {
                m[a] += x[a] * f;
            }
        }
        let vol = self.cell_volume();
        for v in &mut m {
            *v *= vol;
        }
        m
    }

    /// Center of mass. Callers must ensure the field has mass.
    pub fn mean(&self) -> [f64; MAX_DIM] {
        let mass = self.mass();
        let mut m = self.first_moment();
        for v in &mut m {
            *v /= mass;
        }
        m
    }

    /// Half the second moment about the origin, the energy used in the
    /// moment diagnostics.
    pub fn energy(&self) -> f64 {
        let mut s = 0.0;
        let mut x = [0.0; MAX_DIM];
        for (idx, &f) in self.values.iter().enumerate() {
            self.point_at(idx, &mut x);
            let mut r2 = 0.0;
            for a in 0..self.dim {
                r2 += x[a] * x[a];
            }
            s += 0.5 * r2 * f;
        }
        s * self.cell_volume()
    }

    /// Rescales to unit mass, returning the mass before scaling.
    pub fn normalize_mass(&mut self) -> Result<f64, GridError> {
        let mass = self.mass();
        if !(mass > 0.0) {
            return Err(GridError::ZeroMass);
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(mass)
    }

    /// Multilinear interpolation at `x`, `None` outside the grid (with a
    /// small tolerance so boundary nodes of a matching grid stay inside).
    pub fn sample_linear(&self, x: &[f64]) -> Option<f64> {
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..self.dim {
            let dx = self.dx(a);
            let u = (x[a] - self.lo[a]) / dx;
            let tol = 1e-9;
            if u < -tol || u > (self.nx[a] - 1) as f64 + tol {
                return None;
            }
            let clamped = u.clamp(0.0, (self.nx[a] - 1) as f64);
            let i = (clamped.floor() as usize).min(self.nx[a] - 2);
            base[a] = i;
            frac[a] = clamped - i as f64;
        }
        if self.dim == 1 {
            let i = base[0];
            let w = frac[0];
            Some((1.0 - w) * self.values[i] + w * self.values[i + 1])
        } else {
            let (i, j) = (base[0], base[1]);
            let (u, v) = (frac[0], frac[1]);
            let f00 = self.values[self.idx(i, j)];
            let f01 = self.values[self.idx(i, j + 1)];
            let f10 = self.values[self.idx(i + 1, j)];
            let f11 = self.values[self.idx(i + 1, j + 1)];
            Some(
                (1.0 - u) * ((1.0 - v) * f00 + v * f01) + u * ((1.0 - v) * f10 + v * f11),
            )
        }
    }

    /// Integrates out the other axis of a 2d field, leaving the density of
    /// the coordinate on `axis`.
    pub fn marginal(&self, axis: usize) -> Result<GridField, GridError> {
        if self.dim != 2 {
            return Err(GridError::BadDim(self.dim));
        }
        let other = 1 - axis;
        let w = self.dx(other);
        let mut out = GridField::new(1, &[self.lo[axis]], &[self.hi[axis]], &[self.nx[axis]])?;
        for k in 0..self.nx[axis] {
            let mut s = 0.0;
            for m in 0..self.nx[other] {
                let idx = if axis == 0 { self.idx(k, m) } else { self.idx(m, k) };
                s += self.values[idx];
            }
            out.values[k] = s * w;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_spacing_and_mass() {
        let mut g = GridField::new(1, &[-5.0], &[5.0], &[101]).unwrap();
        assert_eq!(g.dx(0), 0.1);
        assert_eq!(g.node(0, 0), -5.0);
        assert_eq!(g.node(0, 100), 5.0);
        for v in g.values_mut() {
            *v = 2.0;
        }
        assert!((g.mass() - 2.0 * 10.1).abs() < 1e-12);
    }

    #[test]
    fn linear_sampling_is_exact_on_linear_data() {
        let g = GridField::from_fn(2, &[0.0, 0.0], &[1.0, 2.0], &[11, 21], |x| {
            3.0 * x[0] - x[1] + 0.5
        })
        .unwrap();
        let v = g.sample_linear(&[0.37, 1.23]).unwrap();
        assert!((v - (3.0 * 0.37 - 1.23 + 0.5)).abs() < 1e-12);
        assert!(g.sample_linear(&[1.5, 0.0]).is_none());
    }

    #[test]
    fn marginal_of_separable_field() {
        let g = GridField::from_fn(2, &[-1.0, -2.0], &[1.0, 2.0], &[41, 81], |x| {
            (1.0 - x[0] * x[0]) * (4.0 - x[1] * x[1])
        })
        .unwrap();
        let m0 = g.marginal(0).unwrap();
        // integral of (4 - y^2) over [-2, 2] by the same node quadrature
        let gy = GridField::from_fn(1, &[-2.0], &[2.0], &[81], |x| 4.0 - x[0] * x[0]).unwrap();
        let iy = gy.mass();
        for k in [0usize, 7, 20, 40] {
            let x = m0.node(0, k);
            assert!((m0.values()[k] - (1.0 - x * x) * iy).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_and_energy_of_point_mass() {
        let mut g = GridField::new(2, &[-1.0, -1.0], &[1.0, 1.0], &[21, 21]).unwrap();
        let idx = g.idx(15, 5);
        g.values_mut()[idx] = 1.0;
        let m = g.mean();
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] + 0.5).abs() < 1e-12);
        let e = g.energy();
        let vol = g.cell_volume();
        assert!((e - 0.5 * (0.25 + 0.25) * vol).abs() < 1e-12);
    }
}
