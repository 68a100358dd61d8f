//! Uniform grids on `[-L, L]^d` and sampled scalar/vector/matrix fields.
//!
//! The grid is the desk-scale stand-in for whole space: odd point counts keep
//! the origin on a node, and every field is immutable after construction.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default cap on total node count (per field component).
pub const DEFAULT_NODE_BUDGET: usize = 1 << 24;

/// A uniform tensor grid on `[-L, L]^d` with an odd number of points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    d: usize,
    half_width: f64,
    points_per_axis: usize,
}

impl GridSpec {
    pub fn new(d: usize, half_width: f64, points_per_axis: usize) -> Result<Self> {
        Self::with_node_budget(d, half_width, points_per_axis, DEFAULT_NODE_BUDGET)
    }

    pub fn with_node_budget(
        d: usize,
        half_width: f64,
        points_per_axis: usize,
        budget: usize,
    ) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::input(format!("grid dimension must be 1..=3, got {d}")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::input("grid half width must be positive and finite"));
        }
        if points_per_axis < 3 || points_per_axis % 2 == 0 {
            return Err(Error::input(format!(
                "points per axis must be odd and >= 3, got {points_per_axis}"
            )));
        }
        let nodes = points_per_axis.checked_pow(d as u32).ok_or_else(|| {
            Error::input("grid node count overflows usize")
        })?;
        if nodes > budget {
            return Err(Error::input(format!(
                "grid has {nodes} nodes, exceeding the node budget {budget}"
            )));
        }
        Ok(GridSpec {
            d,
            half_width,
            points_per_axis,
        })
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    /// Grid spacing `2L / (N - 1)`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_axis - 1) as f64
    }

    /// Volume element `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    pub fn node_count(&self) -> usize {
        self.points_per_axis.pow(self.d as u32)
    }

    /// Coordinate of the `i`-th node along any axis: `-L + i h`.
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Strides of the row-major node ordering (last axis fastest).
    pub fn strides(&self) -> [usize; 3] {
        let n = self.points_per_axis;
        match self.d {
            1 => [1, 0, 0],
            2 => [n, 1, 0],
            _ => [n * n, n, 1],
        }
    }

    pub fn index_of(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.d);
        let s = self.strides();
        multi.iter().zip(s.iter()).map(|(i, st)| i * st).sum()
    }

    pub fn multi_index(&self, mut idx: usize) -> [usize; 3] {
        let s = self.strides();
        let mut out = [0usize; 3];
        for k in 0..self.d {
            out[k] = idx / s[k];
            idx %= s[k].max(1);
        }
        out
    }

    /// Writes the coordinates of node `idx` into `out[..d]`.
    pub fn position(&self, idx: usize, out: &mut [f64]) {
        let mi = self.multi_index(idx);
        for k in 0..self.d {
            out[k] = self.axis_coord(mi[k]);
        }
    }

    pub fn position_vec(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.position(idx, &mut out);
        out
    }

    /// Index of the origin node (exists because N is odd).
    pub fn center_index(&self) -> usize {
        let mid = (self.points_per_axis - 1) / 2;
        self.index_of(&vec![mid; self.d])
    }

    /// Index of the node closest to `x` (components clamped into the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let h = self.spacing();
        let mut multi = vec![0usize; self.d];
        for k in 0..self.d {
            let f = ((x[k] + self.half_width) / h).round();
            multi[k] = (f.max(0.0) as usize).min(self.points_per_axis - 1);
        }
        self.index_of(&multi)
    }

    /// True when the node touches the boundary of the box.
    pub fn is_boundary(&self, idx: usize) -> bool {
        let mi = self.multi_index(idx);
        (0..self.d).any(|k| mi[k] == 0 || mi[k] == self.points_per_axis - 1)
    }

    /// Max-norm distance from node `idx` to the boundary of the box.
    pub fn boundary_distance(&self, idx: usize) -> f64 {
        let mi = self.multi_index(idx);
        let h = self.spacing();
        let n = self.points_per_axis - 1;
        let mut steps = usize::MAX;
        for k in 0..self.d {
            steps = steps.min(mi[k]).min(n - mi[k]);
        }
        steps as f64 * h
    }
}

/// Tensor rank of a sampled field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRank {
    Scalar,
    Vector,
    /// Symmetric matrix stored packed: upper triangle row by row,
    /// `(00, 01, .., 0d-1, 11, 12, ..)`.
    SymMatrix,
}

impl FieldRank {
    pub fn components(&self, d: usize) -> usize {
        match self {
            FieldRank::Scalar => 1,
            FieldRank::Vector => d,
            FieldRank::SymMatrix => d * (d + 1) / 2,
        }
    }

    pub fn tag(&self) -> u32 {
        match self {
            FieldRank::Scalar => 0,
            FieldRank::Vector => 1,
            FieldRank::SymMatrix => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(FieldRank::Scalar),
            1 => Ok(FieldRank::Vector),
            2 => Ok(FieldRank::SymMatrix),
            _ => Err(Error::Format(format!("unknown field rank tag {tag}"))),
        }
    }
}

/// Packed index of entry `(i, j)` of a symmetric `d x d` matrix.
pub fn sym_index(d: usize, i: usize, j: usize) -> usize {
    let (r, c) = if i <= j { (i, j) } else { (j, i) };
    // offset of row r in the packed upper triangle
    r * (2 * d - r + 1) / 2 + (c - r)
}

/// One value per node per component; immutable after construction.
///
/// Component planes are stored contiguously (`values[c * nodes + node]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    grid: GridSpec,
    rank: FieldRank,
    values: Vec<f64>,
}

impl SampledField {
    pub fn from_values(grid: GridSpec, rank: FieldRank, values: Vec<f64>) -> Result<Self> {
        let expect = grid.node_count() * rank.components(grid.dimension());
        if values.len() != expect {
            return Err(Error::input(format!(
                "field value count {} does not match {} nodes x {} components",
                values.len(),
                grid.node_count(),
                rank.components(grid.dimension())
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("field contains non-finite values"));
        }
        Ok(SampledField { grid, rank, values })
    }

    pub fn zeros(grid: GridSpec, rank: FieldRank) -> Self {
        let n = grid.node_count() * rank.components(grid.dimension());
        SampledField {
            grid,
            rank,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        SampledField {
            grid,
            rank: FieldRank::Scalar,
            values: vec![value; grid.node_count()],
        }
    }

    /// Sample a scalar function of position.
    pub fn from_scalar_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let d = grid.dimension();
        let values: Vec<f64> = (0..grid.node_count())
            .into_par_iter()
            .map(|idx| {
                let mut x = [0.0; 3];
                grid.position(idx, &mut x[..d]);
                f(&x[..d])
            })
            .collect();
        Self::from_values(grid, FieldRank::Scalar, values)
    }

    /// Sample a vector function of position (component-major storage).
    pub fn from_vector_fn(grid: GridSpec, f: impl Fn(&[f64], usize) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let d = grid.dimension();
        let nodes = grid.node_count();
        let values: Vec<f64> = (0..d * nodes)
            .into_par_iter()
            .map(|flat| {
                let c = flat / nodes;
                let idx = flat % nodes;
                let mut x = [0.0; 3];
                grid.position(idx, &mut x[..d]);
                f(&x[..d], c)
            })
            .collect();
        Self::from_values(grid, FieldRank::Vector, values)
    }

    /// Sample a symmetric-matrix function; `f(x, i, j)` with `i <= j`.
    pub fn from_matrix_fn(
        grid: GridSpec,
        f: impl Fn(&[f64], usize, usize) -> f64 + Sync,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let d = grid.dimension();
        let nodes = grid.node_count();
        let comps = FieldRank::SymMatrix.components(d);
        let pairs: Vec<(usize, usize)> = (0..d)
            .flat_map(|i| (i..d).map(move |j| (i, j)))
            .collect();
        let values: Vec<f64> = (0..comps * nodes)
            .into_par_iter()
            .map(|flat| {
                let c = flat / nodes;
                let idx = flat % nodes;
                let (i, j) = pairs[c];
                let mut x = [0.0; 3];
                grid.position(idx, &mut x[..d]);
                f(&x[..d], i, j)
            })
            .collect();
        Self::from_values(grid, FieldRank::SymMatrix, values)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn rank(&self) -> FieldRank {
        self.rank
    }

    pub fn components(&self) -> usize {
        self.rank.components(self.grid.dimension())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn value(&self, node: usize, c: usize) -> f64 {
        self.values[c * self.grid.node_count() + node]
    }

    /// Scalar shortcut.
    pub fn at(&self, node: usize) -> f64 {
        debug_assert_eq!(self.rank, FieldRank::Scalar);
        self.values[node]
    }

    /// Replace values by `f(value)`, preserving grid and rank.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let values: Vec<f64> = self.values.par_iter().map(|&v| f(v)).collect();
        Self::from_values(self.grid, self.rank, values)
    }

    /// Linear combination `alpha * self + beta * other`.
    pub fn linear_comb(&self, alpha: f64, other: &SampledField, beta: f64) -> Result<Self> {
        if self.grid != other.grid || self.rank != other.rank {
            return Err(Error::input("field shapes do not match"));
        }
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Self::from_values(self.grid, self.rank, values)
    }

    /// Pointwise Euclidean magnitude of a vector field (scalar fields pass
    /// through as absolute values).
    pub fn magnitude(&self) -> SampledField {
        let n = self.grid.node_count();
        match self.rank {
            FieldRank::Scalar => SampledField {
                grid: self.grid,
                rank: FieldRank::Scalar,
                values: self.values.iter().map(|v| v.abs()).collect(),
            },
            FieldRank::Vector => {
                let d = self.grid.dimension();
                let mut out = vec![0.0; n];
                for c in 0..d {
                    let plane = self.component(c);
                    for (o, v) in out.iter_mut().zip(plane) {
                        *o += v * v;
                    }
                }
                for o in out.iter_mut() {
                    *o = o.sqrt();
                }
                SampledField {
                    grid: self.grid,
                    rank: FieldRank::Scalar,
                    values: out,
                }
            }
            FieldRank::SymMatrix => panic!("magnitude of a matrix field is not defined"),
        }
    }

    /// Pointwise squared magnitude.
    pub fn magnitude_squared(&self) -> SampledField {
        let m = self.magnitude();
        SampledField {
            grid: m.grid,
            rank: FieldRank::Scalar,
            values: m.values.iter().map(|v| v * v).collect(),
        }
    }

    /// Discrete L1 norm `sum |v| h^d` (scalar fields).
    pub fn l1_norm(&self) -> f64 {
        debug_assert_eq!(self.rank, FieldRank::Scalar);
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    /// Discrete mass `sum v h^d` (scalar fields).
    pub fn mass(&self) -> f64 {
        debug_assert_eq!(self.rank, FieldRank::Scalar);
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Full symmetric matrix at a node (matrix fields only).
    pub fn matrix_at(&self, node: usize) -> [[f64; 3]; 3] {
        debug_assert_eq!(self.rank, FieldRank::SymMatrix);
        let d = self.grid.dimension();
        let mut m = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                m[i][j] = self.value(node, sym_index(d, i, j));
            }
        }
        m
    }

    /// Inverse of the symmetric matrix at a node (d <= 3, closed form).
    pub fn matrix_inverse_at(&self, node: usize) -> Result<[[f64; 3]; 3]> {
        let d = self.grid.dimension();
        let m = self.matrix_at(node);
        let mut inv = [[0.0; 3]; 3];
        match d {
            1 => {
                if m[0][0] == 0.0 {
                    return Err(Error::Numerical("singular matrix sample".into()));
                }
                inv[0][0] = 1.0 / m[0][0];
            }
            2 => {
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                if det == 0.0 {
                    return Err(Error::Numerical("singular matrix sample".into()));
                }
                inv[0][0] = m[1][1] / det;
                inv[1][1] = m[0][0] / det;
                inv[0][1] = -m[0][1] / det;
                inv[1][0] = -m[1][0] / det;
            }
            _ => {
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                if det == 0.0 {
                    return Err(Error::Numerical("singular matrix sample".into()));
                }
                for i in 0..3 {
                    for j in 0..3 {
                        let c = cofactor3(&m, j, i);
                        inv[i][j] = c / det;
                    }
                }
            }
        }
        Ok(inv)
    }
}

fn cofactor3(m: &[[f64; 3]; 3], i: usize, j: usize) -> f64 {
    let rows: Vec<usize> = (0..3).filter(|&r| r != i).collect();
    let cols: Vec<usize> = (0..3).filter(|&c| c != j).collect();
    let minor = m[rows[0]][cols[0]] * m[rows[1]][cols[1]] - m[rows[0]][cols[1]] * m[rows[1]][cols[0]];
    if (i + j) % 2 == 0 {
        minor
    } else {
        -minor
    }
}

/// Uniform ellipticity window `sigma I <= a(x) <= xi I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticityWindow {
    pub sigma: f64,
    pub xi: f64,
}

impl EllipticityWindow {
    pub fn new(sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma.is_finite() && xi.is_finite() && 0.0 < sigma && sigma < xi) {
            return Err(Error::input(format!(
                "ellipticity window requires 0 < sigma < xi, got sigma={sigma}, xi={xi}"
            )));
        }
        Ok(EllipticityWindow { sigma, xi })
    }

    /// Probe vectors: the `d` axis vectors plus the `d(d-1)/2` normalized
    /// diagonal vectors `(e_i + e_j)/sqrt(2)`.
    pub fn probe_vectors(d: usize) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..d {
            let mut v = [0.0; 3];
            v[i] = 1.0;
            out.push(v);
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..d {
            for j in (i + 1)..d {
                let mut v = [0.0; 3];
                v[i] = s;
                v[j] = s;
                out.push(v);
            }
        }
        out
    }

    /// Checks every matrix sample against the window on the probe set, to
    /// tolerance 1e-12.
    pub fn check(&self, a: &SampledField) -> Result<()> {
        if a.rank() != FieldRank::SymMatrix {
            return Err(Error::input("ellipticity probe expects a matrix field"));
        }
        let d = a.grid().dimension();
        let probes = Self::probe_vectors(d);
        const TOL: f64 = 1e-12;
        for node in 0..a.grid().node_count() {
            let m = a.matrix_at(node);
            for v in &probes {
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += v[i] * m[i][j] * v[j];
                    }
                }
                if q < self.sigma - TOL || q > self.xi + TOL {
                    return Err(Error::input(format!(
                        "ellipticity probe failed at node {node}: v.A.v = {q}, window [{}, {}]",
                        self.sigma, self.xi
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Centered-difference partial derivative of a scalar field along `axis`
/// (one-sided at the boundary).
pub fn central_difference(f: &SampledField, axis: usize) -> SampledField {
    debug_assert_eq!(f.rank(), FieldRank::Scalar);
    let grid = f.grid();
    let n = grid.points_per_axis();
    let h = grid.spacing();
    let stride = grid.strides()[axis];
    let vals = f.component(0);
    let mut out = vec![0.0; grid.node_count()];
    for (idx, o) in out.iter_mut().enumerate() {
        let mi = grid.multi_index(idx);
        let i = mi[axis];
        *o = if i == 0 {
            (vals[idx + stride] - vals[idx]) / h
        } else if i == n - 1 {
            (vals[idx] - vals[idx - stride]) / h
        } else {
            (vals[idx + stride] - vals[idx - stride]) / (2.0 * h)
        };
    }
    SampledField::from_values(grid, FieldRank::Scalar, out).expect("finite differences")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_coordinates_are_exact() {
        let g = GridSpec::new(2, 1.0, 5).unwrap();
        assert_eq!(g.spacing(), 0.5);
        assert_eq!(g.axis_coord(0), -1.0);
        assert_eq!(g.axis_coord(4), 1.0);
        assert_eq!(g.axis_coord(2), 0.0);
        let c = g.center_index();
        let p = g.position_vec(c);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn grid_rejects_even_or_tiny() {
        assert!(GridSpec::new(2, 1.0, 4).is_err());
        assert!(GridSpec::new(2, 1.0, 1).is_err());
        assert!(GridSpec::new(4, 1.0, 5).is_err());
        assert!(GridSpec::new(3, 1.0, 1025).is_err()); // node budget
    }

    #[test]
    fn field_rejects_nan() {
        let g = GridSpec::new(1, 1.0, 5).unwrap();
        let r = SampledField::from_values(g, FieldRank::Scalar, vec![0.0, 1.0, f64::NAN, 0.0, 0.0]);
        assert!(r.is_err());
    }

    #[test]
    fn sym_index_layout() {
        // d=3: (00,01,02,11,12,22)
        assert_eq!(sym_index(3, 0, 0), 0);
        assert_eq!(sym_index(3, 0, 2), 2);
        assert_eq!(sym_index(3, 1, 1), 3);
        assert_eq!(sym_index(3, 2, 1), 4);
        assert_eq!(sym_index(3, 2, 2), 5);
    }

    #[test]
    fn matrix_inverse_roundtrip() {
        let g = GridSpec::new(3, 1.0, 3).unwrap();
        let a = SampledField::from_matrix_fn(g, |x, i, j| {
            let base = if i == j { 2.0 + 0.1 * x[i] } else { 0.3 };
            base
        })
        .unwrap();
        let node = 13;
        let m = a.matrix_at(node);
        let inv = a.matrix_inverse_at(node).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += m[i][k] * inv[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((acc - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ellipticity_probe_accepts_identity() {
        let g = GridSpec::new(2, 1.0, 5).unwrap();
        let a = SampledField::from_matrix_fn(g, |_x, i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        EllipticityWindow::new(0.5, 2.0).unwrap().check(&a).unwrap();
        assert!(EllipticityWindow::new(1.5, 2.0).unwrap().check(&a).is_err());
    }

    #[test]
    fn central_difference_linear_exact() {
        let g = GridSpec::new(2, 1.0, 9).unwrap();
        let f = SampledField::from_scalar_fn(g, |x| 3.0 * x[0] - 2.0 * x[1]).unwrap();
        let gx = central_difference(&f, 0);
        let gy = central_difference(&f, 1);
        for idx in 0..g.node_count() {
            assert!((gx.at(idx) - 3.0).abs() < 1e-12);
            assert!((gy.at(idx) + 2.0).abs() < 1e-12);
        }
    }
}
