//! `-∇·(a ∇p) = f` on the unit square with Dirichlet data, discretized by a
//! 5-point finite-volume scheme on a uniform node lattice.
//!
//! Face conductances are harmonic means of the nodal coefficient, so the
//! discrete operator is symmetric positive definite and the same banded
//! Cholesky factor serves the forward and the adjoint solve. The gradient is
//! the exact derivative of the discrete forward map.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use super::banded::{BandedCholesky, BandedSpd};
use super::ForwardMap;
use crate::error::check_dim;
use crate::{Error, Result};

pub type ScalarField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Relative residual accepted from the direct solve.
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Clone)]
pub enum Source {
    Constant(f64),
    Field(ScalarField),
}

impl Source {
    fn at(&self, x1: f64, x2: f64) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Field(f) => f(x1, x2),
        }
    }
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Field(_) => f.write_str("Field(..)"),
        }
    }
}

/// `g_D(x1, x2) = sin(2π x1) cos(4π x2)`.
pub fn default_boundary() -> ScalarField {
    Arc::new(|x1, x2| (2.0 * PI * x1).sin() * (4.0 * PI * x2).cos())
}

/// The two smooth modes of `log a`:
/// `φ1 = 10/(9+π²) cos(π x1)`, `φ2 = 10/(9+2π²) cos(π (x1 + x2))`.
pub fn coefficient_basis(x1: f64, x2: f64) -> [f64; 2] {
    [
        10.0 / (9.0 + PI * PI) * (PI * x1).cos(),
        10.0 / (9.0 + 2.0 * PI * PI) * (PI * (x1 + x2)).cos(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    Dirichlet,
    // Only the quasi-1-D test lattice uses insulated sides.
    #[cfg_attr(not(test), allow(dead_code))]
    ZeroFlux,
}

/// Node lattice `(nx + 1) × (ny + 1)` with spacing `h` and a boundary kind per
/// side (left, right, bottom, top). Dirichlet wins at corners.
#[derive(Debug, Clone)]
pub(crate) struct Lattice {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    unknown: Vec<Option<usize>>,
    n_unknown: usize,
    bandwidth: usize,
}

impl Lattice {
    pub fn new(nx: usize, ny: usize, h: f64, sides: [Side; 4]) -> Self {
        let mut unknown = vec![None; (nx + 1) * (ny + 1)];
        let mut n_unknown = 0;
        for j in 0..=ny {
            for i in 0..=nx {
                let fixed = (i == 0 && sides[0] == Side::Dirichlet)
                    || (i == nx && sides[1] == Side::Dirichlet)
                    || (j == 0 && sides[2] == Side::Dirichlet)
                    || (j == ny && sides[3] == Side::Dirichlet);
                if !fixed {
                    unknown[j * (nx + 1) + i] = Some(n_unknown);
                    n_unknown += 1;
                }
            }
        }
        let mut lat = Self { nx, ny, h, unknown, n_unknown, bandwidth: 0 };
        let mut bw = 0;
        lat.for_each_face(|p, q, _| {
            if let (Some(a), Some(b)) = (lat.unknown[p], lat.unknown[q]) {
                bw = bw.max(a.abs_diff(b));
            }
        });
        lat.bandwidth = bw;
        lat
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    fn coords(&self, node: usize) -> (f64, f64) {
        let i = node % (self.nx + 1);
        let j = node / (self.nx + 1);
        (i as f64 * self.h, j as f64 * self.h)
    }

    /// Control-volume fraction of node index `i` along an axis with `n` cells.
    fn frac(i: usize, n: usize) -> f64 {
        if i == 0 || i == n {
            0.5
        } else {
            1.0
        }
    }

    /// Visit every face `(p, q, length / h)`.
    fn for_each_face(&self, mut visit: impl FnMut(usize, usize, f64)) {
        let row = self.nx + 1;
        for j in 0..=self.ny {
            let fy = Self::frac(j, self.ny);
            for i in 0..self.nx {
                visit(j * row + i, j * row + i + 1, fy);
            }
        }
        for j in 0..self.ny {
            for i in 0..=self.nx {
                visit(j * row + i, (j + 1) * row + i, Self::frac(i, self.nx));
            }
        }
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembled system for one coefficient field.
struct System {
    matrix: BandedSpd,
    factor: BandedCholesky,
}

impl Lattice {
    /// Solve for the full nodal field given nodal coefficient `a`, nodal source
    /// `f` and nodal Dirichlet values `g` (only read on fixed nodes).
    fn solve(&self, a: &[f64], f: &[f64], g: &[f64]) -> Result<(Vec<f64>, System)> {
        let mut matrix = BandedSpd::zeros(self.n_unknown, self.bandwidth);
        let mut rhs = vec![0.0; self.n_unknown];
        for (node, slot) in self.unknown.iter().enumerate() {
            if let Some(r) = slot {
                let i = node % (self.nx + 1);
                let j = node / (self.nx + 1);
                let cv = Self::frac(i, self.nx) * Self::frac(j, self.ny);
                rhs[*r] += self.h * self.h * cv * f[node];
            }
        }
        self.for_each_face(|p, q, len| {
            let c = len * harmonic(a[p], a[q]);
            match (self.unknown[p], self.unknown[q]) {
                (Some(rp), Some(rq)) => {
                    matrix.add(rp, rp, c);
                    matrix.add(rq, rq, c);
                    matrix.add(rp, rq, -c);
                }
                (Some(rp), None) => {
                    matrix.add(rp, rp, c);
                    rhs[rp] += c * g[q];
                }
                (None, Some(rq)) => {
                    matrix.add(rq, rq, c);
                    rhs[rq] += c * g[p];
                }
                (None, None) => {}
            }
        });
        let factor = matrix.factor()?;
        let sys = System { matrix, factor };
        let x = sys.checked_solve(&rhs)?;
        let mut p = g.to_vec();
        for (node, slot) in self.unknown.iter().enumerate() {
            if let Some(r) = slot {
                p[node] = x[*r];
            }
        }
        Ok((p, sys))
    }
}

impl System {
    fn checked_solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let x = self.factor.solve(rhs);
        let kx = self.matrix.mul(&x);
        let res = kx.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = if scale > 0.0 { res / scale } else { res };
        if rel <= RESIDUAL_TOL && x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::SolverFailed { residual: rel })
        }
    }
}

/// Solution values on the `(n + 1)²` nodes of the unit-square lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    n_cells: usize,
    values: Vec<f64>,
}

impl NodalField {
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at node `(i, j)`, i.e. at `(i h, j h)`.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * (self.n_cells + 1) + i]
    }

    /// Bilinear interpolation at a point of `[0, 1]²`.
    pub fn interpolate(&self, x1: f64, x2: f64) -> f64 {
        bilinear_stencil(self.n_cells, x1, x2)
            .iter()
            .map(|&(node, w)| w * self.values[node])
            .sum()
    }
}

/// Nodes and weights of the bilinear interpolant at `(x1, x2)`.
fn bilinear_stencil(n: usize, x1: f64, x2: f64) -> [(usize, f64); 4] {
    let locate = |x: f64| {
        let s = x * n as f64;
        let c = (s.floor() as usize).min(n - 1);
        (c, s - c as f64)
    };
    let (i, tx) = locate(x1);
    let (j, ty) = locate(x2);
    let row = n + 1;
    [
        (j * row + i, (1.0 - tx) * (1.0 - ty)),
        (j * row + i + 1, tx * (1.0 - ty)),
        ((j + 1) * row + i, (1.0 - tx) * ty),
        ((j + 1) * row + i + 1, tx * ty),
    ]
}

/// The 2-D elliptic forward problem with `a = exp(u1 φ1 + u2 φ2)` and
/// receivers read off by bilinear interpolation.
#[derive(Clone)]
pub struct EllipticGrid2D {
    n_cells: usize,
    receivers: Vec<[f64; 2]>,
    source: Source,
    boundary: ScalarField,
    lattice: Lattice,
    // Nodal values of the source, the boundary data and the two basis modes.
    f_nodes: Vec<f64>,
    g_nodes: Vec<f64>,
    phi_nodes: Vec<[f64; 2]>,
}

impl fmt::Debug for EllipticGrid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EllipticGrid2D")
            .field("n_cells", &self.n_cells)
            .field("receivers", &self.receivers)
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl EllipticGrid2D {
    /// Unit source, boundary data [`default_boundary`].
    pub fn new(n_cells: usize, receivers: Vec<[f64; 2]>) -> Result<Self> {
        if n_cells < 8 {
            return Err(Error::InvalidInput(format!("n_cells = {n_cells} must be >= 8")));
        }
        if receivers.is_empty() {
            return Err(Error::InvalidInput("need at least one receiver".into()));
        }
        if let Some(r) = receivers
            .iter()
            .find(|r| !r.iter().all(|x| (0.0..=1.0).contains(x)))
        {
            return Err(Error::InvalidInput(format!("receiver {r:?} outside [0, 1]^2")));
        }
        let h = 1.0 / n_cells as f64;
        let mut grid = Self {
            n_cells,
            receivers,
            source: Source::Constant(1.0),
            boundary: default_boundary(),
            lattice: Lattice::new(n_cells, n_cells, h, [Side::Dirichlet; 4]),
            f_nodes: Vec::new(),
            g_nodes: Vec::new(),
            phi_nodes: Vec::new(),
        };
        grid.phi_nodes = grid.nodal(coefficient_basis);
        grid.f_nodes = grid.nodal(|x1, x2| grid.source.at(x1, x2));
        grid.g_nodes = grid.nodal(|x1, x2| grid.boundary.as_ref()(x1, x2));
        Ok(grid)
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.f_nodes = self.nodal(|x1, x2| source.at(x1, x2));
        self.source = source;
        self
    }

    pub fn with_boundary(mut self, boundary: ScalarField) -> Self {
        self.g_nodes = self.nodal(|x1, x2| boundary.as_ref()(x1, x2));
        self.boundary = boundary;
        self
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_cells as f64
    }

    pub fn receivers(&self) -> &[[f64; 2]] {
        &self.receivers
    }

    fn nodal<T>(&self, f: impl Fn(f64, f64) -> T) -> Vec<T> {
        (0..self.lattice.n_nodes())
            .map(|node| {
                let (x1, x2) = self.lattice.coords(node);
                f(x1, x2)
            })
            .collect()
    }

    /// Nodal values of `a = exp(u1 φ1 + u2 φ2)`.
    pub fn coefficient_field(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(2, u.len())?;
        Ok(self.phi_nodes.iter().map(|[p1, p2]| (u[0] * p1 + u[1] * p2).exp()).collect())
    }

    pub fn solve(&self, u: &[f64]) -> Result<NodalField> {
        let a = self.coefficient_field(u)?;
        self.solve_with_coefficient(&a)
    }

    /// Solve with an explicit nodal coefficient field (length `(n + 1)²`).
    pub fn solve_with_coefficient(&self, a: &[f64]) -> Result<NodalField> {
        Ok(self.solve_system(a)?.0)
    }

    fn solve_system(&self, a: &[f64]) -> Result<(NodalField, System)> {
        check_dim(self.lattice.n_nodes(), a.len())?;
        if a.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidInput("coefficient must be positive".into()));
        }
        if a.iter().any(|v| *v == 0.0 || v.is_infinite()) {
            return Err(Error::CoefficientOverflow);
        }
        let (values, sys) = self.lattice.solve(a, &self.f_nodes, &self.g_nodes)?;
        Ok((NodalField { n_cells: self.n_cells, values }, sys))
    }

    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        let p = self.solve(u)?;
        Ok(self.receivers.iter().map(|r| p.interpolate(r[0], r[1])).collect())
    }
}

impl ForwardMap for EllipticGrid2D {
    fn in_dim(&self) -> usize {
        2
    }

    fn out_dim(&self) -> usize {
        self.receivers.len()
    }

    fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.forward(u)
    }

    /// Forward solve, adjoint solve `K λ = M^T ξ` with the same factor, then
    /// `-λ^T ∂g/∂u_k` summed face by face.
    fn grad_adjoint(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.out_dim(), xi.len())?;
        let a = self.coefficient_field(u)?;
        let (p, sys) = self.solve_system(&a)?;
        let lat = &self.lattice;

        let mut load = vec![0.0; lat.n_unknown];
        for (r, &w) in self.receivers.iter().zip(xi) {
            for (node, c) in bilinear_stencil(self.n_cells, r[0], r[1]) {
                if let Some(k) = lat.unknown[node] {
                    load[k] += w * c;
                }
            }
        }
        let lam_int = sys.checked_solve(&load)?;
        let mut lam = vec![0.0; lat.n_nodes()];
        for (node, slot) in lat.unknown.iter().enumerate() {
            if let Some(k) = slot {
                lam[node] = lam_int[*k];
            }
        }

        let phi = &self.phi_nodes;
        let pv = p.values();
        let mut grad = [0.0; 2];
        lat.for_each_face(|q0, q1, len| {
            let dl = lam[q0] - lam[q1];
            if dl == 0.0 {
                return;
            }
            let (a0, a1) = (a[q0], a[q1]);
            let s = a0 + a1;
            // ∂ harmonic(a0, a1) / ∂a0 = 2 a1² / s², and ∂a / ∂u_k = a φ_k.
            let d0 = 2.0 * a1 * a1 / (s * s) * a0;
            let d1 = 2.0 * a0 * a0 / (s * s) * a1;
            let flux = len * (pv[q0] - pv[q1]) * dl;
            for (k, gk) in grad.iter_mut().enumerate() {
                *gk -= flux * (d0 * phi[q0][k] + d1 * phi[q1][k]);
            }
        });
        Ok(grad.to_vec())
    }
}
