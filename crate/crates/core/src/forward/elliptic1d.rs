use super::ForwardMap;
use crate::error::check_dim;
use crate::{Error, Result};

/// Exact solution of `-(e^{u1} p')' = 1` on `[0, 1]` with `p(0) = 0`,
/// `p(1) = u2`: `p(x) = u2 x + e^{-u1} (x - x²) / 2`.
pub fn elliptic1d_solve(u1: f64, u2: f64, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidInput(format!("x = {x} outside [0, 1]")));
    }
    Ok(u2 * x + (-u1).exp() * (-0.5 * x * x + 0.5 * x))
}

/// Point measurements of the 1-D diffusion problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Elliptic1d {
    points: Vec<f64>,
}

impl Default for Elliptic1d {
    fn default() -> Self {
        Self { points: vec![0.25, 0.75] }
    }
}

impl Elliptic1d {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("need at least one measurement point".into()));
        }
        if let Some(x) = points.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidInput(format!("measurement point {x} outside [0, 1]")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

impl ForwardMap for Elliptic1d {
    fn in_dim(&self) -> usize {
        2
    }

    fn out_dim(&self) -> usize {
        self.points.len()
    }

    fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(2, u.len())?;
        self.points.iter().map(|&x| elliptic1d_solve(u[0], u[1], x)).collect()
    }

    fn grad_adjoint(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        check_dim(2, u.len())?;
        check_dim(self.out_dim(), xi.len())?;
        let e = (-u[0]).exp();
        let mut g = [0.0, 0.0];
        for (&x, &w) in self.points.iter().zip(xi) {
            g[0] += w * (-e * (-0.5 * x * x + 0.5 * x));
            g[1] += w * x;
        }
        Ok(g.to_vec())
    }
}
