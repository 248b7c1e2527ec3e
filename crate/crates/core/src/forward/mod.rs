//! Forward maps `y = G(u)` together with the adjoint action `ξ ↦ ∇_u G^T ξ`.
//!
//! The particle flow only ever needs the Jacobian applied transposed to a
//! vector, so implicit maps can answer with one adjoint solve instead of
//! assembling the full Jacobian.

mod banded;
mod elliptic1d;
mod elliptic2d;
pub(crate) mod linear;

pub use elliptic1d::{elliptic1d_solve, Elliptic1d};
pub use elliptic2d::{coefficient_basis, default_boundary, EllipticGrid2D, NodalField, ScalarField, Source};
pub use linear::{augment, LinearMap};

use crate::ensemble::ParticleEnsemble;
use crate::error::check_dim;
use crate::Result;

pub trait ForwardMap: Send + Sync {
    /// Parameter dimension `m`.
    fn in_dim(&self) -> usize;
    /// Data dimension `n`.
    fn out_dim(&self) -> usize;
    fn apply(&self, u: &[f64]) -> Result<Vec<f64>>;
    /// `∇_u G(u)^T ξ`; linear in `ξ`.
    fn grad_adjoint(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>>;
}

/// Push every particle through `fwd`, keeping the weights.
pub fn push_forward(fwd: &dyn ForwardMap, us: &ParticleEnsemble) -> Result<ParticleEnsemble> {
    check_dim(fwd.in_dim(), us.dim())?;
    us.map_particles(fwd.out_dim(), |u| fwd.apply(u))
}

/// Result of comparing an adjoint action against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst `‖g − g_fd‖_∞ / ‖g_fd‖_∞` over all probe vectors.
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Compare `grad_adjoint(u, ξ)` with `⟨ξ, (G(u + h e_k) − G(u − h e_k)) / 2h⟩`
/// for every unit `ξ = e_i` and every extra probe in `xis`.
pub fn grad_check(fwd: &dyn ForwardMap, u: &[f64], h: f64, xis: &[Vec<f64>]) -> Result<GradCheck> {
    check_dim(fwd.in_dim(), u.len())?;
    let (m, n) = (fwd.in_dim(), fwd.out_dim());
    // Columns of the finite-difference Jacobian.
    let mut fd_cols = Vec::with_capacity(m);
    for k in 0..m {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[k] += h;
        dn[k] -= h;
        let (yp, ym) = (fwd.apply(&up)?, fwd.apply(&dn)?);
        fd_cols.push(yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let mut probes: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|r| if r == i { 1.0 } else { 0.0 }).collect())
        .collect();
    probes.extend(xis.iter().cloned());
    let mut worst: f64 = 0.0;
    for xi in &probes {
        check_dim(n, xi.len())?;
        let g = fwd.grad_adjoint(u, xi)?;
        let fd: Vec<f64> = fd_cols
            .iter()
            .map(|col| col.iter().zip(xi).map(|(a, b)| a * b).sum())
            .collect();
        let scale = fd.iter().fold(0.0_f64, |s, x| s.max(x.abs()));
        let diff = g.iter().zip(&fd).fold(0.0_f64, |s, (a, b)| s.max((a - b).abs()));
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
    }
    Ok(GradCheck { max_rel_err: worst, probes: probes.len() })
}
