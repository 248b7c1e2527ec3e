//! Time integrators for parameter ensembles.
//!
//! All steps are explicit Euler and Jacobi-style: every particle update reads
//! the same snapshot of the previous ensemble.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::divergence::{chi2_rate, kl_terms, quantile_transport, ReferenceDensity};
use crate::ensemble::{neumaier_sum, KdeConfig, ParticleEnsemble, ParticleRng};
use crate::error::check_dim;
use crate::exec::try_map_range;
use crate::forward::{push_forward, ForwardMap, LinearMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// KL misfit, Wasserstein transport of positions.
    Kl,
    /// χ² misfit, Hellinger reaction on weights.
    Chi2,
    /// Quadratic-cost Wasserstein misfit for scalar data.
    #[serde(rename = "w2_1d")]
    W21d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dt: f64,
    pub n_iters: usize,
    #[serde(default = "default_divergence")]
    pub divergence: Divergence,
    #[serde(default)]
    pub kde: KdeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_divergence() -> Divergence {
    Divergence::Kl
}

fn default_record_every() -> usize {
    1
}

impl FlowConfig {
    pub fn kl(dt: f64, n_iters: usize) -> Self {
        Self {
            dt,
            n_iters,
            divergence: Divergence::Kl,
            kde: KdeConfig::silverman(),
            seed: 0,
            record_every: 1,
        }
    }

    pub fn with_divergence(mut self, divergence: Divergence) -> Self {
        self.divergence = divergence;
        self
    }

    pub fn with_kde(mut self, kde: KdeConfig) -> Self {
        self.kde = kde;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt = {} must be positive", self.dt)));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidInput("n_iters must be >= 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidInput("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iter: usize,
    pub params: ParticleEnsemble,
    pub data: ParticleEnsemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyRecord {
    pub iter: usize,
    /// KL estimate, `⟨r⟩_w − 1` for χ², or the squared 1-D W2 distance.
    pub energy: f64,
    pub bandwidth: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    /// Recorded states; the first is the initial ensemble, the last the final.
    pub snapshots: Vec<Snapshot>,
    pub energies: Vec<EnergyRecord>,
    pub config: FlowConfig,
}

impl FlowTrajectory {
    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory is never empty")
    }

    pub fn energy_values(&self) -> Vec<f64> {
        self.energies.iter().map(|e| e.energy).collect()
    }

    /// `iter,energy` CSV.
    pub fn energy_csv(&self) -> String {
        let mut s = String::from("iter,energy\n");
        for e in &self.energies {
            s.push_str(&format!("{},{:.16e}\n", e.iter, e.energy));
        }
        s
    }
}

fn move_particles(
    us: &ParticleEnsemble,
    fwd: &dyn ForwardMap,
    xi: &[Vec<f64>],
    dt: f64,
) -> Result<ParticleEnsemble> {
    let rows = try_map_range(us.len(), |j| {
        let u = us.particle(j);
        let g = fwd.grad_adjoint(u, &xi[j])?;
        let next: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a + dt * b).collect();
        if next.iter().all(|x| x.is_finite()) {
            Ok(next)
        } else {
            Err(Error::Diverged)
        }
    })?;
    us.with_positions(rows.concat(), us.dim())
}

/// Driver rows and the energy of the current state.
fn drivers(
    ys: &ParticleEnsemble,
    reference: &ReferenceDensity,
    cfg: &FlowConfig,
) -> Result<(Vec<Vec<f64>>, f64, f64)> {
    match cfg.divergence {
        Divergence::Kl => {
            let eps = cfg.kde.resolve(ys)?;
            let t = kl_terms(ys, reference, eps)?;
            Ok((t.xi, t.energy, eps))
        }
        Divergence::W21d => {
            if ys.dim() != 1 {
                return Err(Error::NotOneDimensional);
            }
            let samples = reference.samples().ok_or_else(|| {
                Error::InvalidInput("W2 driver needs a sample-based reference".into())
            })?;
            let mut sorted = samples.column(0);
            sorted.sort_by(f64::total_cmp);
            let y = ys.column(0);
            let t = quantile_transport(&y, &sorted)?;
            let grad: Vec<f64> = y.iter().zip(&t).map(|(a, b)| a - b).collect();
            let energy = grad.iter().zip(ys.weights()).map(|(g, w)| w * g * g).sum();
            Ok((grad.iter().map(|g| vec![-g]).collect(), energy, f64::NAN))
        }
        Divergence::Chi2 => Err(Error::InvalidInput(
            "the chi2 flow moves weights; use hellinger_chi2_step".into(),
        )),
    }
}

/// One step of the particle method: `y_j = G(u_j)`, drivers `ξ_j`, then
/// `u_j ← u_j + Δt ∇G(u_j)^T ξ_j`.
pub fn wgf_step(
    us: &ParticleEnsemble,
    fwd: &dyn ForwardMap,
    reference: &ReferenceDensity,
    cfg: &FlowConfig,
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    let ys = push_forward(fwd, us)?;
    let (xi, _, _) = drivers(&ys, reference, cfg)?;
    move_particles(us, fwd, &xi, cfg.dt)
}

/// Multiply weights by `1 + Δt g_j` and renormalize.
pub fn apply_chi2_rates(weights: &[f64], rates: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_dim(weights.len(), rates.len())?;
    let mut w = Vec::with_capacity(weights.len());
    for (wi, g) in weights.iter().zip(rates) {
        let factor = 1.0 + dt * g;
        if !(factor > 0.0) {
            return Err(Error::Chi2StepTooLarge);
        }
        w.push(wi * factor);
    }
    let total = neumaier_sum(w.iter().copied());
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

fn chi2_weights_step(
    us: &ParticleEnsemble,
    ys: &ParticleEnsemble,
    reference: &ReferenceDensity,
    cfg: &FlowConfig,
) -> Result<(ParticleEnsemble, f64, f64)> {
    let eps = cfg.kde.resolve(ys)?;
    let rates = chi2_rate(ys, reference, &crate::ensemble::KdeConfig::fixed(eps))?;
    let w = apply_chi2_rates(us.weights(), &rates.rate, cfg.dt)?;
    Ok((us.clone().with_weights(w)?, rates.mean_ratio - 1.0, eps))
}

/// Hellinger flow of the χ² misfit: positions stay, weights react.
pub fn hellinger_chi2_step(
    us: &ParticleEnsemble,
    fwd: &dyn ForwardMap,
    reference: &ReferenceDensity,
    cfg: &FlowConfig,
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    let ys = push_forward(fwd, us)?;
    Ok(chi2_weights_step(us, &ys, reference, cfg)?.0)
}

fn final_energy(
    ys: &ParticleEnsemble,
    reference: &ReferenceDensity,
    cfg: &FlowConfig,
) -> Result<(f64, f64)> {
    match cfg.divergence {
        Divergence::Chi2 => {
            let eps = cfg.kde.resolve(ys)?;
            let r = chi2_rate(ys, reference, &KdeConfig::fixed(eps))?;
            Ok((r.mean_ratio - 1.0, eps))
        }
        _ => {
            let (_, e, eps) = drivers(ys, reference, cfg)?;
            Ok((e, eps))
        }
    }
}

/// Iterate the selected flow for `n_iters` steps, recording the ensemble and
/// its energy every `record_every` steps and at the end.
pub fn run_flow(
    us0: &ParticleEnsemble,
    fwd: &dyn ForwardMap,
    reference: &ReferenceDensity,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    check_dim(fwd.in_dim(), us0.dim())?;
    check_dim(fwd.out_dim(), reference.dim())?;
    if cfg.divergence != Divergence::Chi2 && !us0.has_uniform_weights() {
        return Err(Error::InvalidInput("transport flows expect uniform weights".into()));
    }
    let mut snapshots = Vec::new();
    let mut energies = Vec::new();
    let mut us = us0.clone();
    let mut ys = push_forward(fwd, &us)?;
    for iter in 0..cfg.n_iters {
        let record = iter % cfg.record_every == 0;
        if record {
            snapshots.push(Snapshot { iter, params: us.clone(), data: ys.clone() });
        }
        let (next, energy, eps) = match cfg.divergence {
            Divergence::Chi2 => chi2_weights_step(&us, &ys, reference, cfg)?,
            _ => {
                let (xi, energy, eps) = drivers(&ys, reference, cfg)?;
                (move_particles(&us, fwd, &xi, cfg.dt)?, energy, eps)
            }
        };
        if record {
            energies.push(EnergyRecord { iter, energy, bandwidth: eps, ess: us.effective_sample_size() });
        }
        ys = match cfg.divergence {
            Divergence::Chi2 => ys.with_weights(next.weights().to_vec())?,
            _ => push_forward(fwd, &next)?,
        };
        us = next;
    }
    let (energy, eps) = final_energy(&ys, reference, cfg)?;
    energies.push(EnergyRecord {
        iter: cfg.n_iters,
        energy,
        bandwidth: eps,
        ess: us.effective_sample_size(),
    });
    snapshots.push(Snapshot { iter: cfg.n_iters, params: us, data: ys });
    Ok(FlowTrajectory { snapshots, energies, config: cfg.clone() })
}

/// Euler–Maruyama step of `dy = −AA^T ∇f dt + √(2AA^T) dW` in data space,
/// with `∇f = −∇log ρ*` and `√(2AA^T)` applied as `V √2 S z`, `z ~ N(0, I_r)`.
///
/// `kde` supplies the bandwidth when the reference shares it with `ys`.
/// Noise is drawn particle by particle, coordinate by coordinate, from `rng`.
pub fn projected_langevin_step(
    ys: &ParticleEnsemble,
    map: &LinearMap,
    reference: &ReferenceDensity,
    kde: &KdeConfig,
    dt: f64,
    rng: &mut ParticleRng,
) -> Result<ParticleEnsemble> {
    check_dim(map.out_dim(), ys.dim())?;
    check_dim(reference.dim(), ys.dim())?;
    if !(dt >= 0.0) {
        return Err(Error::InvalidInput(format!("dt = {dt} must be nonnegative")));
    }
    let eps = match reference {
        ReferenceDensity::Kde { .. } => kde.resolve(ys)?,
        ReferenceDensity::Gaussian(_) => f64::NAN,
    };
    let bound = reference.bind(eps)?;
    let scores = try_map_range(ys.len(), |j| bound.score(ys.particle(j)))?;
    let a = map.matrix();
    let v = map.data_basis();
    let s = map.singular_values();
    let r = map.rank();
    let noise_scale = (2.0 * dt).sqrt();
    let mut data = Vec::with_capacity(ys.data().len());
    let mut z = DVector::zeros(r);
    for (j, score) in scores.iter().enumerate() {
        let sc = DVector::from_column_slice(score);
        let drift = a * a.tr_mul(&sc);
        for zk in z.iter_mut() {
            *zk = rng.sample(StandardNormal);
        }
        let kick = v * z.component_mul(s);
        for (k, y) in ys.particle(j).iter().enumerate() {
            let next = y + dt * drift[k] + noise_scale * kick[k];
            if !next.is_finite() {
                return Err(Error::Diverged);
            }
            data.push(next);
        }
    }
    ys.with_positions(data, ys.dim())
}

/// Explicit Euler for `du/dt = −A^T (A u − y*)`.
pub fn deterministic_gd(
    map: &LinearMap,
    y_star: &[f64],
    u_init: &[f64],
    dt: f64,
    n_iters: usize,
) -> Result<Vec<f64>> {
    let a = map.matrix();
    check_dim(a.nrows(), y_star.len())?;
    check_dim(a.ncols(), u_init.len())?;
    let limit = 2.0 / (map.sigma_max() * map.sigma_max());
    if !(dt > 0.0 && dt < limit) {
        return Err(Error::UnstableStep { dt, limit });
    }
    let y = DVector::from_column_slice(y_star);
    let mut u = DVector::from_column_slice(u_init);
    for _ in 0..n_iters {
        let resid = a * &u - &y;
        u -= dt * a.tr_mul(&resid);
    }
    Ok(u.as_slice().to_vec())
}

/// Closed-form limit of [`deterministic_gd`]: `U S⁻¹ V^T y* + (I − U U^T) u_init`.
pub fn deterministic_gd_limit(map: &LinearMap, y_star: &[f64], u_init: &[f64]) -> Result<Vec<f64>> {
    if map.is_over_determined() {
        return Err(Error::InvalidInput("limit formula needs n <= m".into()));
    }
    let a = map.matrix();
    check_dim(a.nrows(), y_star.len())?;
    check_dim(a.ncols(), u_init.len())?;
    let (v, s, u) = (map.data_basis(), map.singular_values(), map.param_basis());
    let coeff = v.tr_mul(&DVector::from_column_slice(y_star)).component_div(s);
    let u0 = DVector::from_column_slice(u_init);
    let out = u * coeff + &u0 - u * u.tr_mul(&u0);
    Ok(out.as_slice().to_vec())
}
