//! Reference data laws and the per-particle drivers of each misfit.
//!
//! For the KL misfit the driver is a difference of scores,
//! `ξ_j = ∇log ρ*(y_j) − ∇log ρ^N(y_j)`, and particles move by
//! `u_j += Δt ∇G^T ξ_j`. The constant in `δD/δρ = log(ρ/ρ*) + 1` has no
//! gradient and does not appear.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{cholesky_lower, Kde, KdeConfig, KdeEval, ParticleEnsemble, DENSITY_FLOOR};
use crate::error::check_dim;
use crate::exec::try_map_range;
use crate::{Error, Result};

/// Which bandwidth a sample-based reference uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefBandwidth {
    /// Same `ε` as the simulated ensemble, so a matched ensemble is an exact
    /// fixed point.
    Shared,
    Own(KdeConfig),
}

#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        let l = cholesky_lower(cov)?;
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let d = mean.len() as f64;
        let precision = nalgebra::Cholesky::new(cov.clone()).ok_or(Error::NotSpd)?.inverse();
        Ok(Self {
            mean,
            precision,
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn centered(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().zip(&self.mean).map(|(a, m)| a - m))
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.mean.len(), y.len())?;
        let z = self.centered(y);
        Ok(self.log_norm - 0.5 * z.dot(&(&self.precision * &z)))
    }

    /// `-Σ^{-1} (y - μ)`.
    pub fn score(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.mean.len(), y.len())?;
        let z = self.centered(y);
        Ok((-(&self.precision * z)).as_slice().to_vec())
    }
}

/// The target data law `ρ_y*`.
#[derive(Debug, Clone)]
pub enum ReferenceDensity {
    Gaussian(GaussianDensity),
    Kde { samples: ParticleEnsemble, bandwidth: RefBandwidth },
}

impl ReferenceDensity {
    pub fn gaussian(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Self::Gaussian(GaussianDensity::new(mean, cov)?))
    }

    /// KDE of observed samples, sharing the simulated ensemble's bandwidth.
    pub fn from_samples(samples: ParticleEnsemble) -> Self {
        Self::Kde { samples, bandwidth: RefBandwidth::Shared }
    }

    pub fn from_samples_with(samples: ParticleEnsemble, cfg: KdeConfig) -> Self {
        Self::Kde { samples, bandwidth: RefBandwidth::Own(cfg) }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.mean.len(),
            Self::Kde { samples, .. } => samples.dim(),
        }
    }

    pub fn samples(&self) -> Option<&ParticleEnsemble> {
        match self {
            Self::Gaussian(_) => None,
            Self::Kde { samples, .. } => Some(samples),
        }
    }

    /// Bind the bandwidth; `shared_eps` is the simulated ensemble's `ε`.
    pub fn bind(&self, shared_eps: f64) -> Result<BoundReference<'_>> {
        Ok(match self {
            Self::Gaussian(g) => BoundReference::Gaussian(g),
            Self::Kde { samples, bandwidth } => {
                let eps = match bandwidth {
                    RefBandwidth::Shared => shared_eps,
                    RefBandwidth::Own(cfg) => cfg.resolve(samples)?,
                };
                BoundReference::Kde(Kde::new(samples, eps)?)
            }
        })
    }

    pub fn log_density(&self, y: &[f64], shared_eps: f64) -> Result<f64> {
        self.bind(shared_eps)?.log_density(y)
    }

    pub fn score(&self, y: &[f64], shared_eps: f64) -> Result<Vec<f64>> {
        self.bind(shared_eps)?.score(y)
    }
}

/// A reference density with its bandwidth resolved.
#[derive(Debug, Clone, Copy)]
pub enum BoundReference<'a> {
    Gaussian(&'a GaussianDensity),
    Kde(Kde<'a>),
}

impl BoundReference<'_> {
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        match self {
            Self::Gaussian(g) => g.log_density(y),
            Self::Kde(k) => k.log_density(y),
        }
    }

    pub fn score(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian(g) => g.score(y),
            Self::Kde(k) => k.score(y),
        }
    }

    pub fn eval(&self, y: &[f64]) -> Result<KdeEval> {
        match self {
            Self::Gaussian(g) => Ok(KdeEval { log_density: g.log_density(y)?, score: g.score(y)? }),
            Self::Kde(k) => k.eval(y),
        }
    }
}

/// `∇log ρ*(y) − ∇log ρ^N(y)` at an arbitrary point.
pub fn score_difference(ens: &Kde<'_>, reference: &BoundReference<'_>, y: &[f64]) -> Result<Vec<f64>> {
    let s_ref = reference.score(y)?;
    let s_ens = ens.score(y)?;
    Ok(s_ref.iter().zip(&s_ens).map(|(a, b)| a - b).collect())
}

/// KL drivers and the Monte-Carlo KL estimate of one ensemble state.
#[derive(Debug, Clone)]
pub struct KlTerms {
    pub xi: Vec<Vec<f64>>,
    /// `Σ_j w_j [log ρ^N(y_j) − log ρ*(y_j)]`.
    pub energy: f64,
    pub bandwidth: f64,
}

/// Drivers and energy from one pass of kernel sums per particle.
pub fn kl_terms(ys: &ParticleEnsemble, reference: &ReferenceDensity, eps: f64) -> Result<KlTerms> {
    check_dim(reference.dim(), ys.dim())?;
    let kde = Kde::new(ys, eps)?;
    let bound = reference.bind(eps)?;
    let per = try_map_range(ys.len(), |j| {
        let y = ys.particle(j);
        let own = kde.eval(y)?;
        let tgt = bound.eval(y)?;
        let xi: Vec<f64> = tgt.score.iter().zip(&own.score).map(|(a, b)| a - b).collect();
        Ok((xi, own.log_density - tgt.log_density))
    })?;
    let mut energy = 0.0;
    let mut xi = Vec::with_capacity(per.len());
    for ((row, term), w) in per.into_iter().zip(ys.weights()) {
        energy += w * term;
        xi.push(row);
    }
    Ok(KlTerms { xi, energy, bandwidth: eps })
}

/// Row `j` is `∇log ρ*(y_j) − ∇log ρ^N(y_j)`.
pub fn kl_xi(ys: &ParticleEnsemble, reference: &ReferenceDensity, cfg: &KdeConfig) -> Result<Vec<Vec<f64>>> {
    check_dim(reference.dim(), ys.dim())?;
    let eps = cfg.resolve(ys)?;
    let kde = Kde::new(ys, eps)?;
    let bound = reference.bind(eps)?;
    try_map_range(ys.len(), |j| score_difference(&kde, &bound, ys.particle(j)))
}

/// Monte-Carlo KL estimate; may be slightly negative from KDE bias.
pub fn kl_estimate(ys: &ParticleEnsemble, reference: &ReferenceDensity, cfg: &KdeConfig) -> Result<f64> {
    check_dim(reference.dim(), ys.dim())?;
    let eps = cfg.resolve(ys)?;
    let kde = Kde::new(ys, eps)?;
    let bound = reference.bind(eps)?;
    let terms = try_map_range(ys.len(), |j| {
        let y = ys.particle(j);
        Ok(kde.log_density(y)? - bound.log_density(y)?)
    })?;
    Ok(terms.iter().zip(ys.weights()).map(|(t, w)| t * w).sum())
}

#[derive(Debug, Clone)]
pub struct Chi2Rates {
    /// `r_j = ρ^N(y_j) / ρ*(y_j)`.
    pub ratio: Vec<f64>,
    /// `g_j = 8 (⟨r⟩_w − r_j)`.
    pub rate: Vec<f64>,
    /// `⟨r⟩_w`; `⟨r⟩_w − 1` estimates the χ² divergence.
    pub mean_ratio: f64,
}

/// Density ratios and Hellinger reaction rates of a weighted ensemble.
pub fn chi2_rate(ys: &ParticleEnsemble, reference: &ReferenceDensity, cfg: &KdeConfig) -> Result<Chi2Rates> {
    check_dim(reference.dim(), ys.dim())?;
    let eps = cfg.resolve(ys)?;
    let kde = Kde::new(ys, eps)?;
    let bound = reference.bind(eps)?;
    let ratio = try_map_range(ys.len(), |j| {
        let y = ys.particle(j);
        let tgt = bound.log_density(y).map_err(|e| match e {
            Error::DensityUnderflow(_) => Error::OutsideReferenceSupport,
            e => e,
        })?;
        if tgt < DENSITY_FLOOR.ln() {
            return Err(Error::OutsideReferenceSupport);
        }
        Ok((kde.log_density(y)? - tgt).exp())
    })?;
    Ok(rates_from_ratios(ratio, ys.weights()))
}

pub(crate) fn rates_from_ratios(ratio: Vec<f64>, weights: &[f64]) -> Chi2Rates {
    let wsum: f64 = weights.iter().sum();
    let mean_ratio = ratio.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>() / wsum;
    let rate = ratio.iter().map(|r| 8.0 * (mean_ratio - r)).collect();
    Chi2Rates { ratio, rate, mean_ratio }
}

/// Average 1-based ranks; ties share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Monotone transport `T(y_j)` from the ensemble's empirical law onto sorted
/// reference samples: normalized rank, then linear interpolation between
/// reference order statistics.
pub fn quantile_transport(ys: &[f64], sorted_ref: &[f64]) -> Result<Vec<f64>> {
    if sorted_ref.len() < 2 {
        return Err(Error::InvalidInput("need at least two reference samples".into()));
    }
    if sorted_ref.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("reference samples must be sorted".into()));
    }
    let n = ys.len();
    let m = sorted_ref.len();
    let ranks = average_ranks(ys);
    Ok(ranks
        .iter()
        .map(|&k| {
            let q = if n > 1 { (k - 1.0) / (n - 1) as f64 } else { 0.5 };
            let pos = q * (m - 1) as f64;
            let lo = (pos.floor() as usize).min(m - 2);
            let t = pos - lo as f64;
            (1.0 - t) * sorted_ref[lo] + t * sorted_ref[lo + 1]
        })
        .collect())
}

/// Gradient of the Kantorovich potential for quadratic cost in 1-D,
/// `y_j − T(y_j)`.
pub fn w2_potential_grad_1d(ys: &ParticleEnsemble, ref_samples: &[f64]) -> Result<Vec<f64>> {
    if ys.dim() != 1 {
        return Err(Error::NotOneDimensional);
    }
    let mut sorted = ref_samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let y = ys.column(0);
    let t = quantile_transport(&y, &sorted)?;
    Ok(y.iter().zip(&t).map(|(a, b)| a - b).collect())
}
