//! Weighted particle ensembles, samplers and Gaussian kernel density estimates.
//!
//! An ensemble is the discrete stand-in for a probability measure: `N`
//! particles in `R^d`, one per row, with nonnegative weights summing to one.
//! The KL and W2 flows keep weights uniform; the χ² flow moves weights only.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::{Error, Result};

/// Tolerance on `|Σ w − 1|`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Reference densities below this value make density ratios meaningless.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// The generator used for every random draw in the crate.
pub type ParticleRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ParticleRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compensated sum; keeps weight bookkeeping within a few ulps for large `N`.
pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if f64::abs(sum) >= f64::abs(v) {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    data: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
    seed: u64,
}

impl ParticleEnsemble {
    /// Uniformly weighted ensemble from a row-major `N × dim` buffer.
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("ensemble dimension must be >= 1".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "buffer of length {} is not a nonempty N x {dim} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("ensemble contains NaN or Inf".into()));
        }
        let n = data.len() / dim;
        Ok(Self {
            data,
            weights: vec![1.0 / n as f64; n],
            dim,
            seed: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        for r in rows {
            check_dim(dim, r.len())?;
        }
        Self::new(rows.concat(), dim)
    }

    /// One-dimensional ensemble from scalar samples.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), 1)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_dim(self.len(), weights.len())?;
        validate_weights(&weights)?;
        self.weights = weights;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Seed the ensemble was drawn with; `0` for loaded or derived ensembles.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Row-major particle buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn particles(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.particles().map(|p| p[k]).collect()
    }

    pub fn has_uniform_weights(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| w == w0)
    }

    /// Same weights and seed, new positions (same `N`, any dimension).
    pub fn with_positions(&self, data: Vec<f64>, dim: usize) -> Result<Self> {
        let mut out = Self::new(data, dim)?;
        check_dim(self.len(), out.len())?;
        out.weights = self.weights.clone();
        out.seed = self.seed;
        Ok(out)
    }

    /// Apply `f` to every particle, keeping the weights.
    pub fn map_particles<F>(&self, out_dim: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
    {
        let rows = crate::exec::try_map_range(self.len(), |j| {
            let y = f(self.particle(j))?;
            check_dim(out_dim, y.len())?;
            Ok(y)
        })?;
        self.with_positions(rows.concat(), out_dim)
    }

    /// Weighted mean of each coordinate.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, &w) in self.particles().zip(&self.weights) {
            for (mk, &pk) in m.iter_mut().zip(p) {
                *mk += w * pk;
            }
        }
        m
    }

    /// Unbiased, unweighted sample variance of each coordinate.
    pub fn sample_variances(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for p in self.particles() {
            for (mk, &pk) in mean.iter_mut().zip(p) {
                *mk += pk;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for p in self.particles() {
            for ((vk, &pk), &mk) in var.iter_mut().zip(p).zip(&mean) {
                *vk += (pk - mk) * (pk - mk);
            }
        }
        var.iter_mut().for_each(|v| *v /= n - 1.0);
        var
    }

    /// Kish effective sample size `1 / Σ w²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(self.len() * (self.dim + 1) * 24 + 32);
        let _ = writeln!(s, "# dim={} n={} seed={}", self.dim, self.len(), self.seed);
        for (p, w) in self.particles().zip(&self.weights) {
            let _ = write!(s, "{w:.16e}");
            for x in p {
                let _ = write!(s, ",{x:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty ensemble file".into()))??;
        let (dim, n, seed) = parse_header(&header)?;
        let mut data = Vec::with_capacity(n * dim);
        let mut weights = Vec::with_capacity(n);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |what: &str| -> Result<f64> {
                let f = fields.next().ok_or_else(|| {
                    Error::Parse(format!("row {}: missing {what}", lineno + 1))
                })?;
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 1)))
            };
            weights.push(next("weight")?);
            for _ in 0..dim {
                data.push(next("coordinate")?);
            }
            if fields.next().is_some() {
                return Err(Error::Parse(format!("row {}: too many columns", lineno + 1)));
            }
        }
        if weights.len() != n {
            return Err(Error::Parse(format!(
                "header declares n={n} but file has {} rows",
                weights.len()
            )));
        }
        Ok(Self::new(data, dim)?.with_weights(weights)?.with_seed(seed))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let total = neumaier_sum(weights.iter().copied());
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

fn parse_header(header: &str) -> Result<(usize, usize, u64)> {
    let body = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse(format!("bad ensemble header {header:?}")))?;
    let (mut dim, mut n, mut seed) = (None, None, None);
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field {kv:?}")))?;
        let bad = |e: std::num::ParseIntError| Error::Parse(format!("header field {k}: {e}"));
        match k {
            "dim" => dim = Some(v.parse().map_err(bad)?),
            "n" => n = Some(v.parse().map_err(bad)?),
            "seed" => seed = Some(v.parse().map_err(bad)?),
            _ => return Err(Error::Parse(format!("unknown header field {k:?}"))),
        }
    }
    match (dim, n, seed) {
        (Some(d), Some(n), Some(s)) => Ok((d, n, s)),
        _ => Err(Error::Parse(format!("incomplete ensemble header {header:?}"))),
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(crate) fn cholesky_lower(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() || cov.nrows() == 0 {
        return Err(Error::NotSpd);
    }
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    for i in 0..cov.nrows() {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotSpd);
            }
        }
    }
    nalgebra::Cholesky::new(cov.clone())
        .map(|c| c.l())
        .ok_or(Error::NotSpd)
}

pub fn sample_gaussian_with(
    rng: &mut ParticleRng,
    mean: &[f64],
    cov: &DMatrix<f64>,
    n: usize,
) -> Result<ParticleEnsemble> {
    let d = mean.len();
    check_dim(d, cov.nrows())?;
    let l = cholesky_lower(cov)?;
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut z = DVector::zeros(d);
    for _ in 0..n {
        for zk in z.iter_mut() {
            *zk = rng.sample(StandardNormal);
        }
        let x = &l * &z;
        data.extend(mean.iter().zip(x.iter()).map(|(m, xk)| m + xk));
    }
    ParticleEnsemble::new(data, d)
}

/// `n` i.i.d. draws from `N(mean, cov)` through the Cholesky factor of `cov`.
pub fn sample_gaussian(
    mean: &[f64],
    cov: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let mut rng = rng_from_seed(seed);
    Ok(sample_gaussian_with(&mut rng, mean, cov, n)?.with_seed(seed))
}

pub fn sample_uniform_with(
    rng: &mut ParticleRng,
    lo: &[f64],
    hi: &[f64],
    n: usize,
) -> Result<ParticleEnsemble> {
    check_dim(lo.len(), hi.len())?;
    if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(Error::InvalidInput("uniform box needs lo < hi in every coordinate".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * lo.len());
    for _ in 0..n {
        for (a, b) in lo.iter().zip(hi) {
            data.push(rng.random_range(*a..*b));
        }
    }
    ParticleEnsemble::new(data, lo.len())
}

/// `n` i.i.d. draws from the box `[lo, hi)`.
pub fn sample_uniform(lo: &[f64], hi: &[f64], n: usize, seed: u64) -> Result<ParticleEnsemble> {
    let mut rng = rng_from_seed(seed);
    Ok(sample_uniform_with(&mut rng, lo, hi, n)?.with_seed(seed))
}

/// How the kernel variance `ε` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Fixed(f64),
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub rule: Bandwidth,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self::silverman()
    }
}

impl KdeConfig {
    pub fn fixed(eps: f64) -> Self {
        Self { rule: Bandwidth::Fixed(eps) }
    }

    pub fn silverman() -> Self {
        Self { rule: Bandwidth::Silverman }
    }

    /// The kernel variance to use for `ens`.
    pub fn resolve(&self, ens: &ParticleEnsemble) -> Result<f64> {
        let eps = match self.rule {
            Bandwidth::Fixed(eps) => eps,
            Bandwidth::Silverman => silverman_bandwidth(ens)?,
        };
        if eps > 0.0 && eps.is_finite() {
            Ok(eps)
        } else {
            Err(Error::InvalidInput(format!("KDE bandwidth must be positive, got {eps}")))
        }
    }
}

/// Silverman's rule for the kernel *variance*:
/// `ε = (4 / ((d + 2) N))^(2 / (d + 4)) · mean_k var_k`.
///
/// Returns `0` when all particles coincide; [`KdeConfig::resolve`] rejects that.
pub fn silverman_bandwidth(ens: &ParticleEnsemble) -> Result<f64> {
    let n = ens.len();
    if n < 2 {
        return Err(Error::BandwidthUndefined);
    }
    let d = ens.dim() as f64;
    let var = ens.sample_variances();
    let mean_var = var.iter().sum::<f64>() / d;
    let factor = (4.0 / ((d + 2.0) * n as f64)).powf(2.0 / (d + 4.0));
    Ok(factor * mean_var)
}

/// Log-density and score of a KDE at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEval {
    pub log_density: f64,
    pub score: Vec<f64>,
}

/// Isotropic Gaussian KDE `Σ_j w_j (2πε)^{-d/2} exp(-|y - y_j|² / 2ε)` with a
/// resolved bandwidth.
///
/// Kernel sums are accumulated in particle order with a running max-shift, so
/// far-away queries keep full relative precision and results do not depend on
/// how queries are distributed over threads.
#[derive(Debug, Clone, Copy)]
pub struct Kde<'a> {
    ens: &'a ParticleEnsemble,
    eps: f64,
}

impl<'a> Kde<'a> {
    pub fn new(ens: &'a ParticleEnsemble, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("KDE bandwidth must be positive, got {eps}")));
        }
        Ok(Self { ens, eps })
    }

    pub fn from_config(ens: &'a ParticleEnsemble, cfg: &KdeConfig) -> Result<Self> {
        Self::new(ens, cfg.resolve(ens)?)
    }

    pub fn bandwidth(&self) -> f64 {
        self.eps
    }

    pub fn ensemble(&self) -> &'a ParticleEnsemble {
        self.ens
    }

    fn log_norm(&self) -> f64 {
        -0.5 * self.ens.dim() as f64 * (2.0 * std::f64::consts::PI * self.eps).ln()
    }

    /// Returns `(shift, Σ w_j e^{a_j - shift}, Σ w_j (y - y_j) e^{a_j - shift})`
    /// with `a_j = -|y - y_j|² / 2ε`.
    fn accumulate(&self, y: &[f64], want_grad: bool) -> (f64, f64, Vec<f64>) {
        let d = self.ens.dim();
        let inv2eps = 0.5 / self.eps;
        let mut shift = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut grad = vec![0.0; if want_grad { d } else { 0 }];
        for (p, &w) in self.ens.particles().zip(self.ens.weights()) {
            if w == 0.0 {
                continue;
            }
            let mut r2 = 0.0;
            for (a, b) in y.iter().zip(p) {
                r2 += (a - b) * (a - b);
            }
            let a = -r2 * inv2eps;
            if a > shift {
                let rescale = (shift - a).exp();
                sum *= rescale;
                grad.iter_mut().for_each(|g| *g *= rescale);
                shift = a;
            }
            let t = w * (a - shift).exp();
            sum += t;
            for ((g, yk), pk) in grad.iter_mut().zip(y).zip(p) {
                *g += t * (yk - pk);
            }
        }
        (shift, sum, grad)
    }

    pub fn density(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.ens.dim(), y.len())?;
        let (shift, sum, _) = self.accumulate(y, false);
        Ok((sum.ln() + shift + self.log_norm()).exp())
    }

    /// Exact in log space even where [`Kde::density`] underflows; errors only
    /// when the result is not finite.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.ens.dim(), y.len())?;
        let (shift, sum, _) = self.accumulate(y, false);
        floor_checked(sum.ln() + shift + self.log_norm())
    }

    /// `∇ log ρ(y)`. Errors when no kernel term contributes (non-finite query).
    pub fn score(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.ens.dim(), y.len())?;
        let (shift, sum, grad) = self.accumulate(y, true);
        score_from(shift, sum, grad, self.eps)
    }

    /// Log-density and score from a single pass over the particles.
    pub fn eval(&self, y: &[f64]) -> Result<KdeEval> {
        check_dim(self.ens.dim(), y.len())?;
        let (shift, sum, grad) = self.accumulate(y, true);
        let log_density = floor_checked(sum.ln() + shift + self.log_norm())?;
        Ok(KdeEval { log_density, score: score_from(shift, sum, grad, self.eps)? })
    }
}

fn floor_checked(log_density: f64) -> Result<f64> {
    if log_density.is_finite() {
        Ok(log_density)
    } else {
        Err(Error::DensityUnderflow(log_density.exp()))
    }
}

fn score_from(shift: f64, sum: f64, mut grad: Vec<f64>, eps: f64) -> Result<Vec<f64>> {
    if !(shift.is_finite() && sum > 0.0) {
        return Err(Error::OutsideKdeSupport);
    }
    let scale = -1.0 / (eps * sum);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

pub fn kde_density(ens: &ParticleEnsemble, cfg: &KdeConfig, y: &[f64]) -> Result<f64> {
    Kde::from_config(ens, cfg)?.density(y)
}

pub fn kde_score(ens: &ParticleEnsemble, cfg: &KdeConfig, y: &[f64]) -> Result<Vec<f64>> {
    Kde::from_config(ens, cfg)?.score(y)
}
