//! Declarative experiment description, read from TOML.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{cholesky_lower, ParticleEnsemble, ParticleRng};
use crate::flow::FlowConfig;
use crate::forward::{Elliptic1d, EllipticGrid2D, ForwardMap, LinearMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub n_ref: usize,
    pub n_sim: usize,
    /// Standard deviation of isotropic Gaussian noise added to the reference data.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub reference: ReferenceKind,
    /// Write parameter/data snapshots every this many iterations (0: first and last only).
    #[serde(default)]
    pub snapshot_every: usize,
    pub forward: ForwardSpec,
    pub truth: DistributionSpec,
    pub init: DistributionSpec,
    /// Second initial law, run with the same reference for comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_init: Option<DistributionSpec>,
    pub flow: FlowConfig,
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd: Option<GdSpec>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    /// KDE of the reference samples, sharing the simulated ensemble's bandwidth.
    #[default]
    Kde,
    /// Closed-form Gaussian pushforward; linear maps with Gaussian truth only.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ForwardSpec {
    Linear {
        matrix: Vec<Vec<f64>>,
    },
    Elliptic1d {
        #[serde(default = "default_points")]
        points: Vec<f64>,
    },
    Elliptic2d {
        n_cells: usize,
        receivers: Vec<[f64; 2]>,
    },
}

fn default_points() -> Vec<f64> {
    vec![0.25, 0.75]
}

/// A constructed forward map.
#[derive(Debug, Clone)]
pub enum Forward {
    Linear(LinearMap),
    Elliptic1d(Elliptic1d),
    Elliptic2d(EllipticGrid2D),
}

impl Forward {
    pub fn as_dyn(&self) -> &dyn ForwardMap {
        match self {
            Forward::Linear(f) => f,
            Forward::Elliptic1d(f) => f,
            Forward::Elliptic2d(f) => f,
        }
    }

    pub fn linear(&self) -> Option<&LinearMap> {
        match self {
            Forward::Linear(f) => Some(f),
            _ => None,
        }
    }
}

impl ForwardSpec {
    pub fn build(&self) -> Result<Forward> {
        Ok(match self {
            ForwardSpec::Linear { matrix } => Forward::Linear(LinearMap::from_rows(matrix)?),
            ForwardSpec::Elliptic1d { points } => Forward::Elliptic1d(Elliptic1d::new(points.clone())?),
            ForwardSpec::Elliptic2d { n_cells, receivers } => {
                Forward::Elliptic2d(EllipticGrid2D::new(*n_cells, receivers.clone())?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Marginal {
    Gaussian { mean: f64, var: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DistributionSpec {
    /// Independent coordinates.
    Independent { marginals: Vec<Marginal> },
    /// Joint Gaussian.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

impl DistributionSpec {
    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Independent { marginals } => marginals.len(),
            DistributionSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::Independent { marginals } => {
                if marginals.is_empty() {
                    return Err(Error::Config("distribution needs at least one marginal".into()));
                }
                for m in marginals {
                    match *m {
                        Marginal::Gaussian { mean, var } if !(var > 0.0 && mean.is_finite()) => {
                            return Err(Error::Config(format!("gaussian marginal needs var > 0, got {var}")));
                        }
                        Marginal::Uniform { lo, hi } if !(lo < hi) => {
                            return Err(Error::Config(format!("uniform marginal needs lo < hi, got [{lo}, {hi}]")));
                        }
                        _ => {}
                    }
                }
                Ok(())
            }
            DistributionSpec::Gaussian { mean, .. } => {
                cholesky_lower(&self.covariance().expect("gaussian has a covariance")?).map_err(|_| {
                    Error::Config("joint gaussian covariance is not SPD".into())
                })?;
                if mean.is_empty() {
                    return Err(Error::Config("gaussian mean is empty".into()));
                }
                Ok(())
            }
        }
    }

    /// Mean and covariance when the law is Gaussian.
    pub fn gaussian_moments(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        match self {
            DistributionSpec::Gaussian { mean, .. } => Some((mean.clone(), self.covariance()?.ok()?)),
            DistributionSpec::Independent { marginals } => {
                let mut mean = Vec::new();
                let mut var = Vec::new();
                for m in marginals {
                    match *m {
                        Marginal::Gaussian { mean: mu, var: v } => {
                            mean.push(mu);
                            var.push(v);
                        }
                        Marginal::Uniform { .. } => return None,
                    }
                }
                Some((mean, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(var))))
            }
        }
    }

    fn covariance(&self) -> Option<Result<DMatrix<f64>>> {
        let DistributionSpec::Gaussian { mean, cov } = self else {
            return None;
        };
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Some(Err(Error::Config(format!("covariance must be {d} x {d}"))));
        }
        Some(Ok(DMatrix::from_fn(d, d, |i, j| cov[i][j])))
    }

    /// `n` draws, particle by particle and coordinate by coordinate.
    pub fn sample(&self, rng: &mut ParticleRng, n: usize) -> Result<ParticleEnsemble> {
        match self {
            DistributionSpec::Independent { marginals } => {
                let mut data = Vec::with_capacity(n * marginals.len());
                for _ in 0..n {
                    for m in marginals {
                        data.push(match *m {
                            Marginal::Gaussian { mean, var } => {
                                let z: f64 = rng.sample(StandardNormal);
                                mean + var.sqrt() * z
                            }
                            Marginal::Uniform { lo, hi } => rng.random_range(lo..hi),
                        });
                    }
                }
                ParticleEnsemble::new(data, marginals.len())
            }
            DistributionSpec::Gaussian { mean, .. } => {
                let cov = self.covariance().expect("gaussian has a covariance")?;
                crate::ensemble::sample_gaussian_with(rng, mean, &cov, n)
            }
        }
    }
}

/// Deterministic gradient descent run for the `gd` theory case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdSpec {
    pub y_star: Vec<f64>,
    pub u_init: Vec<f64>,
    pub dt: f64,
    pub n_iters: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.n_ref == 0 || self.n_sim == 0 {
            return Err(Error::Config("n_ref and n_sim must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std = {} must be >= 0", self.noise_std)));
        }
        self.flow.validate().map_err(|e| Error::Config(e.to_string()))?;
        let fwd = self.forward.build().map_err(|e| Error::Config(e.to_string()))?;
        let m = fwd.as_dyn().in_dim();
        let specs = [Some(&self.truth), Some(&self.init), self.alt_init.as_ref()];
        for spec in specs.into_iter().flatten() {
            spec.validate()?;
            if spec.dim() != m {
                return Err(Error::Config(format!(
                    "distribution has dimension {}, forward map expects {m}",
                    spec.dim()
                )));
            }
        }
        if self.reference == ReferenceKind::Analytic
            && (fwd.linear().is_none() || self.truth.gaussian_moments().is_none())
        {
            return Err(Error::Config("analytic reference needs a linear map and a gaussian truth".into()));
        }
        if let Some(gd) = &self.gd {
            let Some(map) = fwd.linear() else {
                return Err(Error::Config("gd section needs a linear forward map".into()));
            };
            if gd.y_star.len() != map.matrix().nrows() || gd.u_init.len() != map.matrix().ncols() {
                return Err(Error::Config("gd y_star/u_init do not match the matrix shape".into()));
            }
        }
        Ok(())
    }
}
