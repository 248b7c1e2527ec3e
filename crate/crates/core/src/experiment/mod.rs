//! Batch experiments: config files, shipped presets, and the commands behind
//! the `pushflow` binary.
//!
//! Random draws come from one ChaCha8 stream seeded with `flow.seed`, in this
//! order: truth parameters, reference noise (only when `noise_std > 0`),
//! initial particles, then the alternative initial particles.

mod config;
pub mod presets;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub use config::{DistributionSpec, ExperimentConfig, Forward, ForwardSpec, GdSpec, Marginal, ReferenceKind};

use crate::divergence::ReferenceDensity;
use crate::ensemble::{rng_from_seed, ParticleEnsemble};
use crate::flow::{deterministic_gd, deterministic_gd_limit, run_flow, Divergence, FlowTrajectory};
use crate::forward::{grad_check, push_forward, Elliptic1d, EllipticGrid2D, ForwardMap, GradCheck, LinearMap};
use crate::theory::{
    energy_decay_check, fully_determined_check, ks_statistic_1d, over_determined_check, under_determined_check,
    w2_1d, Case, TheoryReport, UnderThresholds, Verdict,
};
use crate::{Error, Result};

/// Everything sampled before the flow starts.
#[derive(Debug, Clone)]
pub struct Setup {
    pub forward: Forward,
    pub truth: ParticleEnsemble,
    pub reference_samples: ParticleEnsemble,
    pub reference: ReferenceDensity,
    pub init: ParticleEnsemble,
    pub alt_init: Option<ParticleEnsemble>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub setup: Setup,
    pub trajectory: FlowTrajectory,
    pub alt_trajectory: Option<FlowTrajectory>,
    pub report: TheoryReport,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let forward = cfg.forward.build()?;
    let fwd = forward.as_dyn();
    let seed = cfg.flow.seed;
    let mut rng = rng_from_seed(seed);

    let truth = cfg.truth.sample(&mut rng, cfg.n_ref)?.with_seed(seed);
    let mut reference_samples = push_forward(fwd, &truth)?;
    if cfg.noise_std > 0.0 {
        let noisy: Vec<f64> = reference_samples
            .data()
            .iter()
            .map(|y| {
                let z: f64 = rng.sample(StandardNormal);
                y + cfg.noise_std * z
            })
            .collect();
        reference_samples = reference_samples.with_positions(noisy, fwd.out_dim())?;
    }
    let reference = match cfg.reference {
        ReferenceKind::Kde => ReferenceDensity::from_samples(reference_samples.clone()),
        ReferenceKind::Analytic => {
            let map = forward.linear().expect("validated");
            let (mean, cov) = cfg.truth.gaussian_moments().expect("validated");
            let a = map.matrix();
            let mean = a * DVector::from_vec(mean);
            let n = a.nrows();
            let cov = a * cov * a.transpose() + DMatrix::identity(n, n) * cfg.noise_std.powi(2);
            ReferenceDensity::gaussian(mean.as_slice().to_vec(), &cov)?
        }
    };
    let init = cfg.init.sample(&mut rng, cfg.n_sim)?.with_seed(seed);
    let alt_init = match &cfg.alt_init {
        Some(spec) => Some(spec.sample(&mut rng, cfg.n_sim)?.with_seed(seed)),
        None => None,
    };
    Ok(Setup { forward, truth, reference_samples, reference, init, alt_init })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let setup = prepare(cfg)?;
    let fwd = setup.forward.as_dyn();
    let trajectory = run_flow(&setup.init, fwd, &setup.reference, &cfg.flow)?;
    let alt_trajectory = match &setup.alt_init {
        Some(init) => Some(run_flow(init, fwd, &setup.reference, &cfg.flow)?),
        None => None,
    };
    let report = evaluate(cfg, &setup, &trajectory, alt_trajectory.as_ref())?;
    Ok(Outcome { setup, trajectory, alt_trajectory, report })
}

fn case_of(fwd: &dyn ForwardMap) -> Case {
    use std::cmp::Ordering::*;
    match fwd.out_dim().cmp(&fwd.in_dim()) {
        Less => Case::Under,
        Equal => Case::Fully,
        Greater => Case::Over,
    }
}

/// Copy `src`'s metrics into `dst`, keeping only verdicts with a configured threshold.
fn merge(dst: &mut TheoryReport, src: TheoryReport, cfg: &ExperimentConfig, prefix: &str) {
    for (k, v) in src.metrics {
        dst.metrics.insert(format!("{prefix}{k}"), v);
    }
    for (k, v) in src.verdicts {
        if cfg.thresholds.contains_key(&k) {
            dst.verdicts.insert(format!("{prefix}{k}"), v);
        }
    }
}

fn threshold(cfg: &ExperimentConfig, name: &str) -> f64 {
    cfg.thresholds.get(name).copied().unwrap_or(f64::INFINITY)
}

fn at_least(report: &mut TheoryReport, name: &str, value: f64, threshold: f64) {
    report.metrics.insert(name.into(), value);
    report.verdicts.insert(name.into(), Verdict { pass: value >= threshold, threshold, value });
}

fn evaluate_one(
    cfg: &ExperimentConfig,
    setup: &Setup,
    traj: &FlowTrajectory,
    init: &ParticleEnsemble,
    prefix: &str,
) -> Result<TheoryReport> {
    let fwd = setup.forward.as_dyn();
    let mut report = TheoryReport::new(case_of(fwd));
    let last = traj.last();
    let refs = &setup.reference_samples;

    let decay = energy_decay_check(&traj.energy_values(), 0.0)?;
    match cfg.thresholds.get("energy_decay") {
        Some(&t) => at_least(&mut report, &format!("{prefix}energy_decay"), decay.fraction, t),
        None => report.metric(format!("{prefix}energy_decay"), decay.fraction),
    }
    report.metric(format!("{prefix}energy_initial"), traj.energies[0].energy);
    report.metric(format!("{prefix}energy_final"), traj.energies.last().expect("nonempty").energy);
    if cfg.flow.divergence == Divergence::Chi2 {
        report.metric(format!("{prefix}ess_final"), last.params.effective_sample_size());
        return Ok(report);
    }

    let mut worst: f64 = 0.0;
    for k in 0..fwd.out_dim() {
        let ks = ks_statistic_1d(&last.data.column(k), &refs.column(k));
        report.metric(format!("{prefix}ks_data_{k}"), ks);
        worst = worst.max(ks);
    }
    if let Some(&t) = cfg.thresholds.get("ks_data") {
        report.below(format!("{prefix}ks_data"), worst, t);
    }
    if cfg.n_ref == cfg.n_sim {
        let full = fully_determined_check(&last.data, refs, threshold(cfg, "w2_data"))?;
        merge(&mut report, full, cfg, prefix);
        for k in 0..fwd.in_dim() {
            let w = w2_1d(&last.params.column(k), &setup.truth.column(k))?;
            report.metric(format!("{prefix}w2_param_{k}"), w);
        }
    }
    for k in 0..fwd.in_dim() {
        let ks = ks_statistic_1d(&last.params.column(k), &setup.truth.column(k));
        report.metric(format!("{prefix}ks_param_{k}"), ks);
    }

    if let Some(map) = setup.forward.linear() {
        if map.is_under_determined() {
            let th = UnderThresholds {
                ks_data: threshold(cfg, "ks_data"),
                ks_complement: threshold(cfg, "ks_complement"),
            };
            let sub = under_determined_check(map, &last.params, init, refs, &th)?;
            merge(&mut report, sub, cfg, prefix);
            let drift = confinement_drift(map, traj);
            match cfg.thresholds.get("confinement") {
                Some(&t) => report.below(format!("{prefix}confinement"), drift, t),
                None => report.metric(format!("{prefix}confinement"), drift),
            }
        } else if map.is_over_determined() {
            let sub = over_determined_check(map, &last.data, refs, threshold(cfg, "ks_range"))?;
            merge(&mut report, sub, cfg, prefix);
        }
    }
    Ok(report)
}

/// `max_{j,t} ‖Ã (u_j(t) − u_j(0))‖_∞` over the recorded snapshots.
pub fn confinement_drift(map: &LinearMap, traj: &FlowTrajectory) -> f64 {
    let comp = map.complement();
    let u0 = &traj.initial().params;
    let mut worst: f64 = 0.0;
    for snap in &traj.snapshots {
        for (a, b) in snap.params.particles().zip(u0.particles()) {
            let d = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
            worst = worst.max((comp * d).amax());
        }
    }
    worst
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    setup: &Setup,
    traj: &FlowTrajectory,
    alt: Option<&FlowTrajectory>,
) -> Result<TheoryReport> {
    let mut report = evaluate_one(cfg, setup, traj, &setup.init, "")?;
    if let (Some(alt), Some(alt_init)) = (alt, &setup.alt_init) {
        let sub = evaluate_one(cfg, setup, alt, alt_init, "alt_")?;
        report.metrics.extend(sub.metrics);
        report.verdicts.extend(sub.verdicts);
        if let Some(map) = setup.forward.linear().filter(|m| m.is_under_determined()) {
            let comp = map.complement();
            let proj = |e: &ParticleEnsemble, k: usize| -> Vec<f64> {
                e.particles()
                    .map(|p| comp.row(k).iter().zip(p).map(|(a, b)| a * b).sum())
                    .collect()
            };
            let (a, b) = (&traj.last().params, &alt.last().params);
            let mut sep = f64::INFINITY;
            for k in 0..comp.nrows() {
                let ks = ks_statistic_1d(&proj(a, k), &proj(b, k));
                report.metric(format!("ks_separation_{k}"), ks);
                sep = sep.min(ks);
            }
            match cfg.thresholds.get("ks_separation") {
                Some(&t) => {
                    report.metrics.insert("ks_separation".into(), sep);
                    report.verdicts.insert("ks_separation".into(), Verdict { pass: sep > t, threshold: t, value: sep });
                }
                None => report.metric("ks_separation", sep),
            }
        }
    }
    Ok(report)
}

fn write_trajectory(dir: &Path, prefix: &str, traj: &FlowTrajectory, every: usize) -> Result<()> {
    fs::write(dir.join(format!("{prefix}energy.csv")), traj.energy_csv())?;
    let last = traj.snapshots.len() - 1;
    for (i, snap) in traj.snapshots.iter().enumerate() {
        let keep = i == 0 || i == last || (every > 0 && snap.iter % every == 0);
        if keep {
            snap.params.save_csv(dir.join(format!("{prefix}params_{:05}.csv", snap.iter)))?;
            snap.data.save_csv(dir.join(format!("{prefix}data_{:05}.csv", snap.iter)))?;
        }
    }
    traj.last().params.save_csv(dir.join(format!("{prefix}params_final.csv")))?;
    traj.last().data.save_csv(dir.join(format!("{prefix}data_final.csv")))?;
    Ok(())
}

/// Write all artifacts of `outcome` under `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &Outcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    outcome.setup.truth.save_csv(dir.join("truth_params.csv"))?;
    outcome.setup.reference_samples.save_csv(dir.join("reference_data.csv"))?;
    write_trajectory(dir, "", &outcome.trajectory, cfg.snapshot_every)?;
    if let Some(alt) = &outcome.alt_trajectory {
        write_trajectory(dir, "alt_", alt, cfg.snapshot_every)?;
    }
    fs::write(dir.join("report.json"), outcome.report.to_json() + "\n")?;
    Ok(())
}

/// Load, run and write one experiment. Relative `output_dir`s resolve against
/// the working directory.
pub fn cmd_run(config_path: &Path) -> Result<Outcome> {
    let cfg = load_config(config_path)?;
    let outcome = run_experiment(&cfg)?;
    write_outputs(&cfg, &outcome, &cfg.output_dir)?;
    Ok(outcome)
}

/// A config path, or the name of a shipped preset.
pub fn load_config(arg: &Path) -> Result<ExperimentConfig> {
    if !arg.exists() {
        if let Some(text) = arg.to_str().and_then(presets::get) {
            return ExperimentConfig::from_toml(text);
        }
    }
    ExperimentConfig::load(arg)
}

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub forward: String,
    pub u: Option<Vec<f64>>,
    pub h: Option<f64>,
    /// Rows of the matrix for `linear`.
    pub matrix: Option<Vec<Vec<f64>>>,
    pub n_cells: usize,
    pub seed: u64,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self { forward: "elliptic1d".into(), u: None, h: None, matrix: None, n_cells: 32, seed: 0 }
    }
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const DEFAULT_RECEIVERS: [[f64; 2]; 2] = [[0.5, 0.25], [0.5, 0.75]];

/// Adjoint gradient vs central differences along every unit direction and
/// five random `ξ`.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradCheck> {
    let (fwd, u0, h0): (Box<dyn ForwardMap>, Vec<f64>, f64) = match args.forward.as_str() {
        "linear" => {
            let rows = args.matrix.clone().unwrap_or_else(|| vec![vec![2.0, 0.75], vec![-1.0, 0.5], vec![0.3, 1.5]]);
            let map = LinearMap::from_rows(&rows)?;
            let m = map.in_dim();
            (Box::new(map), vec![0.5; m], 1.0)
        }
        "elliptic1d" => (Box::new(Elliptic1d::default()), vec![0.3, -1.2], 1e-6),
        "elliptic2d" => (
            Box::new(EllipticGrid2D::new(args.n_cells, DEFAULT_RECEIVERS.to_vec())?),
            vec![0.5, -0.5],
            1e-5,
        ),
        other => return Err(Error::Config(format!("unknown forward map '{other}'"))),
    };
    let u = args.u.clone().unwrap_or(u0);
    let h = args.h.unwrap_or(h0);
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("h = {h} must be positive")));
    }
    let mut rng = rng_from_seed(args.seed);
    let xis: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..fwd.out_dim()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    grad_check(fwd.as_ref(), &u, h, &xis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoryCase {
    Under,
    Over,
    Gd,
}

impl std::str::FromStr for TheoryCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "under" => Ok(TheoryCase::Under),
            "over" => Ok(TheoryCase::Over),
            "gd" => Ok(TheoryCase::Gd),
            _ => Err(Error::Config(format!("unknown theory case '{s}' (under, over, gd)"))),
        }
    }
}

/// Deterministic GD against its closed-form limit.
pub fn gd_report(map: &LinearMap, gd: &GdSpec, match_tol: f64) -> Result<TheoryReport> {
    let u = deterministic_gd(map, &gd.y_star, &gd.u_init, gd.dt, gd.n_iters)?;
    let lim = deterministic_gd_limit(map, &gd.y_star, &gd.u_init)?;
    let case = if map.is_under_determined() { Case::Under } else { Case::Fully };
    let mut report = TheoryReport::new(case);
    for (k, (a, b)) in u.iter().zip(&lim).enumerate() {
        report.metric(format!("gd_{k}"), *a);
        report.metric(format!("limit_{k}"), *b);
    }
    let gap = u.iter().zip(&lim).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    report.below("gd_vs_limit", gap, match_tol);
    let resid = (map.matrix() * DVector::from_column_slice(&lim) - DVector::from_column_slice(&gd.y_star)).amax();
    report.below("data_residual", resid, 1e-8);
    let diff: Vec<f64> = lim.iter().zip(&gd.u_init).map(|(a, b)| a - b).collect();
    let drift = if map.complement().nrows() > 0 { map.complement_apply(&diff)?.iter().fold(0.0, |m: f64, x| m.max(x.abs())) } else { 0.0 };
    report.below("complement_drift", drift, 1e-8);
    Ok(report)
}

pub fn cmd_theory(case: TheoryCase, config_path: &Path) -> Result<TheoryReport> {
    let cfg = load_config(config_path)?;
    let forward = cfg.forward.build()?;
    let Some(map) = forward.linear() else {
        return Err(Error::Config("theory checks need a linear forward map".into()));
    };
    match case {
        TheoryCase::Gd => {
            let gd = cfg.gd.as_ref().ok_or_else(|| Error::Config("config has no [gd] section".into()))?;
            if map.is_over_determined() {
                return Err(Error::Config("gd case needs rows <= columns".into()));
            }
            gd_report(map, gd, cfg.thresholds.get("gd_match").copied().unwrap_or(1e-6))
        }
        TheoryCase::Under | TheoryCase::Over => {
            let ok = if case == TheoryCase::Under { map.is_under_determined() } else { map.is_over_determined() };
            if !ok {
                return Err(Error::Config(format!("matrix shape does not match the '{case:?}' case")));
            }
            Ok(run_experiment(&cfg)?.report)
        }
    }
}

/// Process exit code for a failed command: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}
