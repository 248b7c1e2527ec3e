//! Diagnostics for the linear theory: 1-D transport and KS distances,
//! data-space projections and marginal verdicts.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::check_dim;
use crate::forward::linear::complement_rows;
use crate::forward::{push_forward, LinearMap};
use crate::{Error, Result};

/// `W₂` between two equal-size samples on the line (sorted pairing).
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("w2_1d needs equal lengths, got {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("w2_1d of empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        // Step past every tie at x in both samples before comparing.
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Split `y` into `V V^T y` and the remainder.
pub fn project_data(map: &LinearMap, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = map.data_basis();
    check_dim(v.nrows(), y.len())?;
    let yv = DVector::from_column_slice(y);
    let ya = v * v.tr_mul(&yv);
    let perp: Vec<f64> = y.iter().zip(ya.iter()).map(|(a, b)| a - b).collect();
    Ok((ya.as_slice().to_vec(), perp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Fully,
    Under,
    Over,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub case: Case,
    pub metrics: BTreeMap<String, f64>,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl TheoryReport {
    pub fn new(case: Case) -> Self {
        Self { case, metrics: BTreeMap::new(), verdicts: BTreeMap::new() }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Record `value` under `name` and judge it against `value < threshold`.
    pub fn below(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        let name = name.into();
        self.metrics.insert(name.clone(), value);
        self.verdicts.insert(name, Verdict { pass: value < threshold, threshold, value });
    }

    pub fn passed(&self) -> bool {
        self.verdicts.values().all(|v| v.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnderThresholds {
    pub ks_data: f64,
    pub ks_complement: f64,
}

impl Default for UnderThresholds {
    fn default() -> Self {
        Self { ks_data: 0.05, ks_complement: 0.08 }
    }
}

/// Coordinate `k` of `M x_j` for every particle.
fn coords(rows: &nalgebra::DMatrix<f64>, ens: &ParticleEnsemble) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(ens.len()); rows.nrows()];
    for p in ens.particles() {
        let x = DVector::from_column_slice(p);
        let z = rows * x;
        for (k, v) in z.iter().enumerate() {
            out[k].push(*v);
        }
    }
    out
}

/// Data marginals `A u` must match the reference and null-space marginals
/// `Ã u` must match their initial values. Multi-dimensional marginals are
/// compared coordinate by coordinate; the worst coordinate is judged.
pub fn under_determined_check(
    map: &LinearMap,
    us_final: &ParticleEnsemble,
    us_init: &ParticleEnsemble,
    ref_samples_y: &ParticleEnsemble,
    thresholds: &UnderThresholds,
) -> Result<TheoryReport> {
    if !map.is_under_determined() {
        return Err(Error::InvalidInput("under_determined_check needs a flat matrix".into()));
    }
    check_dim(map.matrix().ncols(), us_final.dim())?;
    check_dim(map.matrix().ncols(), us_init.dim())?;
    check_dim(map.matrix().nrows(), ref_samples_y.dim())?;
    let mut report = TheoryReport::new(Case::Under);
    let ys = push_forward(map, us_final)?;
    let mut worst: f64 = 0.0;
    for k in 0..ys.dim() {
        let ks = ks_statistic_1d(&ys.column(k), &ref_samples_y.column(k));
        report.metric(format!("ks_data_{k}"), ks);
        worst = worst.max(ks);
    }
    report.below("ks_data", worst, thresholds.ks_data);

    let comp = map.complement();
    let fin = coords(comp, us_final);
    let ini = coords(comp, us_init);
    let mut worst: f64 = 0.0;
    for k in 0..comp.nrows() {
        let ks = ks_statistic_1d(&fin[k], &ini[k]);
        report.metric(format!("ks_complement_{k}"), ks);
        worst = worst.max(ks);
    }
    report.below("ks_complement", worst, thresholds.ks_complement);
    Ok(report)
}

/// Compare `V^T y` marginals of the simulated and reference data. The
/// orthogonal part and raw coordinates are reported but not judged.
pub fn over_determined_check(
    map: &LinearMap,
    ys_final: &ParticleEnsemble,
    ref_samples: &ParticleEnsemble,
    ks_range: f64,
) -> Result<TheoryReport> {
    if !map.is_over_determined() {
        return Err(Error::InvalidInput("over_determined_check needs a tall matrix".into()));
    }
    let n = map.matrix().nrows();
    check_dim(n, ys_final.dim())?;
    check_dim(n, ref_samples.dim())?;
    let mut report = TheoryReport::new(Case::Over);
    let vt = map.data_basis().transpose();
    let (sim, refr) = (coords(&vt, ys_final), coords(&vt, ref_samples));
    let mut worst: f64 = 0.0;
    for k in 0..vt.nrows() {
        let ks = ks_statistic_1d(&sim[k], &refr[k]);
        report.metric(format!("ks_range_{k}"), ks);
        worst = worst.max(ks);
    }
    report.below("ks_range", worst, ks_range);

    let perp = complement_rows(map.data_basis());
    let (sim, refr) = (coords(&perp, ys_final), coords(&perp, ref_samples));
    for k in 0..perp.nrows() {
        report.metric(format!("ks_perp_{k}"), ks_statistic_1d(&sim[k], &refr[k]));
    }
    for k in 0..n {
        report.metric(format!("ks_raw_{k}"), ks_statistic_1d(&ys_final.column(k), &ref_samples.column(k)));
    }
    Ok(report)
}

/// Per-coordinate `W₂` of two equal-size data ensembles; judged on the worst.
pub fn fully_determined_check(ys_final: &ParticleEnsemble, ref_samples: &ParticleEnsemble, w2_max: f64) -> Result<TheoryReport> {
    check_dim(ref_samples.dim(), ys_final.dim())?;
    let mut report = TheoryReport::new(Case::Fully);
    let mut worst: f64 = 0.0;
    for k in 0..ys_final.dim() {
        let w = w2_1d(&ys_final.column(k), &ref_samples.column(k))?;
        report.metric(format!("w2_data_{k}"), w);
        worst = worst.max(w);
    }
    report.below("w2_data", worst, w2_max);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayCheck {
    pub pass: bool,
    pub fraction: f64,
}

/// Fraction of consecutive pairs with `e[i+1] <= e[i]`.
pub fn energy_decay_check(energies: &[f64], min_fraction: f64) -> Result<DecayCheck> {
    if energies.len() < 2 {
        return Err(Error::InvalidInput("need at least two energies".into()));
    }
    let steps = energies.len() - 1;
    let down = energies.windows(2).filter(|w| w[1] <= w[0]).count();
    let fraction = down as f64 / steps as f64;
    Ok(DecayCheck { pass: fraction >= min_fraction, fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::sample_gaussian;
    use nalgebra::DMatrix;

    #[test]
    fn w2_examples() {
        assert_eq!(w2_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(w2_1d(&[2.0, 0.0], &[3.0, 1.0]).unwrap(), 1.0);
        assert_eq!(w2_1d(&[0.0], &[-2.5]).unwrap(), 2.5);
        assert!(w2_1d(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic_1d(&[0.3, -1.0, 2.0], &[2.0, 0.3, -1.0]), 0.0);
        assert_eq!(ks_statistic_1d(&[0.0; 4], &[1.0; 7]), 1.0);
        assert_eq!(ks_statistic_1d(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((ks_statistic_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0])).abs() < 1e-15);
        assert!((ks_statistic_1d(&[0.0, 1.0, 2.0], &[0.5]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let e1 = LinearMap::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let (a, p) = project_data(&e1, &[3.0, 4.0]).unwrap();
        assert_eq!(a, vec![3.0, 0.0]);
        assert_eq!(p, vec![0.0, 4.0]);

        let tall = LinearMap::from_rows(&[vec![2.0], vec![1.0]]).unwrap();
        let (_, p) = project_data(&tall, &[4.0, 2.0]).unwrap();
        assert!(p.iter().all(|x| x.abs() < 1e-12));
        let (a, _) = project_data(&tall, &[1.0, -2.0]).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn decay_examples() {
        assert_eq!(energy_decay_check(&[3.0, 2.0, 1.0], 0.9).unwrap(), DecayCheck { pass: true, fraction: 1.0 });
        assert_eq!(energy_decay_check(&[1.0, 1.0, 1.0], 0.9).unwrap().fraction, 1.0);
        assert_eq!(energy_decay_check(&[1.0, 2.0, 3.0], 0.9).unwrap(), DecayCheck { pass: false, fraction: 0.0 });
        assert!(energy_decay_check(&[1.0], 0.5).is_err());
    }

    fn flat() -> LinearMap {
        LinearMap::from_rows(&[vec![2.0, 0.75]]).unwrap()
    }

    #[test]
    fn under_check_degenerate_equilibrium() {
        let map = flat();
        let us = sample_gaussian(&[0.0, 0.0], &DMatrix::identity(2, 2), 200, 4).unwrap();
        let ys = push_forward(&map, &us).unwrap();
        let r = under_determined_check(&map, &us, &us, &ys, &UnderThresholds::default()).unwrap();
        assert_eq!(r.metrics["ks_data"], 0.0);
        assert_eq!(r.metrics["ks_complement"], 0.0);
        assert!(r.passed());
        for name in r.verdicts.keys() {
            assert!(r.metrics.contains_key(name));
        }
    }

    #[test]
    fn under_check_rejects_row_space_shift() {
        let map = flat();
        let us = sample_gaussian(&[0.0, 0.0], &DMatrix::identity(2, 2), 200, 4).unwrap();
        let ys = push_forward(&map, &us).unwrap();
        let u = map.param_basis().column(0).into_owned();
        let shifted: Vec<f64> = us.particles().flat_map(|p| vec![p[0] + 2.0 * u[0], p[1] + 2.0 * u[1]]).collect();
        let moved = us.with_positions(shifted, 2).unwrap();
        let r = under_determined_check(&map, &moved, &us, &ys, &UnderThresholds::default()).unwrap();
        assert!(!r.verdicts["ks_data"].pass);
        assert!(r.verdicts["ks_complement"].pass);
        let tall = LinearMap::from_rows(&[vec![2.0], vec![1.0]]).unwrap();
        assert!(under_determined_check(&tall, &us, &us, &ys, &UnderThresholds::default()).is_err());
    }

    #[test]
    fn over_check_ignores_perpendicular_part() {
        let map = LinearMap::from_rows(&[vec![2.0], vec![1.0]]).unwrap();
        let us = sample_gaussian(&[0.0], &DMatrix::identity(1, 1), 300, 9).unwrap();
        let ys = push_forward(&map, &us).unwrap();
        let r = over_determined_check(&map, &ys, &ys, 0.05).unwrap();
        assert!(r.passed() && r.metrics["ks_range"] == 0.0);

        let perp = [1.0 / 5f64.sqrt(), -2.0 / 5f64.sqrt()];
        let wiggled: Vec<f64> = ys
            .particles()
            .enumerate()
            .flat_map(|(j, p)| {
                let s = (j as f64).sin();
                vec![p[0] + s * perp[0], p[1] + s * perp[1]]
            })
            .collect();
        let wiggled = ys.with_positions(wiggled, 2).unwrap();
        let r2 = over_determined_check(&map, &wiggled, &ys, 0.05).unwrap();
        // Rounding in V^T may reorder near-ties, worth at most one step of the ECDF.
        assert!(r2.verdicts["ks_range"].pass);
        assert!(r2.metrics["ks_range"] <= 1.0 / 300.0 + 1e-15);
        assert!(r2.metrics["ks_perp_0"] > 0.0);
    }

    #[test]
    fn report_json_shape() {
        let mut r = TheoryReport::new(Case::Fully);
        r.below("w2_data", 0.1, 0.15);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["case"], "fully");
        assert_eq!(v["verdicts"]["w2_data"]["pass"], true);
        assert_eq!(v["metrics"]["w2_data"], 0.1);
    }
}
