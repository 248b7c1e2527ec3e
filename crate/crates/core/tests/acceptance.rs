//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL` line;
//! the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pushflow::ensemble::{rng_from_seed, Kde, ParticleEnsemble};
use pushflow::experiment::{
    self, presets, run_experiment, write_outputs, ExperimentConfig, GradcheckArgs, Outcome,
};
use pushflow::flow::{deterministic_gd, deterministic_gd_limit};
use pushflow::forward::LinearMap;
use pushflow::theory::TheoryReport;
use rand::Rng;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn preset(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(presets::get(name).expect("shipped preset")).expect("preset parses")
}

fn run(name: &str) -> Outcome {
    run_experiment(&preset(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn verdict(report: &TheoryReport, key: &str) -> (bool, f64) {
    let v = report.verdicts.get(key).unwrap_or_else(|| panic!("no verdict '{key}'"));
    (v.pass, v.value)
}

fn check_verdicts(report: &TheoryReport, keys: &[&str], detail: &mut Vec<String>) -> bool {
    let mut ok = true;
    for key in keys {
        let (pass, value) = verdict(report, key);
        ok &= pass;
        detail.push(format!("{key}={value:.4}"));
    }
    ok
}

fn timed(limit: Duration, f: impl FnOnce() -> (bool, String)) -> (bool, String, Duration) {
    let t = Instant::now();
    let (pass, mut detail) = f();
    let elapsed = t.elapsed();
    if elapsed > limit {
        detail.push_str(&format!(" over the {}s budget", limit.as_secs()));
    }
    (pass && elapsed <= limit, detail, elapsed)
}

fn gradcheck() -> (bool, String) {
    let cases = [("linear", 1e-12), ("elliptic1d", 1e-7), ("elliptic2d", 1e-5)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (forward, tol) in cases {
        let args = GradcheckArgs { forward: forward.into(), n_cells: 32, ..GradcheckArgs::default() };
        let g = experiment::cmd_gradcheck(&args).expect("gradcheck runs");
        ok &= g.max_rel_err < tol;
        detail.push(format!("{forward} {:.1e} (< {tol:.0e})", g.max_rel_err));
    }
    (ok, detail.join(", "))
}

/// Random flat full-rank matrix with condition number at most 10.
fn random_flat(rng: &mut impl Rng) -> LinearMap {
    loop {
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..=m);
        let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0));
        if let Ok(map) = LinearMap::new(a) {
            let s = map.singular_values();
            if s.max() / s.min() <= 10.0 {
                return map;
            }
        }
    }
}

fn gd_oracle() -> (bool, String) {
    let mut rng = rng_from_seed(2024);
    let mut maps: Vec<LinearMap> = (0..20).map(|_| random_flat(&mut rng)).collect();
    maps.push(LinearMap::from_rows(&[vec![2.0, 0.75]]).unwrap());
    let (mut gap, mut resid, mut drift) = (0.0f64, 0.0f64, 0.0f64);
    for map in &maps {
        let a = map.matrix();
        let y: Vec<f64> = (0..a.nrows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u0: Vec<f64> = (0..a.ncols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = map.singular_values();
        let dt = 1.0 / (s.max() * s.max());
        // Slowest mode contracts by 1 - dt s_min² per step.
        let rate = 1.0 - dt * s.min() * s.min();
        let n_iters = ((1e-13f64).ln() / rate.ln()).ceil() as usize + 10;
        let uf = deterministic_gd(map, &y, &u0, dt, n_iters).unwrap();
        let lim = deterministic_gd_limit(map, &y, &u0).unwrap();
        gap = gap.max(uf.iter().zip(&lim).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
        let r = a * DVector::from_column_slice(&uf) - DVector::from_column_slice(&y);
        resid = resid.max(r.amax());
        let d: Vec<f64> = uf.iter().zip(&u0).map(|(p, q)| p - q).collect();
        let u = map.param_basis();
        let dv = DVector::from_column_slice(&d);
        drift = drift.max((&dv - u * u.tr_mul(&dv)).amax());
    }
    let pass = gap < 1e-6 && resid < 1e-8 && drift < 1e-8;
    (pass, format!("{} maps, |gd-limit| {gap:.1e}, |Au-y*| {resid:.1e}, |(I-UU^T)du| {drift:.1e}", maps.len()))
}

/// `max_{j,t} ‖Ã (u_j(t) − u_j(0))‖₂` over every recorded iteration.
fn confinement(map: &LinearMap, out: &Outcome, alt: bool) -> f64 {
    let traj = if alt { out.alt_trajectory.as_ref().unwrap() } else { &out.trajectory };
    let comp = map.complement();
    let u0 = &traj.initial().params;
    let mut worst = 0.0f64;
    for snap in &traj.snapshots {
        for (p, q) in snap.params.particles().zip(u0.particles()) {
            let d = DVector::from_iterator(p.len(), p.iter().zip(q).map(|(x, y)| x - y));
            worst = worst.max((comp * d).norm());
        }
    }
    worst
}

fn weight_sums_conserved(out: &Outcome) -> f64 {
    out.trajectory
        .snapshots
        .iter()
        .map(|s| (s.params.weights().iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn kde_properties() -> (bool, String) {
    let mut rng = rng_from_seed(11);
    let pts: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ens = ParticleEnsemble::new(pts, 2).unwrap();
    let eps = 0.09;
    let kde = Kde::new(&ens, eps).unwrap();

    // Trapezoid rule on a box holding every kernel to 9 standard deviations.
    let (lo, hi, n) = (-1.0 - 9.0 * eps.sqrt(), 1.0 + 9.0 * eps.sqrt(), 240);
    let h = (hi - lo) / n as f64;
    let mut mass = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
            let y = [lo + i as f64 * h, lo + j as f64 * h];
            mass += wi * wj * kde.density(&y).unwrap();
        }
    }
    mass *= h * h;
    let norm_err = (mass - 1.0).abs();

    let mut score_err = 0.0f64;
    let fd = 1e-5;
    for _ in 0..20 {
        let y = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let s = kde.score(&y).unwrap();
        for k in 0..2 {
            let (mut a, mut b) = (y, y);
            a[k] += fd;
            b[k] -= fd;
            let g = (kde.log_density(&a).unwrap() - kde.log_density(&b).unwrap()) / (2.0 * fd);
            score_err = score_err.max((g - s[k]).abs() / s[k].abs().max(1.0));
        }
    }

    // Particle 0 listed twice equals weight 2/3 on it.
    let dup = ParticleEnsemble::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2], vec![-0.5, 0.8]]).unwrap();
    let wtd = ParticleEnsemble::from_rows(&[vec![0.3, -0.2], vec![-0.5, 0.8]])
        .unwrap()
        .with_weights(vec![2.0 / 3.0, 1.0 / 3.0])
        .unwrap();
    let (kd, kw) = (Kde::new(&dup, 0.2).unwrap(), Kde::new(&wtd, 0.2).unwrap());
    let mut dup_err = 0.0f64;
    for _ in 0..50 {
        let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let (a, b) = (kd.density(&y).unwrap(), kw.density(&y).unwrap());
        dup_err = dup_err.max((a - b).abs() / a.max(b));
        let (sa, sb) = (kd.score(&y).unwrap(), kw.score(&y).unwrap());
        dup_err = dup_err.max(sa.iter().zip(&sb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    let pass = norm_err < 1e-6 && score_err < 1e-5 && dup_err < 1e-12;
    (pass, format!("mass err {norm_err:.1e}, score vs FD {score_err:.1e}, duplication {dup_err:.1e}"))
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> (bool, String) {
    let cfg = preset("linear-under");
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("seq")];
    for (i, dir) in dirs.iter().enumerate() {
        pushflow::exec::set_sequential(i == 2);
        write_outputs(&cfg, &run_experiment(&cfg).unwrap(), dir).unwrap();
    }
    pushflow::exec::set_sequential(false);
    let a = read_dir_bytes(&dirs[0]);
    let same_seed = a == read_dir_bytes(&dirs[1]);
    let backends = a == read_dir_bytes(&dirs[2]);
    (same_seed && backends, format!("{} files, rerun identical {same_seed}, sequential identical {backends}", a.len()))
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let mut record = |name: &'static str, limit: u64, f: &mut dyn FnMut() -> (bool, String)| {
        let (pass, detail, elapsed) = timed(Duration::from_secs(limit), f);
        println!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        lines.push(Line { name, pass, detail, elapsed });
    };

    record("1 adjoint gradients", 10, &mut gradcheck);
    record("2 gradient descent limit", 5, &mut gd_oracle);

    let mut full = None;
    record("3 fully determined", 60, &mut || {
        let out = run("linear-full");
        let mut d = Vec::new();
        let ok = check_verdicts(&out.report, &["w2_data"], &mut d);
        full = Some(out);
        (ok, d.join(", "))
    });

    let mut under = None;
    record("4 under-determined", 120, &mut || {
        let out = run("linear-under");
        let mut d = Vec::new();
        let keys = ["ks_data", "ks_complement", "alt_ks_data", "alt_ks_complement", "ks_separation"];
        let ok = check_verdicts(&out.report, &keys, &mut d);
        under = Some(out);
        (ok, d.join(", "))
    });

    record("5 subspace confinement", 5, &mut || {
        let out = under.as_ref().expect("criterion 4 ran");
        let map = out.setup.forward.linear().unwrap();
        let worst = confinement(map, out, false).max(confinement(map, out, true));
        (worst < 1e-9, format!("max drift {worst:.2e}"))
    });

    record("6 over-determined", 120, &mut || {
        let out = run("linear-over");
        let mut d = Vec::new();
        let ok = check_verdicts(&out.report, &["ks_range"], &mut d);
        d.push(format!("raw ks_1={:.4} (unconstrained)", out.report.metrics["ks_raw_1"]));
        (ok, d.join(", "))
    });

    record("7 chi-squared weight flow", 60, &mut || {
        let out = run("linear-chi2");
        let steps = out.trajectory.snapshots.len() - 1;
        let drift = weight_sums_conserved(&out);
        let mut d = vec![format!("{steps} steps, weight sum drift {drift:.1e}")];
        let ok = check_verdicts(&out.report, &["energy_decay"], &mut d);
        (ok && steps >= 500 && drift < 1e-12, d.join(", "))
    });

    record("8 energy decay", 5, &mut || {
        let mut d = Vec::new();
        let mut ok = true;
        for (name, out) in [("linear-full", &full), ("linear-under", &under)] {
            let (pass, v) = verdict(&out.as_ref().expect("ran above").report, "energy_decay");
            ok &= pass;
            d.push(format!("{name} {v:.3}"));
        }
        (ok, d.join(", "))
    });

    record("9 elliptic reproductions", 900, &mut || {
        let mut d = Vec::new();
        let mut ok = true;
        let mut w2 = Vec::new();
        for name in ["elliptic1d-s1", "elliptic1d-s2"] {
            let out = run(name);
            let (pass, v) = verdict(&out.report, "ks_data");
            let w = [out.report.metrics["w2_param_0"], out.report.metrics["w2_param_1"]];
            ok &= pass;
            d.push(format!("{name} ks {v:.4} w2_param ({:.4}, {:.4})", w[0], w[1]));
            w2.push(w);
        }
        // Parameter error of the second setting is smaller in every coordinate.
        let stabler = (0..2).all(|k| w2[1][k] < w2[0][k]);
        d.push(format!("s2 below s1: {stabler}"));
        let out = run("elliptic2d");
        let mut sub = Vec::new();
        ok &= check_verdicts(&out.report, &["ks_data", "energy_decay"], &mut sub);
        d.push(format!("elliptic2d {}", sub.join(" ")));
        (ok && stabler, d.join(", "))
    });

    record("10 kde properties", 10, &mut kde_properties);
    record("11 determinism", 120, &mut determinism);

    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    let total: f64 = lines.iter().map(|l| l.elapsed.as_secs_f64()).sum();
    println!("{} of {} criteria passed in {total:.0}s", lines.len() - failed.len(), lines.len());
    for l in &failed {
        eprintln!("failed: {} ({})", l.name, l.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
