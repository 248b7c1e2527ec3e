//! Symmetric positive definite band matrices and their Cholesky factors.

use crate::{Error, Result};

/// Lower band of a symmetric matrix: row `i` stores columns `i - bw ..= i`.
#[derive(Debug, Clone)]
pub(crate) struct BandedSpd {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, band: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Add `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        let s = self.slot(i, j);
        self.band[s] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j <= i { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.band[self.slot(i, j)]
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..i {
                let a = self.band[self.slot(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.band[self.slot(i, i)] * x[i];
        }
        y
    }

    pub fn factor(&self) -> Result<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        let mut l = BandedSpd::zeros(n, bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let ri = i * (bw + 1) + bw - i;
                let rj = j * (bw + 1) + bw - j;
                let s = self.get(i, j) - dot(&l.band[ri + klo..ri + j], &l.band[rj + klo..rj + j]);
                let slot = ri + j;
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::SolverFailed { residual: f64::INFINITY });
                    }
                    l.band[slot] = s.sqrt();
                } else {
                    l.band[slot] = s / l.band[rj + j];
                }
            }
        }
        Ok(BandedCholesky { l })
    }
}

/// Dot product with four interleaved partial sums; the summation order is
/// fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone)]
pub(crate) struct BandedCholesky {
    l: BandedSpd,
}

impl BandedCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.l.n, self.l.bw);
        let band = &self.l.band;
        let row = |i: usize| i * (bw + 1) + bw - i;
        let mut x = b.to_vec();
        for i in 0..n {
            let ri = row(i);
            let lo = i.saturating_sub(bw);
            x[i] = (x[i] - dot(&band[ri + lo..ri + i], &x[lo..i])) / band[ri + i];
        }
        for i in (0..n).rev() {
            x[i] /= band[row(i) + i];
            let xi = x[i];
            let ri = row(i);
            for k in i.saturating_sub(bw)..i {
                x[k] -= band[ri + k] * xi;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_solve() {
        let n = 50;
        let mut a = BandedSpd::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = a.mul(&x_true);
        let x = a.factor().unwrap().solve(&b);
        for (p, q) in x.iter().zip(&x_true) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn wide_band_against_dense() {
        let (n, bw) = (12, 4);
        let mut a = BandedSpd::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 10.0 + i as f64);
            for j in i.saturating_sub(bw)..i {
                a.add(i, j, ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
            }
        }
        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let x = a.factor().unwrap().solve(&b);
        let xd = dense.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b));
        for (p, q) in x.iter().zip(xd.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_fails() {
        let mut a = BandedSpd::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(a.factor().is_err());
    }
}
