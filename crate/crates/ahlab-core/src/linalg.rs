//! Banded linear algebra: LU factorisation with partial pivoting in the
//! LAPACK band layout, sized for high-order finite-difference stencils.

use crate::grid::DiffOp;
use crate::{AhError, Result};

/// Assembles diag + Σ c_k(x)·D_k as a banded matrix from stencil rows.
pub fn assemble_operator(m: usize, diag: &[f64], terms: &[(&[f64], &DiffOp)]) -> Banded {
    let bw = terms.iter().map(|(_, op)| op.bandwidth()).max().unwrap_or(0);
    let mut mat = Banded::zeros(m, bw, bw);
    for i in 0..m {
        mat.add(i, i, diag[i]);
    }
    for (c, op) in terms {
        for (i, row) in op.rows().iter().enumerate() {
            for &(j, w) in row {
                mat.add(i, j, c[i] * w);
            }
        }
    }
    mat
}

/// Square banded matrix with `kl` sub- and `ku` superdiagonals.
#[derive(Debug, Clone)]
pub struct Banded {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    // Column-major band storage with kl extra rows for pivoting fill-in:
    // entry (i, j) lives at data[j * ld + (kl + ku + i - j)].
    ld: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        Banded { n, kl, ku, ld, data: vec![0.0; ld * n] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i + self.kl + self.ku && i <= j + self.kl);
        j * self.ld + self.kl + self.ku + i - j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i > j + self.kl || j > i + self.kl + self.ku {
            return 0.0;
        }
        self.data[self.idx(i, j)]
    }

    /// Adds `v` at (i, j); panics if the entry falls outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            (j <= i && i - j <= self.kl) || (j > i && j - i <= self.ku),
            "entry ({i}, {j}) outside band kl={}, ku={}",
            self.kl,
            self.ku
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!((j <= i && i - j <= self.kl) || (j > i && j - i <= self.ku));
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    /// Clears row `i` inside the band (for replacing it with a boundary row).
    pub fn clear_row(&mut self, i: usize) {
        let lo = i.saturating_sub(self.kl);
        let hi = (i + self.ku).min(self.n - 1);
        for j in lo..=hi {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                y[i] += self.get(i, j) * x[j];
            }
        }
        y
    }

    /// Factors in place with partial pivoting and solves A x = b.
    pub fn solve(mut self, b: &[f64]) -> Result<Vec<f64>> {
        let lu = self.factor()?;
        Ok(lu.solve(b))
    }

    /// LU factorisation with partial pivoting (band dgbtrf, unblocked).
    pub fn factor(&mut self) -> Result<BandedLu> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kv = kl + ku; // effective upper bandwidth after pivoting
        let mut ipiv = vec![0usize; n];
        for k in 0..n {
            let pmax = (k + kl).min(n - 1);
            let mut p = k;
            let mut pv = self.get(k, k).abs();
            for i in (k + 1)..=pmax {
                let v = self.get(i, k).abs();
                if v > pv {
                    pv = v;
                    p = i;
                }
            }
            if pv == 0.0 {
                return Err(AhError::Solver {
                    context: format!("banded LU: zero pivot column {k}"),
                    trace: vec![],
                });
            }
            ipiv[k] = p;
            if p != k {
                let jhi = (k + kv).min(n - 1);
                for j in k..=jhi {
                    let a = self.get(k, j);
                    let b2 = self.get(p, j);
                    let ik = self.idx(k, j);
                    self.data[ik] = b2;
                    let ip = self.idx(p, j);
                    self.data[ip] = a;
                }
            }
            let piv = self.get(k, k);
            let imax = (k + kl).min(n - 1);
            for i in (k + 1)..=imax {
                let m = self.get(i, k) / piv;
                let ik = self.idx(i, k);
                self.data[ik] = m;
                if m != 0.0 {
                    let jhi = (k + kv).min(n - 1);
                    for j in (k + 1)..=jhi {
                        let upd = self.get(i, j) - m * self.get(k, j);
                        let ij = self.idx(i, j);
                        self.data[ij] = upd;
                    }
                }
            }
        }
        Ok(BandedLu { mat: self.clone(), ipiv })
    }
}

/// Factored banded system, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct BandedLu {
    mat: Banded,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.mat.n;
        let (kl, ku) = (self.mat.kl, self.mat.ku);
        let kv = kl + ku;
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                x.swap(k, p);
            }
            let imax = (k + kl).min(n - 1);
            for i in (k + 1)..=imax {
                x[i] -= self.mat.get(i, k) * x[k];
            }
        }
        for k in (0..n).rev() {
            let jhi = (k + kv).min(n - 1);
            for j in (k + 1)..=jhi {
                x[k] -= self.mat.get(k, j) * x[j];
            }
            x[k] /= self.mat.get(k, k);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m = a.to_vec();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
            m.swap(k, p);
            x.swap(k, p);
            for i in (k + 1)..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            for j in (k + 1)..n {
                x[k] -= m[k][j] * x[j];
            }
            x[k] /= m[k][k];
        }
        x
    }

    #[test]
    fn matches_dense_on_random_band() {
        let n = 60;
        let (kl, ku) = (4, 3);
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut rng = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut band = Banded::zeros(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v = rng() + if i == j { 4.0 } else { 0.0 };
                band.set(i, j, v);
                dense[i][j] = v;
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng()).collect();
        let x = band.solve(&b).unwrap();
        let xd = dense_solve(&dense, &b);
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-10, "row {i}: {} vs {}", x[i], xd[i]);
        }
    }

    #[test]
    fn pivoting_handles_small_diagonal() {
        let n = 5;
        let mut band = Banded::zeros(n, 2, 2);
        for i in 0..n {
            band.set(i, i, 1e-14);
            if i + 1 < n {
                band.set(i, i + 1, 1.0);
                band.set(i + 1, i, 1.0);
            }
        }
        let b = vec![1.0; n];
        let a = band.clone();
        let x = band.solve(&b).unwrap();
        let r = a.mul_vec(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn factor_reuse_multiple_rhs() {
        let n = 40;
        let mut band = Banded::zeros(n, 3, 3);
        for i in 0..n {
            band.set(i, i, 6.0);
            for d in 1..=3usize {
                if i >= d {
                    band.set(i, i - d, -1.0 / d as f64);
                }
                if i + d < n {
                    band.set(i, i + d, -1.0 / d as f64);
                }
            }
        }
        let a = band.clone();
        let lu = band.factor().unwrap();
        for k in 0..3 {
            let b: Vec<f64> = (0..n).map(|i| ((i + k) as f64).sin()).collect();
            let x = lu.solve(&b);
            let r = a.mul_vec(&x);
            for i in 0..n {
                assert!((r[i] - b[i]).abs() < 1e-11);
            }
        }
    }
}
