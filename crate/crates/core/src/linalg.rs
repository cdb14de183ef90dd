//! Small dense/banded linear algebra for the mode solver.

use crate::num::Real;

/// Square band matrix with `kl` sub- and `ku` super-diagonals, factorized in
/// place by Gaussian elimination with partial pivoting.
#[derive(Debug, Clone)]
pub struct BandLu<T> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<T>,
    pivots: Vec<usize>,
}

impl<T: Real> BandLu<T> {
    /// Zero matrix with room for the fill-in pivoting produces.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![T::zero(); n * width],
            pivots: Vec::new(),
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i},{j}) outside the band"
        );
        let k = self.at(i, j);
        self.data[k] += v;
    }

    /// Factorizes; returns `None` if a zero pivot is met.
    pub fn factorize(mut self) -> Option<Self> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        self.pivots = Vec::with_capacity(n);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.at(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.data[self.at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > T::zero()) {
                return None;
            }
            self.pivots.push(p);
            let last_col = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.at(k, j), self.at(p, j));
                    self.data.swap(a, b);
                }
            }
            let inv = T::one() / self.data[self.at(k, k)];
            for i in k + 1..=last_row {
                let ik = self.at(i, k);
                let l = self.data[ik] * inv;
                self.data[ik] = l;
                if l == T::zero() {
                    continue;
                }
                let row_k = k * self.width + kl - k;
                let row_i = i * self.width + kl - i;
                for j in k + 1..=last_col {
                    let u = self.data[row_k + j];
                    self.data[row_i + j] -= l * u;
                }
            }
        }
        Some(self)
    }

    /// Solves `A x = b` in place using the factorization.
    pub fn solve(&self, b: &mut [T]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        assert_eq!(b.len(), n);
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                b[i] -= self.data[self.at(i, k)] * bk;
            }
        }
        for i in (0..n).rev() {
            let row = i * self.width + kl - i;
            let mut s = b[i];
            for j in i + 1..=(i + kl + ku).min(n - 1) {
                s -= self.data[row + j] * b[j];
            }
            b[i] = s / self.data[row + i];
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix (row-major `n×n`) by cyclic
/// Jacobi rotations. Returns eigenvalues and column eigenvectors (row-major).
pub fn symmetric_eigen<T: Real>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut a = a.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += a[i * n + i] * a[i * n + i];
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
    }

    #[test]
    fn band_lu_solves_indefinite_system_needing_pivots() {
        let n = 40;
        let (kl, ku) = (3, 2);
        let mut dense = vec![0.0; n * n];
        let mut lu = BandLu::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                // tiny diagonal forces row exchanges
                let v = if i == j { 1e-3 * (i as f64 - 20.0) } else { ((i * 7 + j * 3) % 11) as f64 - 5.0 };
                dense[i * n + j] = v;
                lu.add(i, j, v);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = dense_mul(&dense, &x, n);
        lu.factorize().unwrap().solve(&mut b);
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn singular_band_detected() {
        let lu = BandLu::<f64>::zeros(3, 1, 1);
        assert!(lu.factorize().is_none());
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        // tridiagonal [-1, 2, -1]: eigenvalues 2 - 2 cos(kπ/(n+1))
        let n = 6;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 2.0;
            if i + 1 < n {
                a[i * n + i + 1] = -1.0;
                a[(i + 1) * n + i] = -1.0;
            }
        }
        let (mut w, v) = symmetric_eigen(&a, n);
        for k in 0..n {
            let col: Vec<f64> = (0..n).map(|i| v[i * n + k]).collect();
            let av = dense_mul(&a, &col, n);
            for i in 0..n {
                assert!((av[i] - w[k] * col[i]).abs() < 1e-12);
            }
        }
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, lam) in w.iter().enumerate() {
            let exact = 2.0 - 2.0 * ((k + 1) as f64 * std::f64::consts::PI / (n + 1) as f64).cos();
            assert!((lam - exact).abs() < 1e-12);
        }
    }
}
