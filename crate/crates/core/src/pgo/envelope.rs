//! Symmetric positive-definite solver in envelope (skyline) storage.
//!
//! Row `i` stores the lower-triangular entries from its first structural
//! non-zero up to the diagonal. Cholesky fill-in never leaves this profile,
//! so banded odometry blocks plus a few long loop rows stay cheap.

use nalgebra::DVector;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("matrix is not positive definite at row {0}")]
pub struct NotPositiveDefinite(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeMatrix {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl EnvelopeMatrix {
    /// Zero matrix with the given per-row first column (`first[i] ≤ i`).
    pub fn with_profile(first: Vec<usize>) -> Self {
        let rows = first.iter().enumerate().map(|(i, &f)| vec![0.0; i + 1 - f]).collect();
        EnvelopeMatrix { first, rows }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Stored entries, a measure of solve cost.
    pub fn stored(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    /// Adds `v` to entry `(i, j)`, `j ≤ i`, which must lie in the profile.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i], "({i}, {j}) outside envelope");
        let f = self.first[i];
        self.rows[i][j - f] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.dim() {
            self.add(i, i, v);
        }
    }

    /// In-place Cholesky factor `L` (same storage, lower triangle).
    pub fn cholesky(mut self) -> Result<EnvelopeMatrix, NotPositiveDefinite> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let mut s = self.rows[i][j - fi];
                for k in k0..j {
                    s -= self.rows[i][k - fi] * self.rows[j][k - fj];
                }
                if j < i {
                    self.rows[i][j - fi] = s / self.rows[j][j - fj];
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(NotPositiveDefinite(i));
                    }
                    self.rows[i][i - fi] = s.sqrt();
                }
            }
        }
        Ok(self)
    }

    /// Solves `L Lᵀ x = b` with `self` holding `L`.
    pub fn solve_factored(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let fi = self.first[i];
            let mut s = y[i];
            for k in fi..i {
                s -= self.rows[i][k - fi] * y[k];
            }
            y[i] = s / self.rows[i][i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            y[i] /= self.rows[i][i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.rows[i][k - fi] * yi;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn from_dense(a: &DMatrix<f64>) -> EnvelopeMatrix {
        let n = a.nrows();
        let first = (0..n)
            .map(|i| (0..=i).find(|&j| a[(i, j)] != 0.0).unwrap_or(i))
            .collect();
        let mut m = EnvelopeMatrix::with_profile(first);
        for i in 0..n {
            for j in m.first[i]..=i {
                m.add(i, j, a[(i, j)]);
            }
        }
        m
    }

    #[test]
    fn indefinite_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(from_dense(&a).cholesky().unwrap_err(), NotPositiveDefinite(1));
    }

    #[test]
    fn symmetric_get() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let m = from_dense(&a);
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.stored(), 5);
    }

    proptest! {
        #[test]
        fn matches_dense_cholesky(seed in 0u64..500, n in 2usize..25, band in 1usize..4) {
            // Banded SPD matrix plus one long coupling row, like a loop closure.
            let mut a = DMatrix::<f64>::zeros(n, n);
            let v = |k: u64| ((seed * 31 + k * 17) % 97) as f64 / 97.0 - 0.5;
            for i in 0..n {
                for j in i.saturating_sub(band)..i {
                    let x = v((i * n + j) as u64);
                    a[(i, j)] = x;
                    a[(j, i)] = x;
                }
            }
            let x = v(1000);
            a[(n - 1, 0)] += x;
            a[(0, n - 1)] += x;
            for i in 0..n {
                a[(i, i)] = 2.0 * band as f64 + 2.0;
            }
            let b = DVector::from_fn(n, |i, _| v(i as u64 + 5000));
            let x_env = from_dense(&a).cholesky().unwrap().solve_factored(&b);
            let x_dense = a.clone().cholesky().unwrap().solve(&b);
            prop_assert!((x_env - x_dense).norm() < 1e-12);
        }
    }
}
