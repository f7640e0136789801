//! Householder QR with column pivoting.

use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

/// Packed factorization `A P = Q R`.
///
/// `factors` holds `R` on and above the diagonal and the Householder vectors
/// (with an implicit leading 1) below it.
#[derive(Debug, Clone)]
pub struct ColPivQr<T: Scalar> {
    factors: DMatrix<T>,
    tau: Vec<T>,
    /// `perm[k]` is the original column stored in position `k`.
    perm: Vec<usize>,
    rank: usize,
}

impl<T: Scalar> ColPivQr<T> {
    /// Factorizes `a`. Columns whose pivot falls below `rtol · |R₀₀|` are
    /// counted as rank-deficient.
    pub fn new(a: &DMatrix<T>, rtol: T) -> Self {
        let (m, n) = a.shape();
        let steps = m.min(n);
        let mut f = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut tau = vec![T::zero(); steps];

        for k in 0..steps {
            // Remaining column norms are recomputed each step; the systems
            // here are tall and only 6 columns wide.
            let norm_of = |f: &DMatrix<T>, j: usize| f.view((k, j), (m - k, 1)).norm();
            let mut pivot = k;
            let mut best = norm_of(&f, k);
            for j in k + 1..n {
                let nj = norm_of(&f, j);
                if nj > best {
                    best = nj;
                    pivot = j;
                }
            }
            if pivot != k {
                f.swap_columns(k, pivot);
                perm.swap(k, pivot);
            }

            let x0 = f[(k, k)];
            let norm = best;
            if norm == T::zero() {
                tau[k] = T::zero();
                continue;
            }
            let alpha = if x0 >= T::zero() { -norm } else { norm };
            let v0 = x0 - alpha;
            // H = I - tau v vᵀ with v = [1, x[1..] / v0].
            for i in k + 1..m {
                f[(i, k)] /= v0;
            }
            let t = (alpha - x0) / alpha;
            tau[k] = t;
            f[(k, k)] = alpha;

            for j in k + 1..n {
                let mut s = f[(k, j)];
                for i in k + 1..m {
                    s += f[(i, k)] * f[(i, j)];
                }
                s *= t;
                f[(k, j)] -= s;
                for i in k + 1..m {
                    let vik = f[(i, k)];
                    f[(i, j)] -= s * vik;
                }
            }
        }

        let r00 = if steps > 0 { f[(0, 0)].abs() } else { T::zero() };
        let rank = (0..steps)
            .take_while(|&k| r00 > T::zero() && f[(k, k)].abs() > rtol * r00)
            .count();
        Self {
            factors: f,
            tau,
            perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Upper-triangular factor, `min(m, n) × n`.
    pub fn r(&self) -> DMatrix<T> {
        let (m, n) = self.factors.shape();
        let k = m.min(n);
        DMatrix::from_fn(k, n, |i, j| if j >= i { self.factors[(i, j)] } else { T::zero() })
    }

    /// `Qᵀ b`.
    pub fn q_transpose_mul(&self, b: &DVector<T>) -> DVector<T> {
        let m = self.factors.nrows();
        let mut y = b.clone();
        for (k, &t) in self.tau.iter().enumerate() {
            let mut s = y[k];
            for i in k + 1..m {
                s += self.factors[(i, k)] * y[i];
            }
            s *= t;
            y[k] -= s;
            for i in k + 1..m {
                y[i] -= s * self.factors[(i, k)];
            }
        }
        y
    }

    /// Least-squares solution of `A x ≈ b`. `None` if `A` is rank deficient.
    pub fn solve(&self, b: &DVector<T>) -> Option<DVector<T>> {
        let n = self.factors.ncols();
        if self.rank < n || self.factors.nrows() < n {
            return None;
        }
        let y = self.q_transpose_mul(b);
        let mut z = DVector::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.factors[(i, j)] * z[j];
            }
            z[i] = s / self.factors[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (k, &col) in self.perm.iter().enumerate() {
            x[col] = z[k];
        }
        Some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn reconstructs_permuted_matrix() {
        let a = random(9, 6, 1);
        let qr = ColPivQr::new(&a, 1e-12);
        assert_eq!(qr.rank(), 6);
        // Rebuild A P column by column: A P e_k = Q R e_k, so compare Qᵀ A P with R.
        let r = qr.r();
        for (k, &col) in qr.permutation().iter().enumerate() {
            let qt_a = qr.q_transpose_mul(&a.column(col).into_owned());
            for i in 0..6 {
                assert!((qt_a[i] - r[(i, k)]).abs() < 1e-12);
            }
            for i in 6..9 {
                assert!(qt_a[i].abs() < 1e-12);
            }
        }
        // Pivoting makes |R_kk| non-increasing.
        for k in 1..6 {
            assert!(r[(k, k)].abs() <= r[(k - 1, k - 1)].abs() + 1e-15);
        }
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let a = random(12, 6, 2);
        let b = DVector::from_fn(12, |i, _| (i as f64).sin());
        let x = ColPivQr::new(&a, 1e-12).solve(&b).unwrap();
        let ata = a.transpose() * &a;
        let x_ne = ata.cholesky().unwrap().solve(&(a.transpose() * &b));
        assert!((x - x_ne).norm() < 1e-10);
    }

    #[test]
    fn detects_rank_deficiency() {
        let mut a = random(9, 6, 3);
        let c = a.column(0) * 2.0 - a.column(3);
        a.set_column(5, &c);
        let qr = ColPivQr::new(&a, 1e-9);
        assert_eq!(qr.rank(), 5);
        assert!(qr.solve(&DVector::zeros(9)).is_none());
    }
}
