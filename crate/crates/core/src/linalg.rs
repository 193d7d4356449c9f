//! Small dense linear algebra: Cholesky factorisation and a symmetric
//! eigensolver. Sized for covariance matrices of penultimate features
//! (dimension in the tens to low hundreds).

use crate::scalar::Real;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> SquareMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds from row-major data. Panics if `data.len() != n * n`.
    pub fn from_row_major(n: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * n, "matrix data length");
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&mut self, value: T) {
        for i in 0..self.n {
            self[(i, i)] += value;
        }
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Adds `scale * v vᵀ`.
    pub fn rank_one_update(&mut self, scale: T, v: &[T]) {
        debug_assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            let si = scale * v[i];
            let row = &mut self.data[i * self.n..(i + 1) * self.n];
            for (dst, &vj) in row.iter_mut().zip(v) {
                *dst += si * vj;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }
}

impl<T> std::ops::Index<(usize, usize)> for SquareMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.n + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for SquareMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.n + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky<T> {
    lower: SquareMatrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factorises a symmetric matrix. Returns `None` when a pivot is not
    /// strictly positive (matrix not positive-definite in working precision).
    pub fn new(a: &SquareMatrix<T>) -> Option<Self> {
        let n = a.dim();
        let mut l = SquareMatrix::zeros(n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > T::zero()) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Some(Self { lower: l })
    }

    pub fn lower(&self) -> &SquareMatrix<T> {
        &self.lower
    }

    /// Solves `L y = b`.
    pub fn forward(&self, b: &[T]) -> Vec<T> {
        let n = self.lower.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[(i, k)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
        y
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lower.dim();
        let mut x = self.forward(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * x[k];
            }
            x[i] = s / self.lower[(i, i)];
        }
        x
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn inv_quadratic_form(&self, b: &[T]) -> T {
        self.forward(b).iter().map(|&v| v * v).sum()
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending
/// order. `vectors[k]` is the unit eigenvector paired with `values[k]`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: Vec<Vec<T>>,
}

/// Cyclic Jacobi rotation sweeps. Converges quadratically once the
/// off-diagonal mass is small; capped at 100 sweeps.
pub fn symmetric_eigen<T: Real>(a: &SquareMatrix<T>) -> SymmetricEigen<T> {
    let n = a.dim();
    let mut m = a.clone();
    let mut v = SquareMatrix::<T>::identity(n);
    let frob: T = m.as_slice().iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::epsilon() * frob.max(T::min_positive_value());

    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[(k, i)]).collect())
        .collect();
    SymmetricEigen { values, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> SquareMatrix<f64> {
        // B Bᵀ + n I with a fixed, non-symmetric B.
        let b: Vec<f64> = (0..n * n).map(|k| ((k * 7 + 3) % 11) as f64 - 5.0).collect();
        let mut a = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
            }
        }
        a.add_diagonal(n as f64);
        a
    }

    #[test]
    fn cholesky_solve_reconstructs_rhs() {
        let a = spd(6);
        let chol = Cholesky::new(&a).unwrap();
        let b = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let x = chol.solve(&b);
        let back = a.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SquareMatrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(Cholesky::new(&a).is_none());
    }

    #[test]
    fn jacobi_diagonalises() {
        let a = spd(7);
        let eig = symmetric_eigen(&a);
        for (lambda, vec) in eig.values.iter().zip(&eig.vectors) {
            let av = a.mul_vec(vec);
            for (x, y) in av.iter().zip(vec) {
                assert!((x - lambda * y).abs() < 1e-8 * lambda.abs().max(1.0));
            }
        }
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }
}
