//! Dense third-order tensors `H ∈ R^{p×m×n}`.
//!
//! The contraction `H(A)` sums over the last two indices, so a tensor acts as a
//! linear map from `m×n` matrices to `R^p`. Its operator norm with respect to the
//! Frobenius norm on the input is the largest singular value of the `p×(m·n)`
//! matricization: `vec(·)` is an isometry between Frobenius and Euclidean norms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    p: usize,
    m: usize,
    n: usize,
    // row-major: index (j, a, b) -> (j * m + a) * n + b
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(p: usize, m: usize, n: usize) -> Self {
        Self {
            p,
            m,
            n,
            data: vec![0.0; p * m * n],
        }
    }

    pub fn from_vec(p: usize, m: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != p * m * n {
            return Err(Error::DimensionMismatch {
                context: "Tensor3::from_vec",
                expected: p * m * n,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Tensor3::from_vec"));
        }
        Ok(Self { p, m, n, data })
    }

    pub fn from_fn(
        p: usize,
        m: usize,
        n: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(p * m * n);
        for j in 0..p {
            for a in 0..m {
                for b in 0..n {
                    data.push(f(j, a, b));
                }
            }
        }
        Self { p, m, n, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.p, self.m, self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, j: usize, a: usize, b: usize) -> f64 {
        self.data[(j * self.m + a) * self.n + b]
    }

    #[inline]
    pub fn set(&mut self, j: usize, a: usize, b: usize, value: f64) {
        self.data[(j * self.m + a) * self.n + b] = value;
    }

    /// `[H(A)]_j = Σ_{a,b} H_{jab} A_{ab}`.
    pub fn contract(&self, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        if a.nrows() != self.m || a.ncols() != self.n {
            return Err(Error::DimensionMismatch {
                context: "Tensor3::contract",
                expected: self.m * self.n,
                got: a.nrows() * a.ncols(),
            });
        }
        let mut out = DVector::zeros(self.p);
        for j in 0..self.p {
            let mut acc = 0.0;
            for r in 0..self.m {
                let row = &self.data[(j * self.m + r) * self.n..(j * self.m + r + 1) * self.n];
                for (c, h) in row.iter().enumerate() {
                    acc += h * a[(r, c)];
                }
            }
            out[j] = acc;
        }
        Ok(out)
    }

    /// Flattens to `p×(m·n)` with column index `a·n + b`, matching `vec` of a
    /// row-major `m×n` matrix.
    pub fn matricize(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.m * self.n, &self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn operator_norm(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mat = self.matricize();
        // The Gram matrix on the smaller side keeps the eigenproblem tiny.
        let gram = if mat.nrows() <= mat.ncols() {
            &mat * mat.transpose()
        } else {
            mat.transpose() * &mat
        };
        let eig = gram.symmetric_eigen();
        eig.eigenvalues
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max)
            .max(0.0)
            .sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            p: self.p,
            m: self.m,
            n: self.n,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                context: "Tensor3::add",
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        Ok(Self {
            p: self.p,
            m: self.m,
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Frobenius distance, used for Lipschitz quotients of second derivatives.
    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, p: usize, m: usize, n: usize) -> Tensor3 {
        Tensor3::from_fn(p, m, n, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_entry_selects() {
        let mut h = Tensor3::zeros(2, 2, 2);
        h.set(0, 0, 0, 1.0);
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0]);
        let out = h.contract(&a).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn zero_tensor() {
        let h = Tensor3::zeros(3, 2, 4);
        let a = DMatrix::from_element(2, 4, 1.7);
        assert!(h.contract(&a).unwrap().iter().all(|x| *x == 0.0));
        assert_eq!(h.frobenius_norm(), 0.0);
        assert_eq!(h.operator_norm(), 0.0);
    }

    #[test]
    fn contract_rejects_wrong_shape() {
        let h = Tensor3::zeros(1, 2, 3);
        assert!(h.contract(&DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn contract_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_tensor(&mut rng, 2, 2, 2);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let out = h.contract(&a).unwrap();
        for j in 0..2 {
            let mut s = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    s += h.get(j, x, y) * a[(x, y)];
                }
            }
            assert!((out[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn frobenius_of_ones() {
        let h = Tensor3::from_fn(2, 2, 2, |_, _, _| 1.0);
        assert!((h.frobenius_norm() - 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identity_slice_norm_is_sqrt_two() {
        let h = Tensor3::from_fn(1, 2, 2, |_, a, b| if a == b { 1.0 } else { 0.0 });
        assert!((h.operator_norm() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn operator_norm_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let h = random_tensor(&mut rng, 3, 2, 4);
            let sv = h.matricize().singular_values();
            let top = sv.iter().cloned().fold(0.0, f64::max);
            assert!((h.operator_norm() - top).abs() < 1e-10);
        }
    }

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor3::from_vec(1, 1, 2, vec![1.0]).is_err());
        assert!(Tensor3::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor3::from_vec(1, 1, 1, vec![2.0]).is_ok());
    }
}
