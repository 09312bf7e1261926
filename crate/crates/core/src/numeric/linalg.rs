//! Dense LU factorization with partial pivoting and the quantities derived
//! from it: log-determinants, solves and inverses.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Relative pivot threshold below which a matrix is declared singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Sign of a determinant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

/// Packed `PA = LU` factorization: unit-lower `L` below the diagonal, `U` on
/// and above it.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    packed: Vec<f64>,
    /// Row `i` of `PA` is row `perm[i]` of `A`.
    perm: Vec<usize>,
    swaps: usize,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let (n, m) = a.dims();
        if n != m {
            return Err(Error::Argument(format!("LU needs a square matrix, got {n}x{m}")));
        }
        let max_row_norm = (0..n)
            .map(|i| a.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let threshold = SINGULAR_TOLERANCE * max_row_norm;

        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let (pivot_row, pivot_abs) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot_abs > threshold) {
                return Err(Error::Singular {
                    column: k,
                    pivot: pivot_abs,
                });
            }
            if pivot_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot_row * n + j);
                }
                perm.swap(k, pivot_row);
                swaps += 1;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu {
            n,
            packed: lu,
            perm,
            swaps,
        })
    }

    /// `(log|det A|, sign(det A))`.
    pub fn logdet(&self) -> (f64, Sign) {
        let mut log_abs = 0.0;
        let mut negative = self.swaps % 2 == 1;
        for k in 0..self.n {
            let d = self.packed[k * self.n + k];
            log_abs += d.abs().ln();
            if d < 0.0 {
                negative = !negative;
            }
        }
        let sign = if negative { Sign::Negative } else { Sign::Positive };
        (log_abs, sign)
    }

    /// Solves `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.packed[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.packed[i * n + i + 1..(i + 1) * n];
            let s: f64 = row.iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / self.packed[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = Tensor::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve_vec(&e);
            for (i, v) in col.into_iter().enumerate() {
                inv.set(i, j, v);
            }
        }
        inv
    }
}

/// `log|det W|` and its sign via partial-pivot LU.
pub fn logdet_lu(w: &Tensor) -> Result<(f64, Sign)> {
    Ok(Lu::factor(w)?.logdet())
}

pub fn inverse(w: &Tensor) -> Result<Tensor> {
    Ok(Lu::factor(w)?.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Laplace expansion along the first row; exponential but exact enough
    /// for the small matrices used here.
    fn cofactor_det(a: &[Vec<f64>]) -> f64 {
        let n = a.len();
        if n == 1 {
            return a[0][0];
        }
        (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> = a[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|&(c, _)| c != j)
                            .map(|(_, &v)| v)
                            .collect()
                    })
                    .collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[0][j] * cofactor_det(&minor)
            })
            .sum()
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
    }

    #[test]
    fn identity_has_zero_logdet() {
        assert_eq!(logdet_lu(&Tensor::identity(3)).unwrap(), (0.0, Sign::Positive));
    }

    #[test]
    fn diagonal_logdet() {
        let w = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]);
        let (v, s) = logdet_lu(&w).unwrap();
        assert!((v - 6f64.ln()).abs() < 1e-15);
        assert!((v - 1.791759).abs() < 1e-6);
        assert_eq!(s, Sign::Positive);
    }

    #[test]
    fn random_5x5_matches_cofactor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Tensor::randn(5, 5, &mut rng);
            let det = cofactor_det(&to_rows(&a));
            let (v, s) = logdet_lu(&a).unwrap();
            let lu_det = s.as_f64() * v.exp();
            assert!(((lu_det - det) / det).abs() < 1e-9, "{lu_det} vs {det}");
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(logdet_lu(&w), Err(Error::Singular { .. })));
        assert!(matches!(
            logdet_lu(&Tensor::zeros(2, 3)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn negative_determinant_sign() {
        let w = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(logdet_lu(&w).unwrap(), (0.0, Sign::Negative));
    }

    #[test]
    fn inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(4, 4, &mut rng);
        let prod = a.matmul(&inverse(&a).unwrap());
        assert!(prod.max_abs_diff(&Tensor::identity(4)) < 1e-10);
    }

    #[test]
    fn logdet_of_product_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            // diagonally dominated to stay well-conditioned
            let a = Tensor::randn(4, 4, &mut rng).add(&Tensor::identity(4).scale(3.0));
            let b = Tensor::randn(4, 4, &mut rng).add(&Tensor::identity(4).scale(3.0));
            let (la, _) = logdet_lu(&a).unwrap();
            let (lb, _) = logdet_lu(&b).unwrap();
            let (lab, _) = logdet_lu(&a.matmul(&b)).unwrap();
            assert!((lab - la - lb).abs() < 1e-9);
        }
    }
}
