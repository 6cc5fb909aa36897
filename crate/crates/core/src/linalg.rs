//! Dense LU factorization with partial pivoting.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `P A = L U` packed into one matrix; `perm[i]` is the source row of row `i`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Tensor,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(shape_err("lu", a.shape(), (n, n)));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs().max(1.0);
        for col in 0..n {
            let mut piv = col;
            let mut best = lu.get(col, col).abs();
            for r in col + 1..n {
                let v = lu.get(r, col).abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::Singular("lu"));
            }
            if piv != col {
                perm.swap(piv, col);
                for c in 0..n {
                    let t = lu.get(col, c);
                    lu.set(col, c, lu.get(piv, c));
                    lu.set(piv, c, t);
                }
            }
            let d = lu.get(col, col);
            for r in col + 1..n {
                let f = lu.get(r, col) / d;
                lu.set(r, col, f);
                if f != 0.0 {
                    for c in col + 1..n {
                        let v = lu.get(r, c) - f * lu.get(col, c);
                        lu.set(r, c, v);
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        if b.rows() != n {
            return Err(shape_err("lu solve", (n, n), b.shape()));
        }
        let mut x = Tensor::zeros(n, b.cols());
        let mut y = alloc::vec![0.0; n];
        for j in 0..b.cols() {
            for i in 0..n {
                let mut s = b.get(self.perm[i], j);
                for k in 0..i {
                    s -= self.lu.get(i, k) * y[k];
                }
                y[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in i + 1..n {
                    s -= self.lu.get(i, k) * x.get(k, j);
                }
                x.set(i, j, s / self.lu.get(i, i));
            }
        }
        Ok(x)
    }

    /// Solves `A^T X = B`.
    pub fn solve_transpose(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        if b.rows() != n {
            return Err(shape_err("lu solve_transpose", (n, n), b.shape()));
        }
        // A^T = U^T L^T P, so solve U^T z = b, then L^T w = z, then x = P^T w.
        let mut x = Tensor::zeros(n, b.cols());
        let mut z = alloc::vec![0.0; n];
        for j in 0..b.cols() {
            for i in 0..n {
                let mut s = b.get(i, j);
                for k in 0..i {
                    s -= self.lu.get(k, i) * z[k];
                }
                z[i] = s / self.lu.get(i, i);
            }
            for i in (0..n).rev() {
                let mut s = z[i];
                for k in i + 1..n {
                    s -= self.lu.get(k, i) * z[k];
                }
                z[i] = s;
            }
            for i in 0..n {
                x.set(self.perm[i], j, z[i]);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn solves_and_transposed_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 5, 17] {
            let a = random(&mut rng, n, n).add(&Tensor::identity(n).scale(0.5)).unwrap();
            let b = random(&mut rng, n, 3);
            let lu = Lu::factor(&a).unwrap();
            let x = lu.solve(&b).unwrap();
            assert!(a.matmul(&x).unwrap().max_abs_diff(&b).unwrap() < 1e-10);
            let xt = lu.solve_transpose(&b).unwrap();
            assert!(a.transpose().matmul(&xt).unwrap().max_abs_diff(&b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn needs_pivoting() {
        let a = Tensor::from_rows(&[alloc::vec![0.0, 1.0], alloc::vec![1.0, 0.0]]).unwrap();
        let x = Lu::factor(&a).unwrap().solve(&Tensor::col_vector(alloc::vec![2.0, 3.0])).unwrap();
        assert_eq!(x.data(), &[3.0, 2.0]);
    }

    #[test]
    fn singular_is_reported() {
        let a = Tensor::from_rows(&[alloc::vec![1.0, 2.0], alloc::vec![2.0, 4.0]]).unwrap();
        assert_eq!(Lu::factor(&a).unwrap_err(), Error::Singular("lu"));
    }
}
