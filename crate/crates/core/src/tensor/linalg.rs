//! Small dense linear algebra on row-major square matrices.

use crate::error::{Error, Result};

/// LU factorization with partial pivoting, `P A = L U` packed in one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n || n == 0 {
            return Err(Error::InvalidShape {
                op: "lu",
                shape: vec![a.len()],
                reason: format!("expected {n}x{n} matrix"),
            });
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i])
            .product::<f64>()
            * self.sign
    }

    /// `log|det A|`, summed in log space so large matrices do not overflow.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn is_singular(&self, threshold: f64) -> bool {
        let d = self.det().abs();
        !(d > threshold)
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// Inverse of a non-singular matrix, rejecting `|det| <= threshold`.
pub fn inverse(a: &[f64], n: usize, threshold: f64) -> Result<Vec<f64>> {
    let lu = Lu::new(a, n)?;
    if lu.is_singular(threshold) {
        return Err(Error::Singular {
            abs_det: lu.det().abs(),
        });
    }
    Ok(lu.inverse())
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `[m,k] x [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Orthonormalize the rows of a square matrix by modified Gram-Schmidt.
pub fn orthonormalize(a: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|c| a[i * n + c] * a[j * n + c]).sum();
            for c in 0..n {
                a[i * n + c] -= dot * a[j * n + c];
            }
        }
        let norm = (0..n).map(|c| a[i * n + c].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Singular { abs_det: 0.0 });
        }
        for c in 0..n {
            a[i * n + c] /= norm;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_of_permutation_and_diagonal() {
        let p = Lu::new(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(p.det(), -1.0);
        let d = Lu::new(&[2.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((d.log_abs_det() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn inverse_round_trip() {
        let a = [4.0, 1.0, 2.0, 0.5, 3.0, -1.0, 1.0, 2.0, 5.0];
        let inv = inverse(&a, 3, 1e-12).unwrap();
        let id = matmul(&a, &inv, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_rejected() {
        let err = inverse(&[1.0, 2.0, 2.0, 4.0], 2, 1e-12).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn orthonormal_rows() {
        let mut a = vec![1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.7, 0.1, -0.4];
        orthonormalize(&mut a, 3).unwrap();
        let at = transpose(&a, 3, 3);
        let g = matmul(&a, &at, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[i * 3 + j] - e).abs() < 1e-12);
            }
        }
        assert!((Lu::new(&a, 3).unwrap().det().abs() - 1.0).abs() < 1e-12);
    }
}
