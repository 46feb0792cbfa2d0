use super::{LinalgError, Matrix, Result};

/// Relative tolerance on `|a_ij - a_ji|` accepted by [`spd_solve`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factors a symmetric matrix. Only the lower triangle is read.
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "cholesky of non-square {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let lj = l.row(j)[..j].to_vec();
            let pivot = a[(j, j)] - lj.iter().map(|v| v * v).sum::<f64>();
            if !pivot.is_finite() || pivot <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite { row: j, pivot });
            }
            let d = pivot.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let li = &l.row(i)[..j];
                let s = a[(i, j)] - super::dot(li, &lj);
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "solve with {n}x{n} factor and right-hand side {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        let mut x = b.clone();
        let cols = b.cols();
        let mut acc = vec![0.0; cols];
        // Forward: L Y = B, row by row.
        for i in 0..n {
            acc.copy_from_slice(x.row(i));
            for k in 0..i {
                let lik = self.l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                for (a, &y) in acc.iter_mut().zip(x.row(k)) {
                    *a -= lik * y;
                }
            }
            let d = self.l[(i, i)];
            for (dst, a) in x.row_mut(i).iter_mut().zip(&acc) {
                *dst = a / d;
            }
        }
        // Backward: Lᵀ X = Y.
        for i in (0..n).rev() {
            acc.copy_from_slice(x.row(i));
            for k in i + 1..n {
                let lki = self.l[(k, i)];
                if lki == 0.0 {
                    continue;
                }
                for (a, &y) in acc.iter_mut().zip(x.row(k)) {
                    *a -= lki * y;
                }
            }
            let d = self.l[(i, i)];
            for (dst, a) in x.row_mut(i).iter_mut().zip(&acc) {
                *dst = a / d;
            }
        }
        Ok(x)
    }
}

/// Solves `A X = B` for symmetric positive-definite `A`.
///
/// `A` must be symmetric to [`SYMMETRY_TOLERANCE`] relative to its largest
/// entry; it is symmetrized as `(A + Aᵀ)/2` before factoring.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "coefficient matrix {}x{} is not square",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "coefficient matrix {n}x{n} with right-hand side {}x{}",
            b.rows(),
            b.cols()
        )));
    }
    let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut sym = a.clone();
    let mut asymmetry = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            let (u, v) = (a[(i, j)], a[(j, i)]);
            asymmetry = asymmetry.max((u - v).abs());
            let m = 0.5 * (u + v);
            sym[(i, j)] = m;
            sym[(j, i)] = m;
        }
    }
    if asymmetry > SYMMETRY_TOLERANCE * scale {
        return Err(LinalgError::NotSymmetric { asymmetry });
    }
    Cholesky::factor(&sym)?.solve(b)
}
