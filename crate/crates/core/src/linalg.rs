//! Small dense linear-algebra helpers shared by imputation and GEE.

use nalgebra::{DMatrix, DVector};

/// Pivot floor for the diagonally scaled Cholesky factor. A column whose
/// squared pivot falls below this is treated as linearly dependent on the
/// columns before it (1 - R^2 < 1e-10).
const RANK_TOL: f64 = 1e-10;

/// Reason a symmetric system could not be solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDeficient {
    /// First column found to be (numerically) dependent.
    pub column: usize,
}

/// Cholesky factor of a symmetric positive-definite matrix, computed on the
/// diagonally scaled matrix `D^-1/2 A D^-1/2` so the rank check is scale-free.
pub struct ScaledCholesky {
    scale: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ScaledCholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, RankDeficient> {
        let n = a.nrows();
        let mut scale = DVector::zeros(n);
        for j in 0..n {
            let d = a[(j, j)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(RankDeficient { column: j });
            }
            scale[j] = 1.0 / d.sqrt();
        }
        let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        let chol = scaled.clone().cholesky().ok_or_else(|| RankDeficient {
            column: first_bad_pivot(&scaled).unwrap_or(0),
        })?;
        let l = chol.l_dirty();
        for j in 0..n {
            if l[(j, j)] * l[(j, j)] < RANK_TOL {
                return Err(RankDeficient { column: j });
            }
        }
        Ok(Self { scale, chol })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled_b = b.component_mul(&self.scale);
        self.chol.solve(&scaled_b).component_mul(&self.scale)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let n = inv.nrows();
        DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * self.scale[i] * self.scale[j])
    }
}

/// Index of the first pivot that goes non-positive during an unpivoted
/// Cholesky sweep; used only to name the offending column.
fn first_bad_pivot(a: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < RANK_TOL {
            return Some(j);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    None
}

/// Ordinary least squares via the normal equations.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, RankDeficient> {
    let xtx = x.tr_mul(x);
    let xty = x.tr_mul(y);
    Ok(ScaledCholesky::new(&xtx)?.solve(&xty))
}

/// Symmetrizes in place by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
