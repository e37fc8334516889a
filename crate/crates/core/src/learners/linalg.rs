use nalgebra::{DMatrix, DVector};

/// Ridge penalty applied when a least-squares design is rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

const RANK_TOL: f64 = 1e-10;

/// Solution of a (weighted) least-squares problem.
pub(crate) struct LsSolution {
    pub coef: DVector<f64>,
    /// True when the design was rank deficient and the ridge fallback was used.
    pub ridge: bool,
}

/// Minimises `sum_i w_i (y_i - x_i' b)^2`, via Householder QR when the design
/// has full column rank and via ridge-regularised normal equations otherwise.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> LsSolution {
    let (n, k) = x.shape();
    let (xw, yw) = match weights {
        Some(w) => {
            let sw: Vec<f64> = w.iter().map(|v| v.max(0.0).sqrt()).collect();
            (
                DMatrix::from_fn(n, k, |r, c| x[(r, c)] * sw[r]),
                DVector::from_iterator(n, y.iter().zip(&sw).map(|(v, s)| v * s)),
            )
        }
        None => (x.clone(), DVector::from_column_slice(y)),
    };

    if n >= k && k > 0 {
        let qr = xw.clone().qr();
        let r = qr.r();
        let diag_max = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        let full_rank = diag_max > 0.0 && (0..k).all(|j| r[(j, j)].abs() > RANK_TOL * diag_max);
        if full_rank {
            let qty = qr.q().transpose() * &yw;
            if let Some(coef) = r.solve_upper_triangular(&qty) {
                if coef.iter().all(|v| v.is_finite()) {
                    return LsSolution { coef, ridge: false };
                }
            }
        }
    }

    let mut gram = xw.transpose() * &xw;
    for j in 0..k {
        gram[(j, j)] += RIDGE_FALLBACK;
    }
    let rhs = xw.transpose() * &yw;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(k)),
    };
    LsSolution { coef, ridge: true }
}

/// Prepends a column of ones.
pub(crate) fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_full_rank() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let s = least_squares(&x, &y, None);
        assert!(!s.ridge);
        assert!((s.coef[0] - 1.0).abs() < 1e-12);
        assert!((s.coef[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_uses_ridge() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = [2.0, 4.0, 6.0];
        let s = least_squares(&x, &y, None);
        assert!(s.ridge);
        let fitted = &x * &s.coef;
        for (f, t) in fitted.iter().zip(&y) {
            assert!((f - t).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_select_rows() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let s = least_squares(&x, &[1.0, 5.0, 9.0], Some(&[0.0, 1.0, 0.0]));
        assert!((s.coef[0] - 5.0).abs() < 1e-12);
    }
}
