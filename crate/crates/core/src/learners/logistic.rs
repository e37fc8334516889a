//! Binary logistic regression by Newton-Raphson / IRLS.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Linear-predictor magnitude beyond which the fit is treated as separated.
const SEPARATION_ETA: f64 = 35.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    /// Coefficients on the design columns, intercept first.
    pub coef: Vec<f64>,
    /// Standard errors from the inverse observed information.
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm of the log-likelihood gradient at the returned coefficients.
    pub gradient_norm: f64,
}

impl LogisticFit {
    /// Linear predictor for a covariate row (without intercept entry).
    pub fn linear_predictor(&self, z: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }

    /// `P(label = 1 | z)`, strictly inside (0, 1).
    pub fn predict(&self, z: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(z)).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood of `coef` on a design that already carries the intercept column.
pub fn log_likelihood(design: &DMatrix<f64>, labels: &[f64], coef: &[f64]) -> f64 {
    let beta = DVector::from_column_slice(coef);
    let eta = design * beta;
    eta.iter()
        .zip(labels)
        .map(|(&e, &y)| {
            // y*e - log(1 + exp(e)), computed stably
            let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            y * e - log1pexp
        })
        .sum()
}

fn gradient(design: &DMatrix<f64>, labels: &[f64], eta: &DVector<f64>) -> DVector<f64> {
    let resid = DVector::from_iterator(labels.len(), labels.iter().zip(eta.iter()).map(|(y, e)| y - sigmoid(*e)));
    design.transpose() * resid
}

/// Fits `P(y=1|x) = sigmoid(x'b)` on `design` (n x (p+1), intercept included).
///
/// Iterates full Newton steps, halving when the log-likelihood drops, until the
/// gradient sup-norm is at most `tol`.
pub fn fit_logistic(design: &DMatrix<f64>, labels: &[f64], max_iter: usize, tol: f64) -> Result<LogisticFit> {
    let (n, k) = design.shape();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} design rows", labels.len())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("logistic labels must be 0 or 1".into()));
    }
    let ones = labels.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::InvalidArgument("both label classes must be present".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!("need n > p+1, got n={n}, columns={k}")));
    }

    let mut beta = DVector::<f64>::zeros(k);
    let mut eta = design * &beta;
    let mut loglik = log_likelihood(design, labels, beta.as_slice());
    let mut grad = gradient(design, labels, &eta);
    let mut iterations = 0;

    while grad.amax() > tol {
        if iterations >= max_iter {
            return Err(Error::Convergence {
                iterations,
                gradient_norm: grad.amax(),
            });
        }
        iterations += 1;

        let hessian = information(design, &eta);
        let step = match hessian.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let mut h = hessian;
                for j in 0..k {
                    h[(j, j)] += 1e-10;
                }
                match h.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => {
                        return Err(Error::Separation {
                            coef_norm: beta.norm(),
                        })
                    }
                }
            }
        };

        let mut scale = 1.0;
        loop {
            let candidate = &beta + &step * scale;
            let cand_ll = log_likelihood(design, labels, candidate.as_slice());
            if cand_ll >= loglik - 1e-12 * loglik.abs().max(1.0) || scale < 1e-8 {
                beta = candidate;
                loglik = cand_ll;
                break;
            }
            scale *= 0.5;
        }

        eta = design * &beta;
        if eta.amax() > SEPARATION_ETA {
            return Err(Error::Separation {
                coef_norm: beta.norm(),
            });
        }
        grad = gradient(design, labels, &eta);
    }

    let cov = information(design, &eta)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
    Ok(LogisticFit {
        coef: beta.iter().copied().collect(),
        std_errors: (0..k).map(|j| cov[(j, j)].sqrt()).collect(),
        iterations,
        gradient_norm: grad.amax(),
    })
}

fn information(design: &DMatrix<f64>, eta: &DVector<f64>) -> DMatrix<f64> {
    let (n, k) = design.shape();
    let w: Vec<f64> = eta
        .iter()
        .map(|&e| {
            let p = sigmoid(e);
            p * (1.0 - p)
        })
        .collect();
    let weighted = DMatrix::from_fn(n, k, |r, c| design[(r, c)] * w[r]);
    design.transpose() * weighted
}
