//! Regression primitives for nuisance functions and CATE working models.

mod bspline;
mod linalg;
mod localpoly;
mod logistic;
mod tree;

pub use bspline::{bspline_basis, fit_spline_regression, quantile_knots, BSplineBasis, SplineFit};
pub use linalg::RIDGE_FALLBACK;
pub use localpoly::{fit_local_polynomial, Bandwidth, LocalPolyFit};
pub use logistic::{fit_logistic, log_likelihood, sigmoid, LogisticFit};
pub use tree::{fit_tree, Node, TreeFit};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinary least squares with intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    /// Intercept first, then one slope per covariate.
    pub coef: Vec<f64>,
    pub ridge_fallback: bool,
}

impl LinearFit {
    pub fn predict(&self, z: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }
}

pub fn fit_linear(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    if y.len() != x.nrows() || y.is_empty() {
        return Err(Error::InvalidArgument(format!("{} responses for {} rows", y.len(), x.nrows())));
    }
    let sol = linalg::least_squares(&linalg::with_intercept(x), y, None);
    Ok(LinearFit {
        coef: sol.coef.iter().copied().collect(),
        ridge_fallback: sol.ridge,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitKind {
    Constant,
    Linear,
    Logistic,
    Spline,
    Tree,
    LocalPoly,
}

/// A fitted regression function. Immutable; safe to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub enum RegressionFit {
    Constant(f64),
    Linear(LinearFit),
    Logistic(LogisticFit),
    Spline(SplineFit),
    Tree(TreeFit),
    LocalPoly(LocalPolyFit),
}

impl RegressionFit {
    pub fn kind(&self) -> FitKind {
        match self {
            RegressionFit::Constant(_) => FitKind::Constant,
            RegressionFit::Linear(_) => FitKind::Linear,
            RegressionFit::Logistic(_) => FitKind::Logistic,
            RegressionFit::Spline(_) => FitKind::Spline,
            RegressionFit::Tree(_) => FitKind::Tree,
            RegressionFit::LocalPoly(_) => FitKind::LocalPoly,
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        match self {
            RegressionFit::Constant(c) => *c,
            RegressionFit::Linear(f) => f.predict(z),
            RegressionFit::Logistic(f) => f.predict(z),
            RegressionFit::Spline(f) => f.predict(z),
            RegressionFit::Tree(f) => f.predict(z),
            RegressionFit::LocalPoly(f) => f.predict(z),
        }
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut z = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|r| {
                for (c, v) in z.iter_mut().enumerate() {
                    *v = x[(r, c)];
                }
                self.predict(&z)
            })
            .collect()
    }

    /// Whether the underlying solver needed its rank-deficiency fallback.
    pub fn ridge_warning(&self) -> bool {
        match self {
            RegressionFit::Linear(f) => f.ridge_fallback,
            RegressionFit::Spline(f) => f.ridge_fallback,
            _ => false,
        }
    }
}

/// Anything that turns a covariate matrix and a response into a [`RegressionFit`].
pub trait Learner: Send + Sync {
    fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<RegressionFit>;
}

/// Configurable built-in learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerSpec {
    /// Ignores the data and predicts a fixed value.
    Constant { value: f64 },
    Linear,
    Logistic { max_iter: usize, tol: f64 },
    Spline { degree: usize, n_knots: usize },
    Tree { min_leaf: usize, max_depth: usize },
    LocalPoly { bandwidth: Bandwidth, degree: usize },
}

impl LearnerSpec {
    pub fn logistic() -> Self {
        LearnerSpec::Logistic { max_iter: 100, tol: 1e-8 }
    }

    /// Cubic splines with four quantile knots per covariate.
    pub fn spline() -> Self {
        LearnerSpec::Spline { degree: 3, n_knots: 4 }
    }

    pub fn tree() -> Self {
        LearnerSpec::Tree {
            min_leaf: 20,
            max_depth: 4,
        }
    }

    pub fn local_poly() -> Self {
        LearnerSpec::LocalPoly {
            bandwidth: Bandwidth::Span(0.75),
            degree: 2,
        }
    }
}

impl Learner for LearnerSpec {
    fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<RegressionFit> {
        Ok(match self {
            LearnerSpec::Constant { value } => RegressionFit::Constant(*value),
            LearnerSpec::Linear => RegressionFit::Linear(fit_linear(x, y)?),
            LearnerSpec::Logistic { max_iter, tol } => {
                RegressionFit::Logistic(fit_logistic(&linalg::with_intercept(x), y, *max_iter, *tol)?)
            }
            LearnerSpec::Spline { degree, n_knots } => {
                RegressionFit::Spline(fit_spline_regression(x, y, *degree, *n_knots)?)
            }
            LearnerSpec::Tree { min_leaf, max_depth } => RegressionFit::Tree(fit_tree(x, y, *min_leaf, *max_depth)?),
            LearnerSpec::LocalPoly { bandwidth, degree } => {
                if x.ncols() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "local polynomial regression needs exactly one covariate, got {}",
                        x.ncols()
                    )));
                }
                let xs: Vec<f64> = x.column(0).iter().copied().collect();
                RegressionFit::LocalPoly(fit_local_polynomial(&xs, y, *bandwidth, *degree)?)
            }
        })
    }
}
