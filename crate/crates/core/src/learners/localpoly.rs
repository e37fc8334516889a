//! One-dimensional local polynomial regression with tricube weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::linalg::least_squares;

/// How the local window half-width is chosen at each query point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Distance to the `ceil(span * n)`-th nearest training point (loess style).
    Span(f64),
    /// Fixed half-width; `f64::INFINITY` gives global polynomial regression.
    Fixed(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Span(0.75)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalPolyFit {
    x: Vec<f64>,
    y: Vec<f64>,
    bandwidth: Bandwidth,
    degree: usize,
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

impl LocalPolyFit {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    /// Local fit evaluated at `x0`.
    pub fn predict_at(&self, x0: f64) -> f64 {
        let n = self.x.len();
        let need = (self.degree + 1).min(n);
        let mut dist: Vec<f64> = self.x.iter().map(|v| (v - x0).abs()).collect();
        let mut sorted = dist.clone();
        sorted.sort_by(f64::total_cmp);

        let mut h = match self.bandwidth {
            Bandwidth::Span(s) => {
                let k = ((s * n as f64).ceil() as usize).clamp(1, n);
                let base = sorted[k - 1];
                if s > 1.0 {
                    base * s
                } else {
                    base
                }
            }
            Bandwidth::Fixed(h) => h,
        };
        // widen until at least degree+1 points carry positive weight
        let inside = dist.iter().filter(|&&d| d < h).count();
        if inside < need {
            let d = sorted[need - 1];
            h = if d > 0.0 { d / 0.9 } else { f64::MIN_POSITIVE };
        }

        let weights: Vec<f64> = dist
            .iter_mut()
            .map(|d| if h.is_infinite() { 1.0 } else { tricube(*d / h) })
            .collect();
        let scale = if h.is_finite() && h > 0.0 { h } else { 1.0 };
        let design = DMatrix::from_fn(n, self.degree + 1, |r, c| ((self.x[r] - x0) / scale).powi(c as i32));
        least_squares(&design, &self.y, Some(&weights)).coef[0]
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.predict_at(z[0])
    }
}

/// Stores the sample for local fits at query time.
pub fn fit_local_polynomial(x: &[f64], y: &[f64], bandwidth: Bandwidth, degree: usize) -> Result<LocalPolyFit> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidArgument("local polynomial needs matching non-empty x and y".into()));
    }
    if degree > 2 {
        return Err(Error::InvalidArgument(format!("local polynomial degree {degree} not in {{0,1,2}}")));
    }
    let ok = match bandwidth {
        Bandwidth::Span(s) => s > 0.0 && s.is_finite(),
        Bandwidth::Fixed(h) => h > 0.0,
    };
    if !ok {
        return Err(Error::InvalidArgument("bandwidth must be positive".into()));
    }
    Ok(LocalPolyFit {
        x: x.to_vec(),
        y: y.to_vec(),
        bandwidth,
        degree,
    })
}
