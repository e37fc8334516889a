//! B-spline bases (Cox-de Boor) and additive spline regression.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::learners::linalg::least_squares;

/// A clamped B-spline basis on `[lower, upper]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    lower: f64,
    upper: f64,
    /// Full knot vector: `degree + 1` copies of each boundary around the interior knots.
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(lower: f64, upper: f64, degree: usize, interior_knots: &[f64]) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid spline domain [{lower}, {upper}]")));
        }
        if interior_knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("interior knots must be strictly increasing".into()));
        }
        if interior_knots.iter().any(|&k| !(k > lower && k < upper)) {
            return Err(Error::InvalidArgument("interior knots must lie strictly inside the domain".into()));
        }
        let mut knots = vec![lower; degree + 1];
        knots.extend_from_slice(interior_knots);
        knots.extend(std::iter::repeat(upper).take(degree + 1));
        Ok(Self {
            degree,
            lower,
            upper,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    /// Writes the `dim()` basis values at `x` into `out`. Points outside the
    /// domain are clamped to the nearest boundary.
    pub fn evaluate_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        out.iter_mut().for_each(|v| *v = 0.0);
        let x = x.clamp(self.lower, self.upper);
        let p = self.degree;
        let t = &self.knots;
        let n_basis = self.dim();

        // knot span: t[span] <= x < t[span+1], with the right boundary folded into the last span
        let span = if x >= self.upper {
            n_basis - 1
        } else {
            let mut lo = p;
            let mut hi = n_basis;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if x < t[mid] {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            lo
        };

        // triangular Cox-de Boor table of the p+1 non-zero functions
        let mut n = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        assert!(p < 15, "spline degree {p} unsupported");
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (r, v) in n.iter().take(p + 1).enumerate() {
            out[span - p + r] = *v;
        }
    }

    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(x, &mut out);
        out
    }
}

/// Basis values at `x` on `[lower, upper]`; `x` outside the domain is clamped.
pub fn bspline_basis(x: f64, lower: f64, upper: f64, degree: usize, interior_knots: &[f64]) -> Result<Vec<f64>> {
    Ok(BSplineBasis::new(lower, upper, degree, interior_knots)?.evaluate(x))
}

/// Interior knots at the empirical quantiles `k/(n_knots+1)` of `x`, with
/// duplicates and boundary-coincident values dropped.
pub fn quantile_knots(x: &[f64], n_knots: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let mut knots: Vec<f64> = Vec::with_capacity(n_knots);
    for k in 1..=n_knots {
        let q = empirical_quantile_type7(&sorted, k as f64 / (n_knots + 1) as f64);
        if q > lo && q < hi && knots.last().is_none_or(|&last| q > last) {
            knots.push(q);
        }
    }
    knots
}

fn empirical_quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Additive spline regression: intercept plus, for every non-constant
/// covariate, a B-spline basis with its first function dropped (the
/// intercept already spans the partition of unity).
#[derive(Clone, Debug, PartialEq)]
pub struct SplineFit {
    /// One entry per covariate; `None` for covariates that were constant in training.
    bases: Vec<Option<BSplineBasis>>,
    coef: Vec<f64>,
    /// Set when the design was rank deficient and the ridge fallback was used.
    pub ridge_fallback: bool,
}

impl SplineFit {
    pub fn p(&self) -> usize {
        self.bases.len()
    }

    pub fn design_dim(&self) -> usize {
        self.coef.len()
    }

    fn design_row(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        let mut buf = [0.0f64; 64];
        for (basis, &v) in self.bases.iter().zip(z) {
            if let Some(b) = basis {
                let d = b.dim();
                b.evaluate_into(v, &mut buf[..d]);
                out.extend_from_slice(&buf[1..d]);
            }
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        let mut out = self.coef[0];
        let mut offset = 1;
        let mut buf = [0.0f64; 64];
        for (basis, &v) in self.bases.iter().zip(z) {
            if let Some(b) = basis {
                let d = b.dim();
                b.evaluate_into(v, &mut buf[..d]);
                for j in 1..d {
                    out += self.coef[offset + j - 1] * buf[j];
                }
                offset += d - 1;
            }
        }
        out
    }
}

/// Least-squares additive B-spline fit with `n_knots` quantile knots per covariate.
pub fn fit_spline_regression(x: &DMatrix<f64>, y: &[f64], degree: usize, n_knots: usize) -> Result<SplineFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{} responses for {n} rows", y.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("spline regression needs data".into()));
    }
    let mut bases = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo < hi {
            let knots = quantile_knots(&col, n_knots);
            let basis = BSplineBasis::new(lo, hi, degree, &knots)?;
            if basis.dim() > 64 {
                return Err(Error::InvalidArgument("spline basis larger than 64 functions".into()));
            }
            bases.push(Some(basis));
        } else {
            bases.push(None);
        }
    }
    let mut shell = SplineFit {
        bases,
        coef: Vec::new(),
        ridge_fallback: false,
    };
    let k = 1 + shell.bases.iter().flatten().map(|b| b.dim() - 1).sum::<usize>();
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "spline regression needs n > basis dimension ({n} <= {k})"
        )));
    }
    let mut design = DMatrix::zeros(n, k);
    let mut row = Vec::with_capacity(k);
    for r in 0..n {
        let z: Vec<f64> = x.row(r).iter().copied().collect();
        shell.design_row(&z, &mut row);
        for (c, v) in row.iter().enumerate() {
            design[(r, c)] = *v;
        }
    }
    let sol = least_squares(&design, y, None);
    shell.coef = sol.coef.iter().copied().collect();
    shell.ridge_fallback = sol.ridge;
    Ok(shell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngStream;
    use rand::Rng;

    /// Textbook recursive definition, kept independent of the table-based evaluator.
    fn cox_de_boor(i: usize, k: usize, x: f64, t: &[f64], upper: f64) -> f64 {
        if k == 0 {
            let last = t[i + 1] == upper && x == upper && t[i] < t[i + 1];
            return if (t[i] <= x && x < t[i + 1]) || last { 1.0 } else { 0.0 };
        }
        let a = if t[i + k] > t[i] {
            (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(i, k - 1, x, t, upper)
        } else {
            0.0
        };
        let b = if t[i + k + 1] > t[i + 1] {
            (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(i + 1, k - 1, x, t, upper)
        } else {
            0.0
        };
        a + b
    }

    fn oracle_basis(x: f64, lower: f64, upper: f64, degree: usize, interior: &[f64]) -> Vec<f64> {
        let mut t = vec![lower; degree + 1];
        t.extend_from_slice(interior);
        t.extend(std::iter::repeat(upper).take(degree + 1));
        let dim = t.len() - degree - 1;
        (0..dim).map(|i| cox_de_boor(i, degree, x, &t, upper)).collect()
    }

    #[test]
    fn matches_recursive_oracle() {
        let got = bspline_basis(0.25, -1.0, 1.0, 3, &[0.0]).unwrap();
        let want = oracle_basis(0.25, -1.0, 1.0, 3, &[0.0]);
        assert_eq!(got.len(), 5);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
        let knots = [-0.6, -0.1, 0.3, 0.7];
        for k in 0..=40 {
            let x = -1.0 + 0.05 * k as f64;
            for degree in 0..=4 {
                let got = bspline_basis(x, -1.0, 1.0, degree, &knots).unwrap();
                let want = oracle_basis(x, -1.0, 1.0, degree, &knots);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "x={x} degree={degree}");
                }
            }
        }
    }

    #[test]
    fn degree_zero_without_knots_is_constant() {
        assert_eq!(bspline_basis(0.3, 0.0, 1.0, 0, &[]).unwrap(), vec![1.0]);
    }

    #[test]
    fn partition_of_unity_at_random_points() {
        let mut rng = RngStream::new(8);
        let basis = BSplineBasis::new(-2.0, 3.0, 3, &[-1.0, 0.0, 0.5, 2.2]).unwrap();
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-2.0..=3.0);
            let v = basis.evaluate(x);
            assert!(v.iter().all(|&b| b >= 0.0));
            assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn clamps_outside_domain() {
        let basis = BSplineBasis::new(0.0, 1.0, 3, &[0.5]).unwrap();
        assert_eq!(basis.evaluate(-5.0), basis.evaluate(0.0));
        assert_eq!(basis.evaluate(9.0), basis.evaluate(1.0));
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(BSplineBasis::new(0.0, 1.0, 3, &[0.5, 0.5]).is_err());
        assert!(BSplineBasis::new(0.0, 1.0, 3, &[1.0]).is_err());
        assert!(BSplineBasis::new(1.0, 1.0, 3, &[]).is_err());
    }

    #[test]
    fn quantile_knots_dedupe_point_mass() {
        let mut x = vec![0.0; 50];
        x.extend((0..25).map(|i| -1.0 + i as f64 * 0.01));
        x.extend((0..25).map(|i| 0.5 + i as f64 * 0.01));
        let k = quantile_knots(&x, 4);
        assert!(k.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(k.iter().filter(|&&v| v == 0.0).count(), 1);
    }

    #[test]
    fn reproduces_linear_response() {
        let mut rng = RngStream::new(1);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|r| 0.3 - 2.0 * x[(r, 0)] + 0.7 * x[(r, 1)]).collect();
        let fit = fit_spline_regression(&x, &y, 3, 4).unwrap();
        assert!(!fit.ridge_fallback);
        for r in 0..n {
            let z = [x[(r, 0)], x[(r, 1)]];
            assert!((fit.predict(&z) - y[r]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_response() {
        let x = DMatrix::from_fn(100, 1, |r, _| r as f64 / 10.0);
        let y = vec![4.25; 100];
        let fit = fit_spline_regression(&x, &y, 3, 4).unwrap();
        for v in [0.0, 3.3, 9.9, 20.0] {
            assert!((fit.predict(&[v]) - 4.25).abs() < 1e-10);
        }
    }

    #[test]
    fn beats_linear_on_step() {
        let mut rng = RngStream::new(12);
        let n = 2000;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 } + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let x = DMatrix::from_column_slice(n, 1, &xs);
        let spline = fit_spline_regression(&x, &y, 3, 4).unwrap();
        let linear = crate::learners::fit_linear(&x, &y).unwrap();
        let truth = |v: f64| if v >= 0.0 { 1.0 } else { 0.0 };
        let grid: Vec<f64> = (0..=200).map(|k| -1.0 + k as f64 * 0.01).collect();
        let mse = |f: &dyn Fn(f64) -> f64| grid.iter().map(|&v| (f(v) - truth(v)).powi(2)).sum::<f64>() / grid.len() as f64;
        let ms = mse(&|v| spline.predict(&[v]));
        let ml = mse(&|v| linear.predict(&[v]));
        assert!(ms < ml, "spline {ms} linear {ml}");
    }

    #[test]
    fn constant_covariate_is_skipped() {
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
        let y: Vec<f64> = (0..n).map(|r| r as f64 * 0.5).collect();
        let fit = fit_spline_regression(&x, &y, 3, 4).unwrap();
        assert!((fit.predict(&[1.0, 10.0]) - 5.0).abs() < 1e-8);
    }
}
