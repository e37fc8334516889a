//! Confidence intervals for the post-hoc identified subgroup average:
//! conditional adaptive perturbation plus naive, sample-split and oracle baselines.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::crossfit::{estimate_nuisances, CrossfitConfig};
use crate::data::{Dataset, RngStream};
use crate::error::{Error, Result};
use crate::learners::LearnerSpec;
use crate::subgroup::{fit_cate_dr, CateModel, SubgroupSpec};

/// Perturbed draws whose weighted member count falls to this level are redrawn.
pub const DENOM_GUARD: f64 = 0.5;
/// Redraws allowed per perturbation draw.
pub const REDRAW_CAP: usize = 100;

/// Subgroup mean of the pseudo-outcomes over a subset of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PisaEstimate {
    pub value: f64,
    pub subset: Vec<usize>,
    pub m: usize,
    pub subgroup_size_in_subset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Perturbation,
    Naive,
    SampleSplit,
    Oracle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Perturbation => "perturbation",
            Method::Naive => "naive",
            Method::SampleSplit => "sample-split",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub method: Method,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub m: Option<usize>,
    #[serde(rename = "M")]
    pub draws: Option<usize>,
    pub seed: Option<u64>,
    pub subgroup_size: usize,
    pub redraw_count: usize,
    #[serde(skip)]
    pub point: PisaEstimate,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

fn check_lengths(psi: &[f64], member: &[bool]) -> Result<()> {
    if psi.len() != member.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pseudo-outcomes but {} membership flags",
            psi.len(),
            member.len()
        )));
    }
    Ok(())
}

pub fn pivotal_pisa(psi: &[f64], member: &[bool], subset: &[usize]) -> Result<PisaEstimate> {
    check_lengths(psi, member)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in subset {
        if i >= psi.len() {
            return Err(Error::InvalidArgument(format!("subset index {i} out of range")));
        }
        if member[i] {
            sum += psi[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySubgroup(format!("no subgroup member among the {} subset rows", subset.len())));
    }
    Ok(PisaEstimate {
        value: sum / count as f64,
        subset: subset.to_vec(),
        m: subset.len(),
        subgroup_size_in_subset: count,
    })
}

/// `(Σ V_i ψ_i member_i) / (Σ V_i member_i)` over `subset`, with `weights`
/// aligned to `subset`. `None` when the denominator is at or below the guard.
pub fn perturbed_statistic(psi: &[f64], member: &[bool], subset: &[usize], weights: &[f64]) -> Option<f64> {
    debug_assert_eq!(subset.len(), weights.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&i, &v) in subset.iter().zip(weights) {
        if member[i] {
            num += v * psi[i];
            den += v;
        }
    }
    (den > DENOM_GUARD).then(|| num / den)
}

/// Member pseudo-outcomes of a subset, the only rows a perturbed statistic depends on.
fn member_values(psi: &[f64], member: &[bool], subset: &[usize]) -> Vec<f64> {
    subset.iter().filter(|&&i| member[i]).map(|&i| psi[i]).collect()
}

fn perturb_members(values: &[f64], rng: &mut RngStream) -> Result<(f64, usize)> {
    for redraws in 0..=REDRAW_CAP {
        let mut num = 0.0;
        let mut den = 0.0;
        for &x in values {
            let e: f64 = StandardNormal.sample(rng);
            let v = 1.0 + e;
            num += v * x;
            den += v;
        }
        if den > DENOM_GUARD {
            return Ok((num / den, redraws));
        }
    }
    Err(Error::DegeneratePerturbation(values.len()))
}

/// One perturbed statistic with `V_i ~ N(1, 1)`; also returns the number of discarded draws.
pub fn perturb_once(psi: &[f64], member: &[bool], subset: &[usize], rng: &mut RngStream) -> Result<(f64, usize)> {
    pivotal_pisa(psi, member, subset)?;
    perturb_members(&member_values(psi, member, subset), rng)
}

/// The `ceil(gamma * len)`-th smallest sample.
pub fn empirical_quantile(samples: &[f64], gamma: f64) -> f64 {
    assert!(!samples.is_empty(), "quantile of an empty sample");
    let len = samples.len();
    let k = ((gamma * len as f64 - 1e-9).ceil() as usize).clamp(1, len);
    let mut buf = samples.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

fn interval_from_pivots(
    point: PisaEstimate,
    pivots: &[f64],
    alpha: f64,
    redraw_count: usize,
    seed: Option<u64>,
) -> ConfidenceInterval {
    let root_m = (point.m as f64).sqrt();
    let c_upper = empirical_quantile(pivots, 1.0 - alpha / 2.0);
    let c_lower = empirical_quantile(pivots, alpha / 2.0);
    ConfidenceInterval {
        method: Method::Perturbation,
        estimate: point.value,
        lower: point.value - c_upper / root_m,
        upper: point.value - c_lower / root_m,
        alpha,
        m: Some(point.m),
        draws: Some(pivots.len()),
        seed,
        subgroup_size: point.subgroup_size_in_subset,
        redraw_count,
        point,
    }
}

/// Perturbation interval from a frozen table of weights, one row per draw,
/// each aligned to `subset`. Rows that trip the denominator guard are dropped
/// and counted.
pub fn perturbation_ci_from_weights(
    psi: &[f64],
    member: &[bool],
    subset: &[usize],
    alpha: f64,
    weights: &[Vec<f64>],
) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    let point = pivotal_pisa(psi, member, subset)?;
    let root_m = (point.m as f64).sqrt();
    let mut pivots = Vec::with_capacity(weights.len());
    for row in weights {
        if row.len() != subset.len() {
            return Err(Error::InvalidArgument("weight row does not match subset".into()));
        }
        if let Some(stat) = perturbed_statistic(psi, member, subset, row) {
            pivots.push(root_m * (stat - point.value));
        }
    }
    if pivots.is_empty() {
        return Err(Error::DegeneratePerturbation(point.subgroup_size_in_subset));
    }
    let dropped = weights.len() - pivots.len();
    Ok(interval_from_pivots(point, &pivots, alpha, dropped, None))
}

/// Perturbation interval with `draws` multiplier draws. Draw `j` uses the
/// child stream `rng.child(j)`, so the result does not depend on scheduling.
pub fn perturbation_ci(
    psi: &[f64],
    member: &[bool],
    subset: &[usize],
    draws: usize,
    alpha: f64,
    rng: &RngStream,
) -> Result<ConfidenceInterval> {
    if draws < 100 {
        return Err(Error::InvalidArgument(format!("M = {draws} below the minimum of 100")));
    }
    check_alpha(alpha)?;
    let point = pivotal_pisa(psi, member, subset)?;
    let values = member_values(psi, member, subset);
    let root_m = (point.m as f64).sqrt();
    let results: Vec<(f64, usize)> = (0..draws)
        .into_par_iter()
        .map(|j| {
            let mut child = rng.child(j as u64);
            perturb_members(&values, &mut child).map(|(s, r)| (root_m * (s - point.value), r))
        })
        .collect::<Result<_>>()?;
    let redraws = results.iter().map(|r| r.1).sum();
    let pivots: Vec<f64> = results.into_iter().map(|r| r.0).collect();
    Ok(interval_from_pivots(point, &pivots, alpha, redraws, Some(rng.master_seed())))
}

/// Uniform subset of size `m` without replacement, sorted; all rows when `m == n`.
pub fn select_subset(n: usize, m: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("subset size {m} not in [1, {n}]")));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut idx = index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// How the perturbation subset size is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MPolicy {
    Full,
    Half,
    Quarter,
    Eighth,
    Fixed(usize),
    Adaptive,
}

impl MPolicy {
    pub fn label(&self) -> String {
        match self {
            MPolicy::Full => "n".into(),
            MPolicy::Half => "n/2".into(),
            MPolicy::Quarter => "n/4".into(),
            MPolicy::Eighth => "n/8".into(),
            MPolicy::Fixed(m) => m.to_string(),
            MPolicy::Adaptive => "adaptive".into(),
        }
    }

    /// Subset size for a fixed policy; `None` for the adaptive one.
    pub fn resolve(&self, n: usize) -> Option<usize> {
        match self {
            MPolicy::Full => Some(n),
            MPolicy::Half => Some((n / 2).max(1)),
            MPolicy::Quarter => Some((n / 4).max(1)),
            MPolicy::Eighth => Some((n / 8).max(1)),
            MPolicy::Fixed(m) => Some(*m),
            MPolicy::Adaptive => None,
        }
    }
}

impl std::str::FromStr for MPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "n" => MPolicy::Full,
            "n/2" => MPolicy::Half,
            "n/4" => MPolicy::Quarter,
            "n/8" => MPolicy::Eighth,
            "adaptive" => MPolicy::Adaptive,
            other => MPolicy::Fixed(
                other
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("m must be n, n/2, n/4, n/8, adaptive or an integer, got `{other}`")))?,
            ),
        })
    }
}

/// The grid `{n, n/2, n/4, n/8}`.
pub fn default_m_grid(n: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [1, 2, 4, 8].iter().map(|d| (n / d).max(1)).collect();
    grid.dedup();
    grid
}

/// Tuning of the adaptive subset-size selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Relative excess of the boundary statistic tolerated against the coarsest scale.
    pub tolerance: f64,
    /// Half-width multiplier, in units of the pseudo-outcome standard deviation over `sqrt(m)`.
    pub tau: f64,
    /// Fewer rows than this inside the widest band means no boundary mass.
    pub min_count: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.5,
            tau: 4.0,
            min_count: 10,
        }
    }
}

/// Outcome of the adaptive selector with its per-grid diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MSelection {
    pub m: usize,
    pub grid: Vec<usize>,
    pub bandwidths: Vec<f64>,
    pub counts: Vec<usize>,
    pub statistics: Vec<f64>,
}

/// Largest grid value whose statistic stays within `(1 + tolerance)` of the
/// statistic at the last (smallest) grid value; the last value otherwise.
pub fn choose_from_spreads(grid: &[usize], spreads: &[f64], tolerance: f64) -> usize {
    assert!(!grid.is_empty() && grid.len() == spreads.len());
    let last = spreads[spreads.len() - 1];
    grid.iter()
        .zip(spreads)
        .find(|(_, &s)| s <= (1.0 + tolerance) * last)
        .map(|(&m, _)| m)
        .unwrap_or(grid[grid.len() - 1])
}

/// Chooses the perturbation subset size from the estimated effects.
///
/// For each grid value `m_k` the density of estimated effects within
/// `h_k = tau * sd(psi) / sqrt(m_k)` of `c` is estimated. A bounded density
/// keeps these estimates level across scales; mass piled up at the threshold
/// makes them grow as the band narrows.
pub fn select_m_adaptive(
    dhat: &[f64],
    psi: &[f64],
    c: f64,
    grid: &[usize],
    config: &AdaptiveConfig,
) -> Result<MSelection> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument("m grid must be non-empty and strictly decreasing".into()));
    }
    if !(config.tolerance > 0.0 && config.tau > 0.0) {
        return Err(Error::InvalidArgument("selector tolerance and tau must be positive".into()));
    }
    if dhat.is_empty() || psi.is_empty() {
        return Err(Error::InvalidArgument("no estimated effects".into()));
    }
    let n = dhat.len() as f64;
    let mean = psi.iter().sum::<f64>() / psi.len() as f64;
    let sd = (psi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / psi.len() as f64).sqrt();
    let scale = if sd > 0.0 { sd } else { 1.0 };
    let bandwidths: Vec<f64> = grid.iter().map(|&m| config.tau * scale / (m as f64).sqrt()).collect();
    let counts: Vec<usize> = bandwidths
        .iter()
        .map(|h| dhat.iter().filter(|&&v| (v - c).abs() <= *h).count())
        .collect();
    let statistics: Vec<f64> = counts
        .iter()
        .zip(&bandwidths)
        .map(|(&k, h)| k as f64 / (2.0 * h * n))
        .collect();
    let m = if counts[counts.len() - 1] < config.min_count {
        grid[0]
    } else {
        choose_from_spreads(grid, &statistics, config.tolerance)
    };
    Ok(MSelection {
        m,
        grid: grid.to_vec(),
        bandwidths,
        counts,
        statistics,
    })
}

fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Normal-approximation interval treating membership as fixed in advance.
pub fn naive_ci(psi: &[f64], member: &[bool], alpha: f64) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    let all: Vec<usize> = (0..psi.len()).collect();
    let point = pivotal_pisa(psi, member, &all)?;
    let n_s = point.subgroup_size_in_subset;
    if n_s < 2 {
        return Err(Error::VarianceUndefined(n_s));
    }
    let var = psi
        .iter()
        .zip(member)
        .filter(|(_, &m)| m)
        .map(|(x, _)| (x - point.value).powi(2))
        .sum::<f64>()
        / n_s as f64;
    let half = normal_quantile(1.0 - alpha / 2.0) * var.sqrt() / (n_s as f64).sqrt();
    Ok(ConfidenceInterval {
        method: Method::Naive,
        estimate: point.value,
        lower: point.value - half,
        upper: point.value + half,
        alpha,
        m: None,
        draws: None,
        seed: None,
        subgroup_size: n_s,
        redraw_count: 0,
        point,
    })
}

/// What the sample-split and oracle baselines need to rebuild the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationConfig {
    pub crossfit: CrossfitConfig,
    pub cate_learner: LearnerSpec,
    pub c: f64,
    pub alpha: f64,
}

/// Sample-split result; `cate` is the model fitted on the identification half.
#[derive(Clone, Debug)]
pub struct SplitResult {
    pub interval: ConfidenceInterval,
    pub cate: CateModel,
    pub identification_rows: Vec<usize>,
}

/// Identifies the subgroup on a random half and evaluates it on the other.
pub fn sample_split_ci(data: &Dataset, config: &IdentificationConfig, rng: &mut RngStream) -> Result<SplitResult> {
    let n = data.n();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("sample split needs n >= 4, got {n}")));
    }
    let ident = select_subset(n, n / 2, rng)?;
    let mut in_ident = vec![false; n];
    for &i in &ident {
        in_ident[i] = true;
    }
    let eval: Vec<usize> = (0..n).filter(|&i| !in_ident[i]).collect();
    let train = data.subset(&ident);
    let test = data.subset(&eval);

    let nuis_train = estimate_nuisances(&train, &config.crossfit, rng)?;
    let cate = fit_cate_dr(&train, &nuis_train, &config.cate_learner)?;
    let nuis_test = estimate_nuisances(&test, &config.crossfit, rng)?;
    let dhat = test
        .rows()
        .iter()
        .map(|r| cate.predict(&r.z))
        .collect::<Result<Vec<_>>>()?;
    let spec = SubgroupSpec::from_values(&dhat, config.c);
    if spec.size == 0 {
        return Err(Error::EmptySubgroup(format!("no evaluation-half row has estimated effect >= {}", config.c)));
    }
    let mut interval = naive_ci(&nuis_test.psi, &spec.member, config.alpha)?;
    interval.method = Method::SampleSplit;
    Ok(SplitResult {
        interval,
        cate,
        identification_rows: ident,
    })
}

/// Evaluates the frozen subgroup rule on a fresh sample from the generator.
pub fn oracle_ci<F>(
    generate: F,
    cate: &CateModel,
    config: &IdentificationConfig,
    rng: &mut RngStream,
) -> Result<ConfidenceInterval>
where
    F: FnOnce(&mut RngStream) -> Result<Dataset>,
{
    let fresh = generate(rng)?;
    let nuis = estimate_nuisances(&fresh, &config.crossfit, rng)?;
    let dhat = fresh
        .rows()
        .iter()
        .map(|r| cate.predict(&r.z))
        .collect::<Result<Vec<_>>>()?;
    let spec = SubgroupSpec::from_values(&dhat, config.c);
    if spec.size == 0 {
        return Err(Error::EmptySubgroup(format!("no fresh-sample row has estimated effect >= {}", config.c)));
    }
    let mut interval = naive_ci(&nuis.psi, &spec.member, config.alpha)?;
    interval.method = Method::Oracle;
    Ok(interval)
}
