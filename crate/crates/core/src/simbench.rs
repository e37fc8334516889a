//! Simulation settings A to D, per-replication truth and the coverage study driver.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::{estimate_nuisances, CrossfitConfig};
use crate::data::{format_float, Dataset, Observation, RngStream};
use crate::error::{Error, Result};
use crate::inference::{
    default_m_grid, naive_ci, oracle_ci, perturbation_ci, sample_split_ci, select_m_adaptive, select_subset,
    AdaptiveConfig, ConfidenceInterval, IdentificationConfig, MPolicy, Method,
};
use crate::learners::{sigmoid, LearnerSpec};
use crate::subgroup::{fit_cate_dr, membership, CateModel, SubgroupSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
    C,
    D,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::A, Setting::B, Setting::C, Setting::D];

    pub fn name(&self) -> &'static str {
        match self {
            Setting::A => "A",
            Setting::B => "B",
            Setting::C => "C",
            Setting::D => "D",
        }
    }

    /// Whether the second covariate follows the uniform/point-mass mixture.
    pub fn has_point_mass(&self) -> bool {
        matches!(self, Setting::C | Setting::D)
    }

    /// Linear working model for A and C, splines for B and D.
    pub fn cate_learner(&self) -> LearnerSpec {
        match self {
            Setting::A | Setting::C => LearnerSpec::Linear,
            Setting::B | Setting::D => LearnerSpec::spline(),
        }
    }

    fn stream_label(&self) -> u64 {
        *self as u64
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Setting::A),
            "B" | "b" => Ok(Setting::B),
            "C" | "c" => Ok(Setting::C),
            "D" | "d" => Ok(Setting::D),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub setting: Setting,
    pub n: usize,
    pub noise_sd: f64,
    pub c: f64,
}

impl DgpSpec {
    pub fn new(setting: Setting) -> Self {
        Self {
            setting,
            n: 1000,
            noise_sd: 0.4,
            c: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidArgument("n must be positive and noise_sd non-negative".into()));
        }
        Ok(())
    }
}

/// `T U + (1 - T) X` with `T ~ Bernoulli(1/2)`, `U ~ U[-1, 1]` and `X` on
/// `{0, ±0.8, ±1}` with masses `3/4, 1/16, 1/16`.
pub fn draw_mixture_z2<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        rng.random_range(-1.0..=1.0)
    } else {
        match rng.random_range(0..16u32) {
            0 => 1.0,
            1 => -1.0,
            2 => 0.8,
            3 => -0.8,
            _ => 0.0,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn step(z2: f64) -> f64 {
    if z2 >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Treatment effect `D(z)`.
pub fn true_cate(setting: Setting, z: &[f64]) -> f64 {
    let z2 = z[1];
    match setting {
        Setting::A | Setting::B => step(z2) - 0.06,
        Setting::C | Setting::D => {
            if z2.abs() <= 0.95 {
                z2 - 0.95 * sign(z2)
            } else {
                0.0
            }
        }
    }
}

/// Control-arm mean `h(0, z)`.
pub fn true_baseline(setting: Setting, z: &[f64]) -> f64 {
    let z2 = z[1];
    match setting {
        Setting::A | Setting::B => step(z2) - 0.06,
        Setting::C | Setting::D => step(z2) * z2.abs().cbrt(),
    }
}

/// `P(G = 1 | z)`.
pub fn true_propensity(z: &[f64]) -> f64 {
    sigmoid(0.5 * (z[0] + z[1]))
}

pub fn draw_covariates<R: Rng + ?Sized>(setting: Setting, rng: &mut R) -> [f64; 2] {
    let z1 = rng.random_range(-1.0..=1.0);
    let z2 = if setting.has_point_mass() {
        draw_mixture_z2(rng)
    } else {
        rng.random_range(-1.0..=1.0)
    };
    [z1, z2]
}

pub fn draw_dataset(spec: &DgpSpec, rng: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    let rows = (0..spec.n)
        .map(|_| {
            let z = draw_covariates(spec.setting, rng);
            let g = u8::from(rng.random::<f64>() < true_propensity(&z));
            let e: f64 = StandardNormal.sample(rng);
            let y = true_baseline(spec.setting, &z) + f64::from(g) * true_cate(spec.setting, &z) + spec.noise_sd * e;
            Observation::new(y, g, z.to_vec())
        })
        .collect();
    Dataset::new(rows)
}

/// Monte Carlo value of a subgroup average with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TruthEstimate {
    pub value: f64,
    pub se: f64,
    pub members: usize,
    pub draws: usize,
}

const TRUTH_CHUNK: usize = 1 << 14;

/// `E[D(Z) | rule(Z) >= c]` over `n_mc` covariate draws. Chunk `k` draws from
/// `rng.child(k)` and partial sums are combined in chunk order.
pub fn true_pisa_with<F>(setting: Setting, rule: F, c: f64, n_mc: usize, rng: &RngStream) -> Result<TruthEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be positive".into()));
    }
    let chunks = n_mc.div_ceil(TRUTH_CHUNK);
    let partial: Vec<(usize, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut child = rng.child(k as u64);
            let len = TRUTH_CHUNK.min(n_mc - k * TRUTH_CHUNK);
            let (mut count, mut sum, mut sq) = (0usize, 0.0, 0.0);
            for _ in 0..len {
                let z = draw_covariates(setting, &mut child);
                if rule(&z)? >= c {
                    let d = true_cate(setting, &z);
                    count += 1;
                    sum += d;
                    sq += d * d;
                }
            }
            Ok((count, sum, sq))
        })
        .collect::<Result<_>>()?;
    let (count, sum, sq) = partial
        .iter()
        .fold((0usize, 0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    if count == 0 {
        return Err(Error::EmptySubgroup(format!("no Monte Carlo draw falls in the subgroup at c = {c}")));
    }
    let mean = sum / count as f64;
    let var = (sq / count as f64 - mean * mean).max(0.0);
    Ok(TruthEstimate {
        value: mean,
        se: (var / count as f64).sqrt(),
        members: count,
        draws: n_mc,
    })
}

/// Population subgroup average for a frozen fitted CATE model.
pub fn true_pisa(cate: &CateModel, spec: &DgpSpec, n_mc: usize, rng: &RngStream) -> Result<TruthEstimate> {
    if !cate.has_predictor() {
        return Err(Error::PredictorUnavailable(cate.source().name().into()));
    }
    true_pisa_with(spec.setting, |z| cate.predict(z), spec.c, n_mc, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method", content = "m")]
pub enum StudyMethod {
    Naive,
    SampleSplit,
    Oracle,
    Perturbation(MPolicy),
}

impl StudyMethod {
    /// The eight comparators of the coverage table.
    pub fn table() -> Vec<StudyMethod> {
        vec![
            StudyMethod::Naive,
            StudyMethod::SampleSplit,
            StudyMethod::Oracle,
            StudyMethod::Perturbation(MPolicy::Full),
            StudyMethod::Perturbation(MPolicy::Half),
            StudyMethod::Perturbation(MPolicy::Quarter),
            StudyMethod::Perturbation(MPolicy::Eighth),
            StudyMethod::Perturbation(MPolicy::Adaptive),
        ]
    }

    pub fn method(&self) -> Method {
        match self {
            StudyMethod::Naive => Method::Naive,
            StudyMethod::SampleSplit => Method::SampleSplit,
            StudyMethod::Oracle => Method::Oracle,
            StudyMethod::Perturbation(_) => Method::Perturbation,
        }
    }

    pub fn m_policy(&self) -> String {
        match self {
            StudyMethod::Perturbation(p) => p.label(),
            _ => String::new(),
        }
    }
}

/// How the replication's subgroup is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubgroupMode {
    /// Threshold the fitted CATE model (the selection problem under study).
    #[default]
    Estimated,
    /// Threshold the true CATE, fixed before seeing data.
    Predefined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub settings: Vec<Setting>,
    pub methods: Vec<StudyMethod>,
    pub reps: usize,
    pub n: usize,
    pub noise_sd: f64,
    pub c: f64,
    #[serde(rename = "M")]
    pub draws: usize,
    pub alpha: f64,
    pub n_mc: usize,
    pub crossfit: CrossfitConfig,
    pub adaptive: AdaptiveConfig,
    pub subgroup: SubgroupMode,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            settings: Setting::ALL.to_vec(),
            methods: StudyMethod::table(),
            reps: 500,
            n: 1000,
            noise_sd: 0.4,
            c: 0.0,
            draws: 2000,
            alpha: 0.05,
            n_mc: 1_000_000,
            crossfit: CrossfitConfig::default(),
            adaptive: AdaptiveConfig::default(),
            subgroup: SubgroupMode::Estimated,
            seed: 1,
        }
    }
}

impl StudyConfig {
    pub fn dgp(&self, setting: Setting) -> DgpSpec {
        DgpSpec {
            setting,
            n: self.n,
            noise_sd: self.noise_sd,
            c: self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be at least 1".into()));
        }
        if self.settings.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidArgument("at least one setting and one method required".into()));
        }
        if self.draws < 100 {
            return Err(Error::InvalidArgument(format!("M = {} below the minimum of 100", self.draws)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if self.n < 2 * self.crossfit.folds {
            return Err(Error::InvalidArgument(format!("n = {} too small for {} folds", self.n, self.crossfit.folds)));
        }
        if self.subgroup == SubgroupMode::Predefined
            && self.methods.iter().any(|m| matches!(m, StudyMethod::SampleSplit | StudyMethod::Oracle))
        {
            return Err(Error::InvalidArgument(
                "sample-split and oracle need an estimated subgroup".into(),
            ));
        }
        self.dgp(self.settings[0]).validate()
    }
}

/// One method's outcome in one replication.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub setting: Setting,
    pub rep: usize,
    pub method: StudyMethod,
    pub interval: Option<ConfidenceInterval>,
    pub truth: Option<f64>,
    /// Value of the sample-split interval's own target, the average over its
    /// identification-half subgroup.
    pub own_target: Option<f64>,
    pub covered: Option<bool>,
    pub selected_m: Option<usize>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn failed(setting: Setting, rep: usize, method: StudyMethod, err: &Error) -> Self {
        Self {
            setting,
            rep,
            method,
            interval: None,
            truth: None,
            own_target: None,
            covered: None,
            selected_m: None,
            error: Some(err.to_string()),
        }
    }
}

mod label {
    pub const DATA: u64 = 1;
    pub const NUISANCE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const ORACLE: u64 = 4;
    pub const TRUTH: u64 = 5;
    pub const SPLIT_TRUTH: u64 = 6;
    pub const SUBSET: u64 = 7;
    pub const DRAWS: u64 = 8;
}

struct Fitted {
    data: Dataset,
    psi: Vec<f64>,
    cate: Option<CateModel>,
    spec: SubgroupSpec,
    truth: f64,
}

fn prepare(spec: &DgpSpec, config: &StudyConfig, rng: &RngStream) -> Result<Fitted> {
    let data = draw_dataset(spec, &mut rng.child(label::DATA))?;
    let nuis = estimate_nuisances(&data, &config.crossfit, &mut rng.child(label::NUISANCE))?;
    match config.subgroup {
        SubgroupMode::Estimated => {
            let cate = fit_cate_dr(&data, &nuis, &spec.setting.cate_learner())?;
            let sub = membership(&cate, spec.c)?;
            let truth = true_pisa(&cate, spec, config.n_mc, &rng.child(label::TRUTH))?.value;
            Ok(Fitted {
                data,
                psi: nuis.psi,
                cate: Some(cate),
                spec: sub,
                truth,
            })
        }
        SubgroupMode::Predefined => {
            let values: Vec<f64> = data.rows().iter().map(|r| true_cate(spec.setting, &r.z)).collect();
            let sub = membership(&CateModel::from_values(values)?, spec.c)?;
            let truth = true_pisa_with(
                spec.setting,
                |z| Ok(true_cate(spec.setting, z)),
                spec.c,
                config.n_mc,
                &rng.child(label::TRUTH),
            )?
            .value;
            Ok(Fitted {
                data,
                psi: nuis.psi,
                cate: None,
                spec: sub,
                truth,
            })
        }
    }
}

fn run_method(
    fitted: &Fitted,
    dgp: &DgpSpec,
    method: StudyMethod,
    config: &StudyConfig,
    rng: &RngStream,
) -> Result<(ConfidenceInterval, Option<usize>, Option<f64>)> {
    let ident = IdentificationConfig {
        crossfit: config.crossfit.clone(),
        cate_learner: dgp.setting.cate_learner(),
        c: dgp.c,
        alpha: config.alpha,
    };
    let n = fitted.data.n();
    match method {
        StudyMethod::Naive => Ok((naive_ci(&fitted.psi, &fitted.spec.member, config.alpha)?, None, None)),
        StudyMethod::SampleSplit => {
            let split = sample_split_ci(&fitted.data, &ident, &mut rng.child(label::SPLIT))?;
            let own = true_pisa(&split.cate, dgp, config.n_mc, &rng.child(label::SPLIT_TRUTH))?.value;
            Ok((split.interval, None, Some(own)))
        }
        StudyMethod::Oracle => {
            let cate = fitted
                .cate
                .as_ref()
                .ok_or_else(|| Error::PredictorUnavailable("predefined subgroup".into()))?;
            let ci = oracle_ci(|r| draw_dataset(dgp, r), cate, &ident, &mut rng.child(label::ORACLE))?;
            Ok((ci, None, None))
        }
        StudyMethod::Perturbation(policy) => {
            let (m, selected) = match policy.resolve(n) {
                Some(m) => (m, None),
                None => {
                    let dhat: Vec<f64> = match &fitted.cate {
                        Some(c) => c.insample_values().to_vec(),
                        None => fitted.data.rows().iter().map(|r| true_cate(dgp.setting, &r.z)).collect(),
                    };
                    let sel = select_m_adaptive(&dhat, &fitted.psi, dgp.c, &default_m_grid(n), &config.adaptive)?;
                    (sel.m, Some(sel.m))
                }
            };
            let policy_rng = rng.child(1000 + m as u64);
            let subset = select_subset(n, m, &mut policy_rng.child(label::SUBSET))?;
            let ci = perturbation_ci(
                &fitted.psi,
                &fitted.spec.member,
                &subset,
                config.draws,
                config.alpha,
                &policy_rng.child(label::DRAWS),
            )?;
            Ok((ci, selected, None))
        }
    }
}

/// One replication of every requested method on a common dataset.
pub fn run_replication(dgp: &DgpSpec, config: &StudyConfig, rep: usize, rng: &RngStream) -> Vec<ReplicationRecord> {
    let fitted = match prepare(dgp, config, rng) {
        Ok(f) => f,
        Err(e) => {
            return config
                .methods
                .iter()
                .map(|&m| ReplicationRecord::failed(dgp.setting, rep, m, &e))
                .collect()
        }
    };
    config
        .methods
        .iter()
        .map(|&method| match run_method(&fitted, dgp, method, config, rng) {
            Ok((ci, selected_m, own_target)) => ReplicationRecord {
                setting: dgp.setting,
                rep,
                method,
                covered: Some(ci.covers(fitted.truth)),
                interval: Some(ci),
                truth: Some(fitted.truth),
                own_target,
                selected_m,
                error: None,
            },
            Err(e) => ReplicationRecord::failed(dgp.setting, rep, method, &e),
        })
        .collect()
}

/// Aggregated coverage and length for one (setting, method).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub setting: Setting,
    pub method: Method,
    pub m_policy: String,
    pub reps: usize,
    pub ecp: f64,
    pub cil: f64,
    pub failures: usize,
    pub mean_selected_m: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub rows: Vec<StudyRow>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

impl StudyResult {
    pub fn row(&self, setting: Setting, method: StudyMethod) -> Option<&StudyRow> {
        self.rows.iter().find(|r| {
            r.setting == setting && r.method == method.method() && r.m_policy == method.m_policy()
        })
    }

    pub fn records_for(&self, setting: Setting, method: StudyMethod) -> impl Iterator<Item = &ReplicationRecord> {
        self.records
            .iter()
            .filter(move |r| r.setting == setting && r.method == method)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    /// Summary table, one row per (setting, method).
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["setting", "method", "m_policy", "reps", "ecp", "cil", "failures", "mean_selected_m"])?;
        for r in &self.rows {
            w.write_record([
                r.setting.name().to_string(),
                r.method.name().to_string(),
                r.m_policy.clone(),
                r.reps.to_string(),
                format_float(r.ecp),
                format_float(r.cil),
                r.failures.to_string(),
                r.mean_selected_m.map(format_float).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn aggregate(setting: Setting, method: StudyMethod, records: &[ReplicationRecord]) -> StudyRow {
    let ok: Vec<&ReplicationRecord> = records
        .iter()
        .filter(|r| r.setting == setting && r.method == method && r.interval.is_some())
        .collect();
    let total = records
        .iter()
        .filter(|r| r.setting == setting && r.method == method)
        .count();
    let k = ok.len() as f64;
    let covered = ok.iter().filter(|r| r.covered == Some(true)).count() as f64;
    let cil = ok.iter().map(|r| r.interval.as_ref().map_or(0.0, |ci| ci.length())).sum::<f64>() / k;
    let selected: Vec<f64> = ok.iter().filter_map(|r| r.selected_m.map(|m| m as f64)).collect();
    StudyRow {
        setting,
        method: method.method(),
        m_policy: method.m_policy(),
        reps: ok.len(),
        ecp: 100.0 * covered / k,
        cil,
        failures: total - ok.len(),
        mean_selected_m: (!selected.is_empty()).then(|| selected.iter().sum::<f64>() / selected.len() as f64),
    }
}

/// Runs every (setting, replication) in parallel. Replication `r` of a
/// setting draws from `RngStream::new(seed).child(setting).child(r)`.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let jobs: Vec<(Setting, usize)> = config
        .settings
        .iter()
        .flat_map(|&s| (0..config.reps).map(move |r| (s, r)))
        .collect();
    let records: Vec<ReplicationRecord> = jobs
        .par_iter()
        .flat_map_iter(|&(setting, rep)| {
            let rng = root.child(setting.stream_label()).child(rep as u64);
            run_replication(&config.dgp(setting), config, rep, &rng)
        })
        .collect();
    let rows = config
        .settings
        .iter()
        .flat_map(|&s| config.methods.iter().map(move |&m| (s, m)))
        .map(|(s, m)| aggregate(s, m, &records))
        .collect();
    Ok(StudyResult {
        config: config.clone(),
        rows,
        records,
    })
}
