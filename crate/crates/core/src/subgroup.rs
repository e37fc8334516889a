//! In-sample subgroup identification: the CATE working model fitted on the
//! whole sample (or supplied as black-box predictions) and its thresholding.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossfit::NuisancePredictions;
use crate::data::{format_float, write_columns, Dataset};
use crate::error::{Error, Result};
use crate::learners::{Learner, LearnerSpec, RegressionFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CateSource {
    DrLinear,
    DrSpline,
    DrTree,
    DrLocalpoly,
    DrConstant,
    TLearner,
    External,
}

impl CateSource {
    pub fn name(&self) -> &'static str {
        match self {
            CateSource::DrLinear => "dr-linear",
            CateSource::DrSpline => "dr-spline",
            CateSource::DrTree => "dr-tree",
            CateSource::DrLocalpoly => "dr-localpoly",
            CateSource::DrConstant => "dr-constant",
            CateSource::TLearner => "t-learner",
            CateSource::External => "external",
        }
    }

    fn for_dr(spec: &LearnerSpec) -> Result<Self> {
        Ok(match spec {
            LearnerSpec::Linear => CateSource::DrLinear,
            LearnerSpec::Spline { .. } => CateSource::DrSpline,
            LearnerSpec::Tree { .. } => CateSource::DrTree,
            LearnerSpec::LocalPoly { .. } => CateSource::DrLocalpoly,
            LearnerSpec::Constant { .. } => CateSource::DrConstant,
            LearnerSpec::Logistic { .. } => {
                return Err(Error::InvalidArgument("logistic regression cannot model a CATE".into()))
            }
        })
    }
}

#[derive(Clone, Debug)]
enum CatePredictor {
    Direct(RegressionFit),
    /// Treated-arm minus control-arm outcome regression.
    Difference(RegressionFit, RegressionFit),
}

impl CatePredictor {
    fn predict(&self, z: &[f64]) -> f64 {
        match self {
            CatePredictor::Direct(f) => f.predict(z),
            CatePredictor::Difference(f1, f0) => f1.predict(z) - f0.predict(z),
        }
    }
}

/// The subgroup-identification function and its in-sample values.
#[derive(Clone, Debug)]
pub struct CateModel {
    source: CateSource,
    predictor: Option<CatePredictor>,
    insample: Vec<f64>,
}

impl CateModel {
    pub fn source(&self) -> CateSource {
        self.source
    }

    pub fn insample_values(&self) -> &[f64] {
        &self.insample
    }

    pub fn n(&self) -> usize {
        self.insample.len()
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    /// Evaluates the fitted function at a new covariate vector.
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        self.predictor
            .as_ref()
            .map(|p| p.predict(z))
            .ok_or_else(|| Error::PredictorUnavailable(self.source.name().to_string()))
    }

    /// Values supplied directly, with no callable predictor.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i + 1,
                message: "non-finite CATE value".into(),
            });
        }
        Ok(Self {
            source: CateSource::External,
            predictor: None,
            insample: values,
        })
    }

    /// Writes `id,dhat` predictions in the layout read by [`load_blackbox`].
    pub fn write_predictions<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        write_columns(
            path,
            &["id", "dhat"],
            &[
                (1..=self.n()).map(|i| i.to_string()).collect(),
                self.insample.iter().map(|v| format_float(*v)).collect(),
            ],
        )
    }
}

/// DR-learner: regresses the pseudo-outcomes on the covariates over the whole sample.
pub fn fit_cate_dr(data: &Dataset, nuis: &NuisancePredictions, learner: &LearnerSpec) -> Result<CateModel> {
    if nuis.n() != data.n() {
        return Err(Error::InvalidArgument(format!(
            "nuisances cover {} rows, dataset has {}",
            nuis.n(),
            data.n()
        )));
    }
    let source = CateSource::for_dr(learner)?;
    let x = data.covariates();
    let fit = learner.fit(&x, &nuis.psi)?;
    let insample = fit.predict_rows(&x);
    Ok(CateModel {
        source,
        predictor: Some(CatePredictor::Direct(fit)),
        insample,
    })
}

/// T-learner: separate outcome regressions per arm on the whole sample.
pub fn fit_cate_tlearner(data: &Dataset, outcome_learner: &dyn Learner) -> Result<CateModel> {
    let treated: Vec<usize> = (0..data.n()).filter(|&i| data.row(i).g == 1).collect();
    let control: Vec<usize> = (0..data.n()).filter(|&i| data.row(i).g == 0).collect();
    if treated.is_empty() {
        return Err(Error::FoldComposition { fold: 0, arm: 1 });
    }
    if control.is_empty() {
        return Err(Error::FoldComposition { fold: 0, arm: 0 });
    }
    let y_of = |rows: &[usize]| rows.iter().map(|&i| data.row(i).y).collect::<Vec<_>>();
    let fit1 = outcome_learner.fit(&data.covariates_of(&treated), &y_of(&treated))?;
    let fit0 = outcome_learner.fit(&data.covariates_of(&control), &y_of(&control))?;
    let predictor = CatePredictor::Difference(fit1, fit0);
    let insample = data.rows().iter().map(|r| predictor.predict(&r.z)).collect();
    Ok(CateModel {
        source: CateSource::TLearner,
        predictor: Some(predictor),
        insample,
    })
}

/// Reads externally produced `id,dhat` predictions aligned with `data`.
pub fn load_blackbox<P: AsRef<Path>>(path: P, data: &Dataset) -> Result<CateModel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(File::open(path)?);
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("prediction file lacks column `{name}`")))
    };
    let id_col = col("id")?;
    let dhat_col = col("dhat")?;
    let mut values = Vec::with_capacity(data.n());
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let id_raw = rec.get(id_col).unwrap_or("").trim();
        let id: usize = id_raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("cannot parse id `{id_raw}`"),
        })?;
        if id != row {
            return Err(Error::Alignment(format!("row {row} carries id {id}, expected {row}")));
        }
        let raw = rec.get(dhat_col).unwrap_or("").trim();
        let v: f64 = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("cannot parse dhat `{raw}`"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row,
                message: format!("non-finite dhat `{raw}`"),
            });
        }
        values.push(v);
    }
    if values.len() != data.n() {
        return Err(Error::Alignment(format!(
            "prediction file has {} rows, dataset has {}",
            values.len(),
            data.n()
        )));
    }
    CateModel::from_values(values)
}

/// Rows with `dhat >= c`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubgroupSpec {
    pub c: f64,
    pub member: Vec<bool>,
    pub size: usize,
}

impl SubgroupSpec {
    /// Thresholds arbitrary values; an empty subgroup is allowed here.
    pub fn from_values(values: &[f64], c: f64) -> Self {
        let member: Vec<bool> = values.iter().map(|&v| v >= c).collect();
        let size = member.iter().filter(|&&m| m).count();
        Self { c, member, size }
    }
}

/// Thresholds the in-sample CATE values at `c` (inclusive).
pub fn membership(cate: &CateModel, c: f64) -> Result<SubgroupSpec> {
    let spec = SubgroupSpec::from_values(cate.insample_values(), c);
    if spec.size == 0 {
        return Err(Error::EmptySubgroup(format!(
            "no row has estimated effect >= {c} (max {})",
            cate.insample_values().iter().copied().fold(f64::NEG_INFINITY, f64::max)
        )));
    }
    Ok(spec)
}

/// Fraction of rows whose estimated effect lies within `bandwidth` of `c`.
pub fn boundary_diagnostic(values: &[f64], c: f64, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be positive")));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let near = values.iter().filter(|&&v| (v - c).abs() <= bandwidth).count();
    Ok(near as f64 / values.len() as f64)
}
