//! Cross-fitted nuisance models and doubly-robust pseudo-outcomes.
//!
//! For every fold, the outcome model of each arm and the propensity model are
//! trained on the rows outside the fold and evaluated on the rows inside it,
//! so no row's prediction ever depends on its own observation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{format_float, make_folds, write_columns, Dataset, FoldAssignment, RngStream};
use crate::error::{Error, Result};
use crate::learners::{Learner, LearnerSpec};

/// Settings for nuisance estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossfitConfig {
    pub folds: usize,
    pub clip_eps: f64,
    pub outcome_learner: LearnerSpec,
    pub propensity_learner: LearnerSpec,
}

impl Default for CrossfitConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            clip_eps: 0.01,
            outcome_learner: LearnerSpec::spline(),
            propensity_learner: LearnerSpec::logistic(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NuisancePredictions {
    pub hhat1: Vec<f64>,
    pub hhat0: Vec<f64>,
    /// Propensity `P(G=1|Z)`, clipped to `[clip_eps, 1 - clip_eps]`.
    pub pihat1: Vec<f64>,
    pub psi: Vec<f64>,
    pub folds: FoldAssignment,
    pub clip_eps: f64,
}

impl NuisancePredictions {
    pub fn n(&self) -> usize {
        self.psi.len()
    }

    /// Diagnostic dump with columns `id,hhat1,hhat0,pihat1,psi`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let fmt = |v: &[f64]| v.iter().map(|x| format_float(*x)).collect::<Vec<_>>();
        write_columns(
            path,
            &["id", "hhat1", "hhat0", "pihat1", "psi"],
            &[
                (1..=self.n()).map(|i| i.to_string()).collect(),
                fmt(&self.hhat1),
                fmt(&self.hhat0),
                fmt(&self.pihat1),
                fmt(&self.psi),
            ],
        )
    }
}

/// Augmented inverse-propensity-weighted pseudo-outcome
/// `h1 - h0 + g/pi1 (y - h1) - (1-g)/(1-pi1) (y - h0)`.
pub fn pseudo_outcome(y: f64, g: u8, h1: f64, h0: f64, pi1: f64) -> f64 {
    debug_assert!(pi1 > 0.0 && pi1 < 1.0);
    let g = f64::from(g);
    h1 - h0 + g / pi1 * (y - h1) - (1.0 - g) / (1.0 - pi1) * (y - h0)
}

pub fn crossfit_nuisances(
    data: &Dataset,
    folds: &FoldAssignment,
    outcome_learner: &dyn Learner,
    propensity_learner: &dyn Learner,
    clip_eps: f64,
) -> Result<NuisancePredictions> {
    let n = data.n();
    if folds.n() != n {
        return Err(Error::InvalidArgument(format!(
            "fold assignment covers {} rows, dataset has {n}",
            folds.n()
        )));
    }
    if !(clip_eps > 0.0 && clip_eps < 0.5) {
        return Err(Error::InvalidArgument(format!("clip_eps {clip_eps} must lie in (0, 0.5)")));
    }
    let mut hhat1 = vec![0.0; n];
    let mut hhat0 = vec![0.0; n];
    let mut pihat1 = vec![0.0; n];

    for k in 0..folds.q() {
        let train = folds.complement(k);
        let treated: Vec<usize> = train.iter().copied().filter(|&i| data.row(i).g == 1).collect();
        let control: Vec<usize> = train.iter().copied().filter(|&i| data.row(i).g == 0).collect();
        if treated.is_empty() {
            return Err(Error::FoldComposition { fold: k, arm: 1 });
        }
        if control.is_empty() {
            return Err(Error::FoldComposition { fold: k, arm: 0 });
        }
        let y_of = |rows: &[usize]| rows.iter().map(|&i| data.row(i).y).collect::<Vec<_>>();
        let fit1 = outcome_learner.fit(&data.covariates_of(&treated), &y_of(&treated))?;
        let fit0 = outcome_learner.fit(&data.covariates_of(&control), &y_of(&control))?;
        let labels: Vec<f64> = train.iter().map(|&i| f64::from(data.row(i).g)).collect();
        let prop = propensity_learner.fit(&data.covariates_of(&train), &labels)?;

        for i in folds.members(k) {
            let z = &data.row(i).z;
            hhat1[i] = fit1.predict(z);
            hhat0[i] = fit0.predict(z);
            pihat1[i] = prop.predict(z).clamp(clip_eps, 1.0 - clip_eps);
        }
    }

    let psi: Vec<f64> = (0..n)
        .map(|i| {
            let row = data.row(i);
            pseudo_outcome(row.y, row.g, hhat1[i], hhat0[i], pihat1[i])
        })
        .collect();
    if let Some(i) = psi.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite pseudo-outcome at row {}", i + 1)));
    }
    Ok(NuisancePredictions {
        hhat1,
        hhat0,
        pihat1,
        psi,
        folds: folds.clone(),
        clip_eps,
    })
}

/// Draws folds from `rng` and cross-fits with the configured learners.
pub fn estimate_nuisances(data: &Dataset, config: &CrossfitConfig, rng: &mut RngStream) -> Result<NuisancePredictions> {
    let folds = make_folds(data.n(), config.folds, rng)?;
    crossfit_nuisances(
        data,
        &folds,
        &config.outcome_learner,
        &config.propensity_learner,
        config.clip_eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::learners::RegressionFit;
    use nalgebra::DMatrix;
    use std::sync::Mutex;

    #[test]
    fn pseudo_outcome_arithmetic() {
        assert_eq!(pseudo_outcome(1.0, 1, 0.0, 0.0, 0.5), 2.0);
        assert_eq!(pseudo_outcome(1.0, 0, 0.0, 0.0, 0.5), -2.0);
        assert_eq!(pseudo_outcome(3.0, 1, 3.0, 1.0, 0.2), 2.0);
    }

    /// Records the first covariate (a row id) of every training set it sees.
    struct Recorder(Mutex<Vec<Vec<usize>>>);

    impl Learner for Recorder {
        fn fit(&self, x: &DMatrix<f64>, _y: &[f64]) -> Result<RegressionFit> {
            self.0
                .lock()
                .unwrap()
                .push(x.column(0).iter().map(|v| *v as usize).collect());
            Ok(RegressionFit::Constant(0.5))
        }
    }

    fn id_dataset(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| Observation::new(i as f64, (i % 2) as u8, vec![i as f64])).collect()).unwrap()
    }

    #[test]
    fn training_sets_exclude_own_fold() {
        let data = id_dataset(4);
        let folds = FoldAssignment::from_labels(vec![0, 0, 1, 1], 2).unwrap();
        let rec = Recorder(Mutex::new(Vec::new()));
        let prop = Recorder(Mutex::new(Vec::new()));
        crossfit_nuisances(&data, &folds, &rec, &prop, 0.01).unwrap();
        let seen = rec.0.into_inner().unwrap();
        // fold 0 fits (treated, control) on rows {2,3}; fold 1 on rows {0,1}
        assert_eq!(seen, vec![vec![3], vec![2], vec![1], vec![0]]);
        let props = prop.0.into_inner().unwrap();
        assert_eq!(props, vec![vec![2, 3], vec![0, 1]]);
    }

    #[test]
    fn constant_propensity_oracle() {
        let data = id_dataset(20);
        let folds = make_folds(20, 4, &mut RngStream::new(1)).unwrap();
        let half = LearnerSpec::Constant { value: 0.5 };
        let nuis = crossfit_nuisances(&data, &folds, &LearnerSpec::Linear, &half, 0.01).unwrap();
        assert!(nuis.pihat1.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn clipping_applies() {
        let data = id_dataset(10);
        let folds = make_folds(10, 2, &mut RngStream::new(2)).unwrap();
        let extreme = LearnerSpec::Constant { value: 0.999_999 };
        let nuis = crossfit_nuisances(&data, &folds, &LearnerSpec::Linear, &extreme, 0.05).unwrap();
        assert!(nuis.pihat1.iter().all(|&p| p == 0.95));
    }

    #[test]
    fn missing_arm_names_fold() {
        // fold 0's complement holds only treated rows
        let rows = (0..6)
            .map(|i| Observation::new(0.0, u8::from(i >= 3), vec![i as f64]))
            .collect();
        let data = Dataset::new(rows).unwrap();
        let folds = FoldAssignment::from_labels(vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let half = LearnerSpec::Constant { value: 0.5 };
        match crossfit_nuisances(&data, &folds, &LearnerSpec::Linear, &half, 0.01) {
            Err(Error::FoldComposition { fold, arm }) => {
                assert_eq!((fold, arm), (0, 0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diagnostic_dump_layout() {
        let data = id_dataset(6);
        let folds = make_folds(6, 2, &mut RngStream::new(3)).unwrap();
        let half = LearnerSpec::Constant { value: 0.5 };
        let nuis = crossfit_nuisances(&data, &folds, &LearnerSpec::Linear, &half, 0.01).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        nuis.write_csv(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("id,hhat1,hhat0,pihat1,psi\n1,"));
        assert_eq!(text.lines().count(), 7);
    }
}
