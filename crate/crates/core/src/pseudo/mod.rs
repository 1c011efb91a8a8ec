//! Nuisance outcome models, RA-learner pseudo-outcomes and direct
//! non-parametric effect scores.
//!
//! Pseudo-outcomes are computed once per task as a preprocessing pass; the
//! nuisance fits do not depend on the meta-model, so precomputing is
//! equivalent to estimating them inside the training loop.

mod regressors;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use regressors::{KnnRegressor, MlpRegressor, MlpRegressorConfig};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthgen::{true_cate, GroundTruth};
use crate::tasks::{MetaDataset, Sample, SampleId, TaskDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// `tau = Y - mu0(X)` on treated units only.
    TreatedOnly,
    /// Full RA-learner over treated and control units.
    AllUnits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    Knn,
    Mlp,
    Oracle,
}

/// Serializable nuisance settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSettings {
    pub kind: NuisanceKind,
    pub knn_k: usize,
    pub mlp: MlpRegressorConfig,
}

impl Default for NuisanceSettings {
    fn default() -> Self {
        Self {
            kind: NuisanceKind::Knn,
            knn_k: 10,
            mlp: MlpRegressorConfig::default(),
        }
    }
}

/// Known outcome surface, available for synthetic data only.
#[derive(Clone, Debug)]
pub struct OracleTruth<T> {
    pub ground_truth: Arc<GroundTruth<T>>,
    /// Intervention for the treated arm.
    pub w: Option<Vec<T>>,
}

/// Fully specified nuisance estimator.
#[derive(Clone, Debug)]
pub enum NuisanceSpec<T> {
    Knn { k: usize },
    Mlp(MlpRegressorConfig),
    Oracle(OracleTruth<T>),
}

impl<T: Scalar> NuisanceSpec<T> {
    /// Resolves settings; oracle settings need the ground truth.
    pub fn from_settings(
        settings: &NuisanceSettings,
        truth: Option<&Arc<GroundTruth<T>>>,
        w: Option<&[T]>,
    ) -> Result<Self> {
        Ok(match settings.kind {
            NuisanceKind::Knn => NuisanceSpec::Knn { k: settings.knn_k },
            NuisanceKind::Mlp => NuisanceSpec::Mlp(settings.mlp),
            NuisanceKind::Oracle => NuisanceSpec::Oracle(OracleTruth {
                ground_truth: truth
                    .cloned()
                    .ok_or_else(|| Error::Config("oracle nuisance needs ground truth".into()))?,
                w: w.map(<[T]>::to_vec),
            }),
        })
    }

    pub fn kind(&self) -> NuisanceKind {
        match self {
            NuisanceSpec::Knn { .. } => NuisanceKind::Knn,
            NuisanceSpec::Mlp(_) => NuisanceKind::Mlp,
            NuisanceSpec::Oracle(_) => NuisanceKind::Oracle,
        }
    }
}

#[derive(Clone, Debug)]
enum Regressor<T> {
    Knn(KnnRegressor<T>),
    Mlp(MlpRegressor<T>),
}

impl<T: Scalar> Regressor<T> {
    fn fit(spec: &NuisanceSpec<T>, rows: &[&Arc<Sample<T>>], seed: u64) -> Result<Self> {
        let xs: Vec<Vec<T>> = rows.iter().map(|s| s.x.clone()).collect();
        let ys: Vec<T> = rows.iter().map(|s| s.y).collect();
        match spec {
            NuisanceSpec::Knn { k } => Ok(Regressor::Knn(KnnRegressor::fit(xs, ys, *k)?)),
            NuisanceSpec::Mlp(cfg) => Ok(Regressor::Mlp(MlpRegressor::fit(&xs, &ys, cfg, seed)?)),
            NuisanceSpec::Oracle(_) => unreachable!("oracle models are not fitted"),
        }
    }

    fn predict(&self, x: &[T]) -> Result<T> {
        match self {
            Regressor::Knn(m) => Ok(m.predict(x)),
            Regressor::Mlp(m) => m.predict(x),
        }
    }
}

#[derive(Clone, Debug)]
enum State<T> {
    Single {
        model: Regressor<T>,
        trained_on: HashSet<SampleId>,
    },
    CrossFit {
        /// Model `k` is trained on every fold except `k`.
        models: Vec<Regressor<T>>,
        fold_of: HashMap<SampleId, usize>,
    },
    Oracle(OracleTruth<T>),
}

/// Fitted regression of `E[Y | X, arm]`.
#[derive(Clone, Debug)]
pub struct NuisanceModel<T> {
    pub kind: NuisanceKind,
    pub arm: Arm,
    state: State<T>,
}

/// Fits a nuisance model on the samples of `arm`. With `folds >= 2` the model
/// is cross-fitted: each training sample is later predicted by the fold model
/// that never saw it.
pub fn fit_nuisance<T: Scalar>(
    samples: &[Arc<Sample<T>>],
    arm: Arm,
    spec: &NuisanceSpec<T>,
    folds: usize,
    seed: u64,
) -> Result<NuisanceModel<T>> {
    let kind = spec.kind();
    if let NuisanceSpec::Oracle(truth) = spec {
        if arm == Arm::Treated && truth.w.is_none() {
            return Err(Error::Config("treated-arm oracle needs the intervention vector".into()));
        }
        return Ok(NuisanceModel {
            kind,
            arm,
            state: State::Oracle(truth.clone()),
        });
    }
    let want_treated = arm == Arm::Treated;
    let rows: Vec<&Arc<Sample<T>>> = samples.iter().filter(|s| s.treated == want_treated).collect();
    if rows.len() < 2 {
        return Err(Error::Fit(format!(
            "{arm:?} arm has {} samples, need at least 2",
            rows.len()
        )));
    }
    let state = if folds >= 2 {
        if rows.len() < folds {
            return Err(Error::Fit(format!(
                "{} samples cannot fill {folds} folds",
                rows.len()
            )));
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng::stream(seed, 1));
        let mut fold_index = vec![0usize; rows.len()];
        for (pos, &i) in order.iter().enumerate() {
            fold_index[i] = pos % folds;
        }
        let models = (0..folds)
            .into_par_iter()
            .map(|k| {
                let train: Vec<&Arc<Sample<T>>> = rows
                    .iter()
                    .zip(&fold_index)
                    .filter(|(_, &f)| f != k)
                    .map(|(s, _)| *s)
                    .collect();
                Regressor::fit(spec, &train, rng::derive_seed(seed, k as u64 + 2))
            })
            .collect::<Result<Vec<_>>>()?;
        let fold_of = rows.iter().zip(fold_index).map(|(s, f)| (s.id, f)).collect();
        State::CrossFit { models, fold_of }
    } else {
        State::Single {
            model: Regressor::fit(spec, &rows, seed)?,
            trained_on: rows.iter().map(|s| s.id).collect(),
        }
    };
    Ok(NuisanceModel { kind, arm, state })
}

impl<T: Scalar> NuisanceModel<T> {
    pub fn is_cross_fitted(&self) -> bool {
        matches!(self.state, State::CrossFit { .. } | State::Oracle(_))
    }

    /// Prediction for an unseen point: averages fold models when cross-fitted.
    pub fn predict(&self, x: &[T]) -> Result<T> {
        match &self.state {
            State::Single { model, .. } => model.predict(x),
            State::CrossFit { models, .. } => {
                let mut total = T::zero();
                for m in models {
                    total += m.predict(x)?;
                }
                Ok(total / T::lit(models.len() as f64))
            }
            State::Oracle(truth) => {
                let gt = &truth.ground_truth;
                let base = gt.baseline(x)?;
                match (self.arm, &truth.w) {
                    (Arm::Control, _) => Ok(base),
                    (Arm::Treated, Some(w)) => Ok(base + true_cate(gt, w, x)?),
                    (Arm::Treated, None) => Err(Error::State("oracle has no intervention".into())),
                }
            }
        }
    }

    /// Prediction for a specific sample, out-of-fold when it was a training sample.
    pub fn predict_sample(&self, s: &Sample<T>) -> Result<T> {
        if let State::CrossFit { models, fold_of } = &self.state {
            if let Some(&k) = fold_of.get(&s.id) {
                return models[k].predict(&s.x);
            }
        }
        self.predict(&s.x)
    }

    /// Whether the prediction for `id` comes from a model trained on `id`.
    pub fn prediction_uses_sample(&self, id: SampleId) -> bool {
        match &self.state {
            State::Single { trained_on, .. } => trained_on.contains(&id),
            State::CrossFit { .. } | State::Oracle(_) => false,
        }
    }

    /// Fold assigned to a training sample, if cross-fitted.
    pub fn fold_of(&self, id: SampleId) -> Option<usize> {
        match &self.state {
            State::CrossFit { fold_of, .. } => fold_of.get(&id).copied(),
            _ => None,
        }
    }
}

/// Pseudo-outcomes of one task, aligned with `sample_ids`: the treated group
/// first, then (all-units mode) the control group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PseudoOutcomeBatch<T> {
    pub task_id: usize,
    pub mode: PseudoMode,
    pub sample_ids: Vec<SampleId>,
    pub values: Vec<T>,
}

impl<T: Scalar> PseudoOutcomeBatch<T> {
    pub fn validate_against(&self, td: &TaskDataset<T>) -> Result<()> {
        let expected = match self.mode {
            PseudoMode::TreatedOnly => td.treated.len(),
            PseudoMode::AllUnits => td.treated.len() + td.control.len(),
        };
        if self.values.len() != expected || self.sample_ids.len() != expected {
            return Err(Error::State(format!(
                "task {} pseudo-outcomes cover {} samples, expected {expected}",
                td.task_id,
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// RA-learner pseudo-outcomes `W(Y - mu0(X)) + (1 - W)(mu1(X) - Y)`.
pub fn ra_pseudo_outcomes<T: Scalar>(
    td: &TaskDataset<T>,
    mu0: &NuisanceModel<T>,
    mu1: Option<&NuisanceModel<T>>,
    mode: PseudoMode,
) -> Result<PseudoOutcomeBatch<T>> {
    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    for s in &td.treated {
        sample_ids.push(s.id);
        values.push(s.y - mu0.predict_sample(s)?);
    }
    if mode == PseudoMode::AllUnits {
        let mu1 = mu1.ok_or_else(|| {
            Error::Config("all-units pseudo-outcomes need a treated-arm model".into())
        })?;
        for s in &td.control {
            sample_ids.push(s.id);
            values.push(mu1.predict_sample(s)? - s.y);
        }
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite pseudo-outcome in task {}", td.task_id)));
    }
    Ok(PseudoOutcomeBatch {
        task_id: td.task_id,
        mode,
        sample_ids,
        values,
    })
}

/// Direct non-parametric scores `W(Y - m(X,0)) + (1 - W)(m(X,1) - Y)` from
/// cross-fitted outcome models; treated group first, then controls.
pub fn gamma_scores<T: Scalar>(
    td: &TaskDataset<T>,
    m_hat0: &NuisanceModel<T>,
    m_hat1: &NuisanceModel<T>,
) -> Result<Vec<T>> {
    for m in [m_hat0, m_hat1] {
        if !m.is_cross_fitted() {
            return Err(Error::State(format!(
                "{:?}-arm outcome model is not cross-fitted",
                m.arm
            )));
        }
    }
    let mut out = Vec::with_capacity(td.treated.len() + td.control.len());
    for s in &td.treated {
        out.push(s.y - m_hat0.predict_sample(s)?);
    }
    for s in &td.control {
        out.push(m_hat1.predict_sample(s)? - s.y);
    }
    Ok(out)
}

/// Fills `pseudo` on every task. Tasks with identical control groups share
/// one control-arm fit.
pub fn compute_pseudo_outcomes<T: Scalar>(
    md: &mut MetaDataset<T>,
    settings: &NuisanceSettings,
    mode: PseudoMode,
    folds: usize,
    seed: u64,
    truth: Option<&Arc<GroundTruth<T>>>,
) -> Result<()> {
    let mut groups: BTreeMap<Vec<SampleId>, Vec<usize>> = BTreeMap::new();
    for (i, t) in md.tasks.iter().enumerate() {
        groups
            .entry(t.control.iter().map(|s| s.id).collect())
            .or_default()
            .push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let control_spec = NuisanceSpec::from_settings(settings, truth, None)?;
    let tasks = &md.tasks;
    let mu0s: Vec<NuisanceModel<T>> = groups
        .par_iter()
        .map(|g| {
            let first = &tasks[g[0]];
            fit_nuisance(
                &first.control,
                Arm::Control,
                &control_spec,
                folds,
                rng::derive_seed(seed, first.task_id as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut mu0_of = vec![0usize; tasks.len()];
    for (gi, g) in groups.iter().enumerate() {
        for &ti in g {
            mu0_of[ti] = gi;
        }
    }
    let batches: Vec<PseudoOutcomeBatch<T>> = tasks
        .par_iter()
        .enumerate()
        .map(|(ti, td)| {
            let mu1 = match mode {
                PseudoMode::TreatedOnly => None,
                PseudoMode::AllUnits => {
                    let spec = NuisanceSpec::from_settings(settings, truth, Some(&td.w))?;
                    Some(fit_nuisance(
                        &td.treated,
                        Arm::Treated,
                        &spec,
                        folds,
                        rng::derive_seed(seed ^ 0xA5A5, td.task_id as u64),
                    )?)
                }
            };
            ra_pseudo_outcomes(td, &mu0s[mu0_of[ti]], mu1.as_ref(), mode)
        })
        .collect::<Result<_>>()?;
    for (td, batch) in md.tasks.iter_mut().zip(batches) {
        td.pseudo = Some(batch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_population, DgpConfig, EffectKind};
    use crate::tasks::build_meta_dataset;

    fn s(id: u64, x: f64, y: f64, task: Option<usize>) -> Arc<Sample<f64>> {
        Arc::new(Sample {
            id: SampleId(id),
            x: vec![x],
            y,
            treated: task.is_some(),
            task_id: task,
            tau_true: None,
            tau_pseudo: None,
        })
    }

    fn fixed(arm: Arm, value: f64) -> NuisanceModel<f64> {
        let rows = vec![s(90, 0.0, value, None), s(91, 1.0, value, None)];
        let rows: Vec<_> = rows
            .into_iter()
            .map(|r| {
                let mut v = (*r).clone();
                v.treated = arm == Arm::Treated;
                v.task_id = if v.treated { Some(0) } else { None };
                Arc::new(v)
            })
            .collect();
        fit_nuisance(&rows, arm, &NuisanceSpec::Knn { k: 2 }, 2, 0).unwrap()
    }

    fn task(treated: Vec<Arc<Sample<f64>>>, control: Vec<Arc<Sample<f64>>>) -> TaskDataset<f64> {
        TaskDataset { task_id: 0, w: vec![1.0], treated, control, pseudo: None }
    }

    #[test]
    fn ra_formula_on_both_arms() {
        let td = task(vec![s(0, 0.5, 3.0, Some(0))], vec![s(1, 0.5, 1.0, None)]);
        let mu0 = fixed(Arm::Control, 1.0);
        let mu1 = fixed(Arm::Treated, 4.0);
        let b = ra_pseudo_outcomes(&td, &mu0, Some(&mu1), PseudoMode::AllUnits).unwrap();
        assert_eq!(b.values, vec![2.0, 3.0]);
        assert_eq!(b.sample_ids, vec![SampleId(0), SampleId(1)]);
        let t = ra_pseudo_outcomes(&td, &mu0, None, PseudoMode::TreatedOnly).unwrap();
        assert_eq!(t.values, vec![2.0]);
        assert!(matches!(
            ra_pseudo_outcomes(&td, &mu0, None, PseudoMode::AllUnits),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gamma_formula_and_state_check() {
        let td = task(vec![s(0, 0.5, 2.0, Some(0))], vec![s(1, 0.5, 0.5, None)]);
        let m0 = fixed(Arm::Control, 0.5);
        let m1 = fixed(Arm::Treated, 2.0);
        assert_eq!(gamma_scores(&td, &m0, &m1).unwrap(), vec![1.5, 1.5]);
        let rows = vec![s(5, 0.0, 1.0, None), s(6, 1.0, 1.0, None)];
        let plain = fit_nuisance(&rows, Arm::Control, &NuisanceSpec::Knn { k: 1 }, 0, 0).unwrap();
        assert!(matches!(gamma_scores(&td, &plain, &m1), Err(Error::State(_))));
    }

    #[test]
    fn empty_arm_fails_to_fit() {
        let rows = vec![s(0, 0.0, 1.0, Some(0)), s(1, 0.0, 1.0, Some(0))];
        assert!(matches!(
            fit_nuisance(&rows, Arm::Control, &NuisanceSpec::Knn { k: 1 }, 0, 0),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn cross_fitting_never_predicts_with_own_model() {
        let rows: Vec<_> = (0..40).map(|i| s(i, i as f64, (i * i) as f64, None)).collect();
        let m = fit_nuisance(&rows, Arm::Control, &NuisanceSpec::Knn { k: 1 }, 5, 3).unwrap();
        let mut per_fold = [0usize; 5];
        for r in &rows {
            assert!(!m.prediction_uses_sample(r.id));
            per_fold[m.fold_of(r.id).unwrap()] += 1;
            // 1-NN on its own point would return its own label exactly
            assert_ne!(m.predict_sample(r).unwrap(), r.y);
        }
        assert_eq!(per_fold, [8; 5]);
        let single = fit_nuisance(&rows, Arm::Control, &NuisanceSpec::Knn { k: 1 }, 0, 3).unwrap();
        assert!(single.prediction_uses_sample(rows[0].id));
        assert_eq!(single.predict_sample(&rows[3]).unwrap(), rows[3].y);
    }

    fn zero_noise_meta() -> (MetaDataset<f64>, Arc<GroundTruth<f64>>) {
        let cfg = DgpConfig {
            d: 3,
            e: 2,
            n_interventions: 3,
            m_per_task: 50,
            n_controls: 40,
            noise_sd: 0.0,
            effect_kind: EffectKind::Linear,
            confounding_strength: 1.0,
            seed: 4,
            n_pair_tasks: 0,
        };
        let pop = generate_population::<f64>(&cfg).unwrap();
        let ws = pop.intervention_map();
        let gt = Arc::new(pop.ground_truth.clone());
        (build_meta_dataset(pop.samples, &ws).unwrap(), gt)
    }

    #[test]
    fn oracle_control_model_reproduces_noiseless_controls() {
        let (md, gt) = zero_noise_meta();
        let spec = NuisanceSpec::Oracle(OracleTruth { ground_truth: gt, w: None });
        let m = fit_nuisance(&md.tasks[0].control, Arm::Control, &spec, 0, 0).unwrap();
        for c in &md.tasks[0].control {
            assert_eq!(m.predict(&c.x).unwrap(), c.y);
        }
    }

    #[test]
    fn oracle_pseudo_outcomes_equal_true_effect_without_noise() {
        let (mut md, gt) = zero_noise_meta();
        let settings = NuisanceSettings { kind: NuisanceKind::Oracle, ..Default::default() };
        compute_pseudo_outcomes(&mut md, &settings, PseudoMode::TreatedOnly, 0, 1, Some(&gt)).unwrap();
        for td in &md.tasks {
            let b = td.pseudo.as_ref().unwrap();
            b.validate_against(td).unwrap();
            for (s, v) in td.treated.iter().zip(&b.values) {
                let tau = s.tau_true.unwrap();
                assert!((v - tau).abs() <= 1e-12 * (1.0 + s.y.abs()), "{v} vs {tau}");
            }
        }
    }

    #[test]
    fn oracle_gamma_equals_true_effect_on_treated() {
        let (md, gt) = zero_noise_meta();
        let truth = gt.clone();
        let td = &md.tasks[1];
        let m0 = fit_nuisance(
            &td.control,
            Arm::Control,
            &NuisanceSpec::Oracle(OracleTruth { ground_truth: gt.clone(), w: None }),
            5,
            0,
        )
        .unwrap();
        let m1 = fit_nuisance(
            &td.treated,
            Arm::Treated,
            &NuisanceSpec::Oracle(OracleTruth { ground_truth: gt, w: Some(td.w.clone()) }),
            5,
            0,
        )
        .unwrap();
        let g = gamma_scores(td, &m0, &m1).unwrap();
        for (s, v) in td.treated.iter().zip(&g) {
            assert!((v - s.tau_true.unwrap()).abs() < 1e-12);
        }
        // zero noise: controls' scores are the effect they would have had
        for (s, v) in td.control.iter().zip(&g[td.treated.len()..]) {
            assert!((v - true_cate(&truth, &td.w, &s.x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn all_units_mode_covers_controls() {
        let (mut md, _) = zero_noise_meta();
        let settings = NuisanceSettings { knn_k: 5, ..Default::default() };
        compute_pseudo_outcomes(&mut md, &settings, PseudoMode::AllUnits, 0, 1, None).unwrap();
        for td in &md.tasks {
            let b = td.pseudo.as_ref().unwrap();
            assert_eq!(b.values.len(), td.treated.len() + td.control.len());
            assert_eq!(b.mode, PseudoMode::AllUnits);
        }
    }
}
