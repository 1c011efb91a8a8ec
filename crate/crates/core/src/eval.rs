//! PEHE, RATE@u and precision/recall@u, and the zero-shot evaluation driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::{fit_nuisance, gamma_scores, Arm, NuisanceSettings, NuisanceSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthgen::{true_cate, GroundTruth};
use crate::tasks::{MetaDataset, Split, TaskDataset};
use crate::trainer::CateModel;

/// Mean squared difference.
pub fn pehe<T: Scalar>(tau: &[T], tau_hat: &[T]) -> Result<T> {
    if tau.len() != tau_hat.len() {
        return Err(Error::Shape(format!(
            "PEHE inputs have lengths {} and {}",
            tau.len(),
            tau_hat.len()
        )));
    }
    if tau.is_empty() {
        return Err(Error::Argument("PEHE needs at least one unit".into()));
    }
    let sum: T = tau.iter().zip(tau_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sum / T::lit(tau.len() as f64))
}

/// PEHE for vector effects, averaged over units and outcome dimensions.
pub fn pehe_multi<T: Scalar>(tau: &[Vec<T>], tau_hat: &[Vec<T>]) -> Result<T> {
    if tau.len() != tau_hat.len() {
        return Err(Error::Shape(format!(
            "PEHE inputs have lengths {} and {}",
            tau.len(),
            tau_hat.len()
        )));
    }
    let mut flat_a = Vec::new();
    let mut flat_b = Vec::new();
    for (a, b) in tau.iter().zip(tau_hat) {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "effect vectors have dimensions {} and {}",
                a.len(),
                b.len()
            )));
        }
        flat_a.extend_from_slice(a);
        flat_b.extend_from_slice(b);
    }
    pehe(&flat_a, &flat_b)
}

/// Size of the top group, `ceil((1 - u) n)`. The small offset keeps
/// products such as `0.01 * 500` from rounding up past an integer.
pub fn top_count(n: usize, u: f64) -> usize {
    let raw = ((1.0 - u) * n as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n)
}

/// Indices ordered by descending score; equal scores keep index order.
pub fn rank_desc<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn check_u(u: f64) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("u must lie in (0, 1), got {u}")));
    }
    Ok(())
}

/// Mean score of the top `ceil((1-u)N)` units by `scores` minus the overall mean.
pub fn rate_at_u<T: Scalar>(scores: &[T], gammas: &[T], u: f64) -> Result<T> {
    check_u(u)?;
    if scores.len() != gammas.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} gamma values",
            scores.len(),
            gammas.len()
        )));
    }
    let k = top_count(scores.len(), u);
    if k == 0 {
        return Err(Error::Metric(format!(
            "top group is empty for u={u} and {} units",
            scores.len()
        )));
    }
    let order = rank_desc(scores);
    let top: T = order[..k].iter().map(|&i| gammas[i]).sum::<T>() / T::lit(k as f64);
    let all: T = gammas.iter().copied().sum::<T>() / T::lit(gammas.len() as f64);
    Ok(top - all)
}

/// Precision and recall of the top `ceil((1-u)N)` units against `labels`.
pub fn precision_recall_at_u<T: Scalar>(scores: &[T], labels: &[bool], u: f64) -> Result<(f64, f64)> {
    check_u(u)?;
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Metric("recall is undefined without positive labels".into()));
    }
    let k = top_count(scores.len(), u);
    if k == 0 {
        return Err(Error::Metric(format!("top group is empty for u={u}")));
    }
    let hits = rank_desc(scores)[..k].iter().filter(|&&i| labels[i]).count();
    Ok((hits as f64 / k as f64, hits as f64 / positives as f64))
}

/// Marks the `ceil(frac N)` largest true effects as positive.
pub fn positive_labels<T: Scalar>(tau_true: &[T], frac: f64) -> Vec<bool> {
    let k = top_count(tau_true.len(), 1.0 - frac).max(1).min(tau_true.len());
    let mut labels = vec![false; tau_true.len()];
    for &i in &rank_desc(tau_true)[..k] {
        labels[i] = true;
    }
    labels
}

/// Predicts zero effect everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPredictor {
    pub intervention_dim: usize,
    pub feature_dim: usize,
    pub output_dim: usize,
}

impl<T: Scalar> CateModel<T> for ZeroPredictor {
    fn intervention_dim(&self) -> usize {
        self.intervention_dim
    }
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn predict_cate(&self, _w: &[T], _x: &[T]) -> Result<Vec<T>> {
        Ok(vec![T::zero(); self.output_dim])
    }
}

/// Returns the generating effect function.
#[derive(Clone, Debug)]
pub struct OraclePredictor<T> {
    pub ground_truth: Arc<GroundTruth<T>>,
}

impl<T: Scalar> CateModel<T> for OraclePredictor<T> {
    fn intervention_dim(&self) -> usize {
        self.ground_truth.intervention_dim()
    }
    fn feature_dim(&self) -> usize {
        self.ground_truth.feature_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn predict_cate(&self, w: &[T], x: &[T]) -> Result<Vec<T>> {
        Ok(vec![true_cate(&self.ground_truth, w, x)?])
    }
}

/// Where the RATE scores come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GammaSource {
    /// `tau_true` plus Gaussian noise (synthetic data only).
    Oracle { noise_sd: f64, seed: u64 },
    /// Cross-fitted direct scores from the pseudo module.
    Estimated {
        settings: NuisanceSettings,
        folds: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub us: Vec<f64>,
    pub gamma: GammaSource,
    /// Fraction of units per task labelled positive for precision/recall.
    pub positive_frac: f64,
    pub model_id: String,
    pub seed: u64,
    /// Tasks the model saw in training; none may fall in the evaluated split.
    pub trained_task_ids: Option<Vec<usize>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            us: vec![0.999, 0.998, 0.995, 0.99],
            gamma: GammaSource::Oracle { noise_sd: 0.0, seed: 0 },
            positive_frac: 0.1,
            model_id: "model".into(),
            seed: 0,
            trained_task_ids: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n_units: usize,
    pub pehe: f64,
    pub rate_at: BTreeMap<String, f64>,
    pub precision_at: BTreeMap<String, f64>,
    pub recall_at: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// One scored unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: usize,
    pub sample_id: u64,
    pub tau_true: f64,
    pub tau_hat: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: Split,
    pub seed: u64,
    pub us: Vec<f64>,
    pub tasks: BTreeMap<usize, TaskMetrics>,
    /// Unweighted means and sample standard deviations across tasks.
    pub aggregate: BTreeMap<String, Summary>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

pub fn u_key(u: f64) -> String {
    format!("{u}")
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).map(|s| s.mean)
    }

    /// Flat `task_id,metric,u,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task_id", "metric", "u", "value"])?;
        for (id, m) in &self.tasks {
            let id = id.to_string();
            w.write_record([id.as_str(), "pehe", "", &m.pehe.to_string()])?;
            for (name, map) in [
                ("rate", &m.rate_at),
                ("precision", &m.precision_at),
                ("recall", &m.recall_at),
            ] {
                for (u, v) in map {
                    w.write_record([id.as_str(), name, u.as_str(), &v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_predictions_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.predictions {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn task_gammas<T: Scalar>(
    td: &TaskDataset<T>,
    tau_true: &[T],
    source: &GammaSource,
) -> Result<Vec<T>> {
    match source {
        GammaSource::Oracle { noise_sd, seed } => {
            let mut r = rng::stream(rng::derive_seed(*seed, td.task_id as u64), 11);
            Ok(tau_true
                .iter()
                .map(|&t| t + rng::normal::<T>(&mut r) * T::lit(*noise_sd))
                .collect())
        }
        GammaSource::Estimated { settings, folds, seed } => {
            let folds = (*folds).max(2);
            let base = rng::derive_seed(*seed, td.task_id as u64);
            let spec = NuisanceSpec::from_settings(settings, None, None)?;
            let m0 = fit_nuisance(&td.control, Arm::Control, &spec, folds, base)?;
            let m1 = fit_nuisance(&td.treated, Arm::Treated, &spec, folds, base ^ 1)?;
            let mut g = gamma_scores(td, &m0, &m1)?;
            g.truncate(td.treated.len());
            Ok(g)
        }
    }
}

fn evaluate_task<T: Scalar, C: CateModel<T> + ?Sized>(
    model: &C,
    td: &TaskDataset<T>,
    opts: &EvalOptions,
) -> Result<(TaskMetrics, Vec<Prediction>)> {
    if td.treated.is_empty() {
        return Err(Error::Task(format!("task {} has no treated units", td.task_id)));
    }
    let mut tau = Vec::with_capacity(td.treated.len());
    let mut tau_hat = Vec::with_capacity(td.treated.len());
    for s in &td.treated {
        tau.push(s.tau_true.ok_or_else(|| {
            Error::MissingInput(format!("sample {} has no ground-truth effect", s.id.0))
        })?);
        tau_hat.push(model.predict_cate(&td.w, &s.x)?[0]);
    }
    let gammas = task_gammas(td, &tau, &opts.gamma)?;
    let labels = positive_labels(&tau, opts.positive_frac);
    let mut m = TaskMetrics {
        n_units: tau.len(),
        pehe: pehe(&tau, &tau_hat)?.as_f64(),
        ..Default::default()
    };
    for &u in &opts.us {
        let key = u_key(u);
        m.rate_at.insert(key.clone(), rate_at_u(&tau_hat, &gammas, u)?.as_f64());
        let (p, r) = precision_recall_at_u(&tau_hat, &labels, u)?;
        m.precision_at.insert(key.clone(), p);
        m.recall_at.insert(key, r);
    }
    let preds = td
        .treated
        .iter()
        .enumerate()
        .map(|(i, s)| Prediction {
            task_id: td.task_id,
            sample_id: s.id.0,
            tau_true: tau[i].as_f64(),
            tau_hat: tau_hat[i].as_f64(),
            gamma: gammas[i].as_f64(),
        })
        .collect();
    Ok((m, preds))
}

/// Scores every treated unit of every task in `split` and aggregates
/// per-task metrics.
pub fn evaluate_zero_shot<T: Scalar, C: CateModel<T> + ?Sized>(
    model: &C,
    md: &MetaDataset<T>,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    for &u in &opts.us {
        check_u(u)?;
    }
    if !(opts.positive_frac > 0.0 && opts.positive_frac <= 1.0) {
        return Err(Error::Config(format!(
            "positive_frac must lie in (0, 1], got {}",
            opts.positive_frac
        )));
    }
    if model.intervention_dim() != md.intervention_dim() || model.feature_dim() != md.feature_dim() {
        return Err(Error::Shape(format!(
            "model expects (e={}, d={}) but tasks have (e={}, d={})",
            model.intervention_dim(),
            model.feature_dim(),
            md.intervention_dim(),
            md.feature_dim()
        )));
    }
    md.check_leakage()?;
    if let (Some(trained), true) = (&opts.trained_task_ids, split != Split::Train) {
        if let Some(id) = trained.iter().find(|&&id| md.split_of(id) == Some(split)) {
            return Err(Error::Protocol(format!(
                "task {id} of the {split} split was used in training"
            )));
        }
    }
    let tasks: Vec<&TaskDataset<T>> = md.tasks_in(split).collect();
    if tasks.is_empty() {
        return Err(Error::Config(format!("{split} split has no tasks")));
    }
    let results: Vec<(TaskMetrics, Vec<Prediction>)> = tasks
        .par_iter()
        .map(|td| evaluate_task(model, td, opts))
        .collect::<Result<_>>()?;

    let mut report = EvalReport {
        model: opts.model_id.clone(),
        split,
        seed: opts.seed,
        us: opts.us.clone(),
        tasks: BTreeMap::new(),
        aggregate: BTreeMap::new(),
        predictions: Vec::new(),
    };
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (td, (m, preds)) in tasks.iter().zip(results) {
        columns.entry("pehe".into()).or_default().push(m.pehe);
        for (name, map) in [
            ("rate", &m.rate_at),
            ("precision", &m.precision_at),
            ("recall", &m.recall_at),
        ] {
            for (u, v) in map {
                columns.entry(format!("{name}@{u}")).or_default().push(*v);
            }
        }
        report.tasks.insert(td.task_id, m);
        report.predictions.extend(preds);
    }
    report.aggregate = columns.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect();
    Ok(report)
}
