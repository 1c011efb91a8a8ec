//! Reptile-style meta-training of the fusion model on pseudo-outcomes, plus
//! S-/T-learner outcome baselines trained with the same loop.
//!
//! Each iteration samples a training task uniformly, adapts a copy of the
//! parameters for `k` SGD steps on minibatches drawn with replacement from
//! that task, and moves the meta-parameters toward the adapted copy:
//! `theta <- theta - beta (theta - theta')`. With `k = 1` this is the ERM
//! ablation.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sgd_step, Example, FusionModel, FusionSpec, MetaModel, ParamSet};
use crate::pseudo::PseudoMode;
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{MetaDataset, Sample, Split, TaskDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    TreatedOnly,
    AllUnits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Inner SGD step size.
    pub inner_lr: f64,
    /// Reptile step size toward the adapted parameters.
    pub meta_lr: f64,
    /// Inner steps per task (`k`).
    pub adapt_steps: usize,
    pub batch_size: usize,
    /// Outer iterations (`L`).
    pub iterations: usize,
    pub adapt_scope: AdaptScope,
    pub seed: u64,
    pub l1_coeff: f64,
    /// Validation loss is logged every `val_every` iterations; 0 disables it.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.02,
            meta_lr: 0.5,
            adapt_steps: 10,
            batch_size: 32,
            iterations: 6000,
            adapt_scope: AdaptScope::TreatedOnly,
            seed: 0,
            l1_coeff: 0.0,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return fail(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return fail(format!("meta_lr must be positive, got {}", self.meta_lr));
        }
        if self.adapt_steps < 1 {
            return fail("adapt_steps must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.l1_coeff >= 0.0 && self.l1_coeff.is_finite()) {
            return fail(format!("l1_coeff must be >= 0, got {}", self.l1_coeff));
        }
        Ok(())
    }
}

/// One regression row: intervention index into `ws`, individual, target.
#[derive(Clone, Debug)]
pub struct Row<T> {
    pub w: usize,
    pub sample: Arc<Sample<T>>,
    pub target: T,
}

/// Training view of one task.
#[derive(Clone, Debug)]
pub struct TaskExamples<T> {
    pub task_id: usize,
    pub ws: Vec<Vec<T>>,
    pub rows: Vec<Row<T>>,
}

impl<T: Scalar> TaskExamples<T> {
    fn example(&self, i: usize) -> Example<'_, T> {
        let r = &self.rows[i];
        Example {
            w: &self.ws[r.w],
            x: &r.sample.x,
            target: std::slice::from_ref(&r.target),
        }
    }

    /// Mean squared error of `model` over every row.
    pub fn loss<M: MetaModel<T>>(&self, model: &M) -> Result<T> {
        let mut total = T::zero();
        for i in 0..self.rows.len() {
            let ex = self.example(i);
            let pred = model.forward(ex.w, ex.x)?;
            total += (pred[0] - ex.target[0]) * (pred[0] - ex.target[0]);
        }
        Ok(total / T::lit(self.rows.len().max(1) as f64))
    }
}

/// Pseudo-outcome rows of a task within the adapt scope.
pub fn caml_examples<T: Scalar>(td: &TaskDataset<T>, scope: AdaptScope) -> Result<TaskExamples<T>> {
    let pseudo = td.pseudo.as_ref().ok_or_else(|| {
        Error::Task(format!("task {} has no pseudo-outcomes", td.task_id))
    })?;
    pseudo.validate_against(td)?;
    let mut rows: Vec<Row<T>> = td
        .treated
        .iter()
        .zip(&pseudo.values)
        .map(|(s, &v)| Row { w: 0, sample: s.clone(), target: v })
        .collect();
    if scope == AdaptScope::AllUnits {
        if pseudo.mode != PseudoMode::AllUnits {
            return Err(Error::Config(format!(
                "task {}: all-units adaptation needs all-units pseudo-outcomes",
                td.task_id
            )));
        }
        rows.extend(
            td.control
                .iter()
                .zip(&pseudo.values[td.treated.len()..])
                .map(|(s, &v)| Row { w: 0, sample: s.clone(), target: v }),
        );
    }
    Ok(TaskExamples {
        task_id: td.task_id,
        ws: vec![td.w.clone()],
        rows,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome<M> {
    pub params: M,
    /// Minibatch loss before each inner step.
    pub step_losses: Vec<f64>,
}

/// `k` SGD steps on a copy of `params`; `params` itself is untouched.
pub fn adapt_examples<T: Scalar, M: MetaModel<T>>(
    params: &M,
    task: &TaskExamples<T>,
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
) -> Result<AdaptOutcome<M>> {
    if cfg.adapt_steps < 1 || cfg.batch_size < 1 {
        return Err(Error::Config("adapt needs adapt_steps >= 1 and batch_size >= 1".into()));
    }
    let n = task.rows.len();
    if n == 0 {
        return Err(Error::Task(format!("task {} has no in-scope samples", task.task_id)));
    }
    let lr = T::lit(cfg.inner_lr);
    let l1 = T::lit(cfg.l1_coeff);
    let mut p = params.clone();
    let mut step_losses = Vec::with_capacity(cfg.adapt_steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.adapt_steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(task.example(rng.random_range(0..n)));
        }
        let (loss, mut grad) = p.loss_and_grad(&batch)?;
        let penalty = p.l1_penalty(l1, &mut grad);
        p = sgd_step(&p, &grad, lr)?;
        step_losses.push((loss + penalty).as_f64());
    }
    Ok(AdaptOutcome { params: p, step_losses })
}

/// Adapts the fusion model to one task's pseudo-outcomes.
pub fn adapt<T: Scalar, M: MetaModel<T>>(
    params: &M,
    task: &TaskDataset<T>,
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
) -> Result<M> {
    let examples = caml_examples(task, cfg.adapt_scope)?;
    Ok(adapt_examples(params, &examples, cfg, rng)?.params)
}

/// `theta - beta (theta - theta')`; `beta = 1` returns `theta'` exactly.
pub fn reptile_step<T: Scalar, P: ParamSet<T>>(params: &P, adapted: &P, beta: T) -> Result<P> {
    if !params.same_shape(adapted) {
        return Err(Error::Shape("adapted parameters differ in shape".into()));
    }
    if beta == T::one() {
        return Ok(adapted.clone());
    }
    let mut out = params.clone();
    for (t, a) in out.tensors_mut().into_iter().zip(adapted.tensors()) {
        for (v, &av) in t.iter_mut().zip(a) {
            *v -= beta * (*v - av);
        }
    }
    Ok(out)
}

/// Uniform draw of a task index.
pub fn sample_task(rng: &mut rng::Rng, n_tasks: usize) -> usize {
    rng.random_range(0..n_tasks)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// First inner-step loss of every outer iteration.
    pub losses: Vec<f64>,
    pub val_losses: Vec<(usize, f64)>,
}

/// The outer loop, generic over the model.
pub fn meta_train<T: Scalar, M: MetaModel<T>>(
    init: M,
    tasks: &[TaskExamples<T>],
    val_tasks: &[TaskExamples<T>],
    cfg: &TrainConfig,
) -> Result<(M, TrainTrace)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no training tasks".into()));
    }
    let beta = T::lit(cfg.meta_lr);
    let mut rng = rng::stream(cfg.seed, 7);
    let mut theta = init;
    let mut trace = TrainTrace::default();
    for it in 0..cfg.iterations {
        let j = sample_task(&mut rng, tasks.len());
        let out = adapt_examples(&theta, &tasks[j], cfg, &mut rng)?;
        theta = reptile_step(&theta, &out.params, beta)?;
        let loss = out.step_losses[0];
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at iteration {it}")));
        }
        trace.losses.push(loss);
        if cfg.val_every > 0 && !val_tasks.is_empty() && (it + 1) % cfg.val_every == 0 {
            let mut total = 0.0;
            for t in val_tasks {
                total += t.loss(&theta)?.as_f64();
            }
            trace.val_losses.push((it + 1, total / val_tasks.len() as f64));
        }
    }
    Ok((theta, trace))
}

/// Metadata of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub config: TrainConfig,
    pub spec: FusionSpec,
    pub losses: Vec<f64>,
    pub val_losses: Vec<(usize, f64)>,
    /// Losses of the control-arm model (T-learner only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub control_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub trained_task_ids: Vec<usize>,
    pub checkpoint: Option<String>,
}

fn split_examples<T: Scalar>(
    md: &MetaDataset<T>,
    split: Split,
    f: impl Fn(&TaskDataset<T>) -> Result<TaskExamples<T>>,
) -> Result<Vec<TaskExamples<T>>> {
    md.tasks_in(split).map(f).collect()
}

/// Trains the fusion model on the train split's pseudo-outcomes.
pub fn train_caml<T: Scalar>(
    md: &MetaDataset<T>,
    spec: FusionSpec,
    cfg: &TrainConfig,
) -> Result<(FusionModel<T>, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let train = split_examples(md, Split::Train, |t| caml_examples(t, cfg.adapt_scope))?;
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let val = if cfg.val_every > 0 {
        split_examples(md, Split::Val, |t| caml_examples(t, cfg.adapt_scope))?
    } else {
        Vec::new()
    };
    let init = FusionModel::init(spec, rng::derive_seed(cfg.seed, 1))?;
    let (model, trace) = meta_train(init, &train, &val, cfg)?;
    let record = RunRecord {
        model: if cfg.adapt_steps == 1 { "caml_erm" } else { "caml" }.into(),
        config: cfg.clone(),
        spec,
        losses: trace.losses,
        val_losses: trace.val_losses,
        control_losses: Vec::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        trained_task_ids: train.iter().map(|t| t.task_id).collect(),
        checkpoint: None,
    };
    Ok((model, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineFlavor {
    SLearner,
    TLearner,
}

/// Intervention vector standing in for "no intervention".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullIntervention {
    #[default]
    Zero,
    /// Mean of the training intervention vectors.
    TrainMean,
}

/// Outcome-model baseline: `tau(w, x) = mu(x, w) - mu(x, null)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OutcomeBaseline<T> {
    pub flavor: BaselineFlavor,
    pub null_w: Vec<T>,
    /// S-learner: the joint model. T-learner: the treated-arm model.
    pub mu: FusionModel<T>,
    /// T-learner control-arm model.
    pub mu0: Option<FusionModel<T>>,
}

pub fn null_intervention<T: Scalar>(md: &MetaDataset<T>, null: NullIntervention) -> Vec<T> {
    let e = md.intervention_dim();
    match null {
        NullIntervention::Zero => vec![T::zero(); e],
        NullIntervention::TrainMean => {
            let train: Vec<&TaskDataset<T>> = md.tasks_in(Split::Train).collect();
            let mut mean = vec![T::zero(); e];
            for t in &train {
                for (m, &v) in mean.iter_mut().zip(&t.w) {
                    *m += v;
                }
            }
            let n = T::lit(train.len().max(1) as f64);
            mean.into_iter().map(|v| v / n).collect()
        }
    }
}

/// Trains an S- or T-learner on observed outcomes with the Reptile loop.
pub fn train_meta_outcome_baseline<T: Scalar>(
    md: &MetaDataset<T>,
    spec: FusionSpec,
    cfg: &TrainConfig,
    flavor: BaselineFlavor,
    null: NullIntervention,
) -> Result<(OutcomeBaseline<T>, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let null_w = null_intervention(md, null);
    let train_tasks: Vec<&TaskDataset<T>> = md.tasks_in(Split::Train).collect();
    if train_tasks.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let observed = |s: &Arc<Sample<T>>, w: usize| Row { w, sample: s.clone(), target: s.y };
    let init_mu = FusionModel::init(spec, rng::derive_seed(cfg.seed, 1))?;
    let (baseline, trace, control_losses) = match flavor {
        BaselineFlavor::SLearner => {
            let tasks: Vec<TaskExamples<T>> = train_tasks
                .iter()
                .map(|t| TaskExamples {
                    task_id: t.task_id,
                    ws: vec![t.w.clone(), null_w.clone()],
                    rows: t
                        .treated
                        .iter()
                        .map(|s| observed(s, 0))
                        .chain(t.control.iter().map(|s| observed(s, 1)))
                        .collect(),
                })
                .collect();
            let (mu, trace) = meta_train(init_mu, &tasks, &[], cfg)?;
            let b = OutcomeBaseline { flavor, null_w, mu, mu0: None };
            (b, trace, Vec::new())
        }
        BaselineFlavor::TLearner => {
            let mut controls: BTreeMap<_, Arc<Sample<T>>> = BTreeMap::new();
            for t in &train_tasks {
                for s in &t.control {
                    controls.entry(s.id).or_insert_with(|| s.clone());
                }
            }
            if controls.is_empty() {
                return Err(Error::Config("T-learner needs control samples".into()));
            }
            let treated: Vec<TaskExamples<T>> = train_tasks
                .iter()
                .map(|t| TaskExamples {
                    task_id: t.task_id,
                    ws: vec![t.w.clone()],
                    rows: t.treated.iter().map(|s| observed(s, 0)).collect(),
                })
                .collect();
            let control = [TaskExamples {
                task_id: usize::MAX,
                ws: vec![null_w.clone()],
                rows: controls.values().map(|s| observed(s, 0)).collect(),
            }];
            let (mu, trace) = meta_train(init_mu, &treated, &[], cfg)?;
            let init_mu0 = FusionModel::init(spec, rng::derive_seed(cfg.seed, 2))?;
            let cfg0 = TrainConfig { seed: rng::derive_seed(cfg.seed, 3), ..cfg.clone() };
            let (mu0, trace0) = meta_train(init_mu0, &control, &[], &cfg0)?;
            let b = OutcomeBaseline { flavor, null_w, mu, mu0: Some(mu0) };
            (b, trace, trace0.losses)
        }
    };
    let record = RunRecord {
        model: match flavor {
            BaselineFlavor::SLearner => "s_meta",
            BaselineFlavor::TLearner => "t_meta",
        }
        .into(),
        config: cfg.clone(),
        spec,
        losses: trace.losses,
        val_losses: trace.val_losses,
        control_losses,
        wall_time_secs: start.elapsed().as_secs_f64(),
        trained_task_ids: train_tasks.iter().map(|t| t.task_id).collect(),
        checkpoint: None,
    };
    Ok((baseline, record))
}

/// Anything that maps `(w, x)` to an effect estimate.
pub trait CateModel<T: Scalar>: Send + Sync {
    fn intervention_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict_cate(&self, w: &[T], x: &[T]) -> Result<Vec<T>>;
}

impl<T: Scalar> CateModel<T> for FusionModel<T> {
    fn intervention_dim(&self) -> usize {
        MetaModel::intervention_dim(self)
    }
    fn feature_dim(&self) -> usize {
        MetaModel::feature_dim(self)
    }
    fn output_dim(&self) -> usize {
        MetaModel::output_dim(self)
    }
    fn predict_cate(&self, w: &[T], x: &[T]) -> Result<Vec<T>> {
        self.forward(w, x)
    }
}

impl<T: Scalar> CateModel<T> for OutcomeBaseline<T> {
    fn intervention_dim(&self) -> usize {
        MetaModel::intervention_dim(&self.mu)
    }
    fn feature_dim(&self) -> usize {
        MetaModel::feature_dim(&self.mu)
    }
    fn output_dim(&self) -> usize {
        MetaModel::output_dim(&self.mu)
    }
    fn predict_cate(&self, w: &[T], x: &[T]) -> Result<Vec<T>> {
        let treated = self.mu.forward(w, x)?;
        let untreated = self.mu0.as_ref().unwrap_or(&self.mu).forward(&self.null_w, x)?;
        Ok(treated.iter().zip(&untreated).map(|(&a, &b)| a - b).collect())
    }
}
