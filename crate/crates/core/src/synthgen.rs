//! Synthetic multi-intervention populations with a known effect function.
//!
//! Individuals have features `x ~ N(0, I_d)`. Intervention vectors are uniform
//! on the unit sphere in `R^e`. The outcome is `y = b(x) + tau(w, x) + eps` for
//! recipients of `w` and `y = b(x) + eps` for controls, where
//! `b(x) = c^T x` and `tau(w, x) = w^T M x` (or its `tanh`).
//!
//! Recipients of task `j` are obtained by drawing candidates from `P_X` and
//! assigning each with probability `clip(sigmoid(s * theta_j^T x), 0.1, 0.9)`
//! until `m_per_task` are treated, so treated covariates are tilted by the
//! propensity while controls follow `P_X`.
//!
//! Random streams: stream 0 draws the structure (M, c, theta, w), stream 1 the
//! individuals and their assignment, stream 2 the outcome noise.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{dot, norm2, Scalar};
use crate::tasks::{pool_interventions, Sample, SampleId};

pub const PROPENSITY_MIN: f64 = 0.1;
pub const PROPENSITY_MAX: f64 = 0.9;

const STREAM_STRUCTURE: u64 = 0;
const STREAM_INDIVIDUALS: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Linear,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Individual feature dimension.
    pub d: usize,
    /// Intervention feature dimension.
    pub e: usize,
    pub n_interventions: usize,
    pub m_per_task: usize,
    pub n_controls: usize,
    pub noise_sd: f64,
    pub effect_kind: EffectKind,
    pub confounding_strength: f64,
    #[serde(default)]
    pub seed: u64,
    /// Extra tasks whose intervention is the pooled sum of two distinct single
    /// interventions; recipients of a pair receive `tau(w_a + w_b, x)`.
    #[serde(default)]
    pub n_pair_tasks: usize,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d < 1 {
            return fail(format!("d must be >= 1, got {}", self.d));
        }
        if self.e < 1 {
            return fail(format!("e must be >= 1, got {}", self.e));
        }
        if self.n_interventions < 2 {
            return fail(format!("n_interventions must be >= 2, got {}", self.n_interventions));
        }
        if self.m_per_task < 2 {
            return fail(format!("m_per_task must be >= 2, got {}", self.m_per_task));
        }
        if self.n_controls < 1 {
            return fail(format!("n_controls must be >= 1, got {}", self.n_controls));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return fail(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        if !(self.confounding_strength >= 0.0 && self.confounding_strength.is_finite()) {
            return fail(format!(
                "confounding_strength must be finite and >= 0, got {}",
                self.confounding_strength
            ));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.n_interventions + self.n_pair_tasks
    }
}

/// The data-generating process' hidden parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruth<T> {
    pub effect_kind: EffectKind,
    /// `e x d` effect matrix, row-major by intervention coordinate.
    pub effect_matrix: Vec<Vec<T>>,
    pub baseline_coeffs: Vec<T>,
    /// One propensity direction per task.
    pub propensity_coeffs: Vec<Vec<T>>,
    pub confounding_strength: f64,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn intervention_dim(&self) -> usize {
        self.effect_matrix.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.baseline_coeffs.len()
    }

    fn check_dims(&self, w: &[T], x: &[T]) -> Result<()> {
        if w.len() != self.intervention_dim() || x.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "expected (w, x) of dims ({}, {}), got ({}, {})",
                self.intervention_dim(),
                self.feature_dim(),
                w.len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// `M x`.
    fn effect_direction(&self, x: &[T]) -> Vec<T> {
        self.effect_matrix.iter().map(|row| dot(row, x)).collect()
    }

    pub fn baseline(&self, x: &[T]) -> Result<T> {
        if x.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "expected x of dim {}, got {}",
                self.feature_dim(),
                x.len()
            )));
        }
        Ok(dot(&self.baseline_coeffs, x))
    }

    /// Propensity of task `task` at `x`, clipped to the overlap band.
    pub fn propensity(&self, task: usize, x: &[T]) -> f64 {
        let z = self.confounding_strength * dot(&self.propensity_coeffs[task], x).as_f64();
        (1.0 / (1.0 + (-z).exp())).clamp(PROPENSITY_MIN, PROPENSITY_MAX)
    }

    /// `dtau/dw` at `(w, x)`.
    pub fn effect_gradient_w(&self, w: &[T], x: &[T]) -> Result<Vec<T>> {
        self.check_dims(w, x)?;
        let mx = self.effect_direction(x);
        Ok(match self.effect_kind {
            EffectKind::Linear => mx,
            EffectKind::Tanh => {
                let t = dot(w, &mx).tanh();
                let s = T::one() - t * t;
                mx.into_iter().map(|v| v * s).collect()
            }
        })
    }
}

/// True conditional effect of intervention `w` on an individual with features `x`.
pub fn true_cate<T: Scalar>(gt: &GroundTruth<T>, w: &[T], x: &[T]) -> Result<T> {
    gt.check_dims(w, x)?;
    let linear = dot(w, &gt.effect_direction(x));
    Ok(match gt.effect_kind {
        EffectKind::Linear => linear,
        EffectKind::Tanh => linear.tanh(),
    })
}

/// One intervention task of the generated population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Intervention<T> {
    pub task_id: usize,
    pub w: Vec<T>,
    /// Single interventions pooled into this one; `[task_id]` for singles.
    pub components: Vec<usize>,
}

/// How many candidates were screened to fill a task's treated group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentStats {
    pub task_id: usize,
    pub candidates: usize,
    pub treated: usize,
}

#[derive(Clone, Debug)]
pub struct Population<T> {
    /// Treated samples by task, then controls; ids are positions in this list.
    pub samples: Vec<Sample<T>>,
    pub interventions: Vec<Intervention<T>>,
    pub ground_truth: GroundTruth<T>,
    pub assignment: Vec<AssignmentStats>,
}

impl<T: Scalar> Population<T> {
    pub fn intervention_map(&self) -> BTreeMap<usize, Vec<T>> {
        self.interventions
            .iter()
            .map(|i| (i.task_id, i.w.clone()))
            .collect()
    }

    pub fn pair_task_ids(&self) -> Vec<usize> {
        self.interventions
            .iter()
            .filter(|i| i.components.len() > 1)
            .map(|i| i.task_id)
            .collect()
    }

    /// Mean of `||dtau/dw||_2` over the treated samples.
    pub fn mean_effect_gradient_norm(&self) -> Result<T> {
        let ws = self.intervention_map();
        let mut total = T::zero();
        let mut n = 0usize;
        for s in self.samples.iter().filter(|s| s.treated) {
            let w = &ws[&s.task_id.expect("treated sample has a task")];
            total += norm2(&self.ground_truth.effect_gradient_w(w, &s.x)?);
            n += 1;
        }
        Ok(total / T::lit(n.max(1) as f64))
    }
}

pub fn generate_population<T: Scalar>(cfg: &DgpConfig) -> Result<Population<T>> {
    generate_with_noise_stream(cfg, STREAM_NOISE)
}

/// Same as [`generate_population`] but draws the outcome noise from another
/// stream. Features, interventions and treatment assignment are unaffected.
pub fn generate_with_noise_stream<T: Scalar>(
    cfg: &DgpConfig,
    noise_stream: u64,
) -> Result<Population<T>> {
    cfg.validate()?;
    if noise_stream == STREAM_STRUCTURE || noise_stream == STREAM_INDIVIDUALS {
        return Err(Error::Argument(format!(
            "noise stream {noise_stream} collides with a structural stream"
        )));
    }
    if cfg.n_pair_tasks > 0 && cfg.n_interventions < 2 {
        return Err(Error::Config("pair tasks need at least two interventions".into()));
    }
    let (d, e) = (cfg.d, cfg.e);
    let n_tasks = cfg.n_tasks();
    let scale = 1.0 / (d as f64).sqrt();

    let mut srng = rng::stream(cfg.seed, STREAM_STRUCTURE);
    let effect_matrix: Vec<Vec<T>> = (0..e).map(|_| rng::normal_vec(&mut srng, d, scale)).collect();
    let baseline_coeffs: Vec<T> = rng::normal_vec(&mut srng, d, scale);
    let propensity_coeffs: Vec<Vec<T>> =
        (0..n_tasks).map(|_| rng::normal_vec(&mut srng, d, scale)).collect();
    let mut interventions: Vec<Intervention<T>> = (0..cfg.n_interventions)
        .map(|j| Intervention {
            task_id: j,
            w: rng::unit_sphere(&mut srng, e),
            components: vec![j],
        })
        .collect();
    let mut used_pairs = std::collections::BTreeSet::new();
    let max_pairs = cfg.n_interventions * (cfg.n_interventions - 1) / 2;
    if cfg.n_pair_tasks > max_pairs {
        return Err(Error::Config(format!(
            "n_pair_tasks={} exceeds the {max_pairs} distinct pairs",
            cfg.n_pair_tasks
        )));
    }
    for p in 0..cfg.n_pair_tasks {
        let (a, b) = loop {
            let a = srng.random_range(0..cfg.n_interventions);
            let b = srng.random_range(0..cfg.n_interventions);
            let key = (a.min(b), a.max(b));
            if a != b && used_pairs.insert(key) {
                break key;
            }
        };
        let w = pool_interventions(&[interventions[a].w.clone(), interventions[b].w.clone()])?;
        interventions.push(Intervention {
            task_id: cfg.n_interventions + p,
            w,
            components: vec![a, b],
        });
    }

    let gt = GroundTruth {
        effect_kind: cfg.effect_kind,
        effect_matrix,
        baseline_coeffs,
        propensity_coeffs,
        confounding_strength: cfg.confounding_strength,
    };

    let mut irng = rng::stream(cfg.seed, STREAM_INDIVIDUALS);
    let mut nrng = rng::stream(cfg.seed, noise_stream);
    let noise_sd = T::lit(cfg.noise_sd);
    let mut samples = Vec::with_capacity(n_tasks * cfg.m_per_task + cfg.n_controls);
    let mut assignment = Vec::with_capacity(n_tasks);
    for iv in &interventions {
        let mut candidates = 0usize;
        let mut treated = 0usize;
        while treated < cfg.m_per_task {
            let x: Vec<T> = rng::normal_vec(&mut irng, d, 1.0);
            candidates += 1;
            let p = gt.propensity(iv.task_id, &x);
            if irng.random::<f64>() >= p {
                continue;
            }
            treated += 1;
            let tau = true_cate(&gt, &iv.w, &x)?;
            let eps = noise_sd * rng::normal::<T>(&mut nrng);
            let y = (gt.baseline(&x)? + tau) + eps;
            samples.push(Sample {
                id: SampleId(samples.len() as u64),
                x,
                y,
                treated: true,
                task_id: Some(iv.task_id),
                tau_true: Some(tau),
                tau_pseudo: None,
            });
        }
        assignment.push(AssignmentStats {
            task_id: iv.task_id,
            candidates,
            treated,
        });
    }
    for _ in 0..cfg.n_controls {
        let x: Vec<T> = rng::normal_vec(&mut irng, d, 1.0);
        let eps = noise_sd * rng::normal::<T>(&mut nrng);
        let y = gt.baseline(&x)? + eps;
        samples.push(Sample {
            id: SampleId(samples.len() as u64),
            x,
            y,
            treated: false,
            task_id: None,
            tau_true: None,
            tau_pseudo: None,
        });
    }

    Ok(Population {
        samples,
        interventions,
        ground_truth: gt,
        assignment,
    })
}
