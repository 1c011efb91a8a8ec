//! Meta-dataset construction.
//!
//! Every intervention defines one natural experiment: the individuals who
//! received it (treated) and the individuals who received no intervention
//! at all (control). The control pool is shared, each task keeps its own
//! filtered view of it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::PseudoOutcomeBatch;
use crate::rng;
use crate::scalar::Scalar;

/// Opaque identifier of one individual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One individual: features, observed outcome and treatment status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sample<T> {
    pub id: SampleId,
    pub x: Vec<T>,
    pub y: T,
    pub treated: bool,
    /// Intervention received; absent for controls.
    pub task_id: Option<usize>,
    /// Ground-truth effect, synthetic data only.
    pub tau_true: Option<T>,
    /// Pseudo-outcome, filled after preprocessing.
    pub tau_pseudo: Option<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.treated && self.task_id.is_some() {
            return Err(Error::Task(format!(
                "control sample {} carries task id {:?}",
                self.id, self.task_id
            )));
        }
        if !self.y.is_finite() {
            return Err(Error::Task(format!("sample {} has non-finite outcome", self.id)));
        }
        Ok(())
    }
}

/// Train/validation/test membership of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Natural experiment for a single intervention.
#[derive(Clone, Debug)]
pub struct TaskDataset<T> {
    pub task_id: usize,
    pub w: Vec<T>,
    pub treated: Vec<Arc<Sample<T>>>,
    pub control: Vec<Arc<Sample<T>>>,
    pub pseudo: Option<PseudoOutcomeBatch<T>>,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn validate(&self) -> Result<()> {
        if self.treated.is_empty() {
            return Err(Error::Task(format!("task {} has no treated samples", self.task_id)));
        }
        if self.control.is_empty() {
            return Err(Error::Task(format!("task {} has no control samples", self.task_id)));
        }
        if let Some(s) = self.treated.iter().find(|s| s.task_id != Some(self.task_id)) {
            return Err(Error::Task(format!(
                "sample {} in task {} is labelled with task {:?}",
                s.id, self.task_id, s.task_id
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.treated.first().map_or(0, |s| s.x.len())
    }

    fn sample_ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.treated.iter().chain(&self.control).map(|s| s.id)
    }
}

/// Per-split counts of samples dropped by leakage filtering.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub removed_treated: BTreeMap<Split, usize>,
    pub removed_control: BTreeMap<Split, usize>,
}

impl RemovalReport {
    pub fn total_treated(&self) -> usize {
        self.removed_treated.values().sum()
    }
    pub fn total_control(&self) -> usize {
        self.removed_control.values().sum()
    }
}

#[derive(Clone, Debug)]
pub struct MetaDataset<T> {
    /// Tasks ordered by task id.
    pub tasks: Vec<TaskDataset<T>>,
    pub split: BTreeMap<usize, Split>,
    pub removed: RemovalReport,
}

impl<T: Scalar> MetaDataset<T> {
    pub fn task(&self, task_id: usize) -> Option<&TaskDataset<T>> {
        self.tasks
            .binary_search_by_key(&task_id, |t| t.task_id)
            .ok()
            .map(|i| &self.tasks[i])
    }

    pub fn split_of(&self, task_id: usize) -> Option<Split> {
        self.split.get(&task_id).copied()
    }

    pub fn tasks_in(&self, split: Split) -> impl Iterator<Item = &TaskDataset<T>> {
        self.tasks
            .iter()
            .filter(move |t| self.split.get(&t.task_id) == Some(&split))
    }

    pub fn task_ids_in(&self, split: Split) -> Vec<usize> {
        self.tasks_in(split).map(|t| t.task_id).collect()
    }

    pub fn intervention_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.w.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.feature_dim())
    }

    /// Verifies that test-task treated individuals never appear in a train or
    /// validation task, and val-task treated individuals never appear in a
    /// train task.
    pub fn check_leakage(&self) -> Result<()> {
        let treated_in = |split: Split| -> HashSet<SampleId> {
            self.tasks_in(split)
                .flat_map(|t| t.treated.iter().map(|s| s.id))
                .collect()
        };
        let test_treated = treated_in(Split::Test);
        let val_treated = treated_in(Split::Val);
        for task in &self.tasks {
            let split = self.split_of(task.task_id).unwrap_or(Split::Train);
            let forbidden: Vec<&HashSet<SampleId>> = match split {
                Split::Train => vec![&test_treated, &val_treated],
                Split::Val => vec![&test_treated],
                Split::Test => continue,
            };
            if let Some(id) = task.sample_ids().find(|id| forbidden.iter().any(|f| f.contains(id))) {
                return Err(Error::Protocol(format!(
                    "sample {id} treated in a held-out task also appears in {split} task {}",
                    task.task_id
                )));
            }
        }
        Ok(())
    }
}

/// Groups samples into one natural experiment per intervention.
pub fn build_meta_dataset<T: Scalar>(
    samples: Vec<Sample<T>>,
    interventions: &BTreeMap<usize, Vec<T>>,
) -> Result<MetaDataset<T>> {
    let mut dim = None;
    for (id, w) in interventions {
        match dim {
            None => dim = Some(w.len()),
            Some(e) if e != w.len() => {
                return Err(Error::Shape(format!(
                    "intervention {id} has dimension {}, expected {e}",
                    w.len()
                )))
            }
            _ => {}
        }
    }

    let mut controls = Vec::new();
    let mut treated: BTreeMap<usize, Vec<Arc<Sample<T>>>> =
        interventions.keys().map(|&k| (k, Vec::new())).collect();
    let mut d = None;
    for s in samples {
        s.validate()?;
        match d {
            None => d = Some(s.x.len()),
            Some(d) if d != s.x.len() => {
                return Err(Error::Shape(format!(
                    "sample {} has {} features, expected {d}",
                    s.id,
                    s.x.len()
                )))
            }
            _ => {}
        }
        if s.treated {
            let Some(task_id) = s.task_id else {
                return Err(Error::Task(format!("treated sample {} has no task id", s.id)));
            };
            let Some(group) = treated.get_mut(&task_id) else {
                return Err(Error::Task(format!(
                    "sample {} references task {task_id} without an intervention vector",
                    s.id
                )));
            };
            group.push(Arc::new(s));
        } else {
            controls.push(Arc::new(s));
        }
    }

    let empty: Vec<usize> = treated
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(&k, _)| k)
        .collect();
    if !empty.is_empty() {
        return Err(Error::Task(format!("tasks without treated samples: {empty:?}")));
    }
    if controls.is_empty() {
        return Err(Error::Task("control pool is empty".into()));
    }

    let tasks: Vec<TaskDataset<T>> = treated
        .into_iter()
        .map(|(task_id, treated)| TaskDataset {
            task_id,
            w: interventions[&task_id].clone(),
            treated,
            control: controls.clone(),
            pseudo: None,
        })
        .collect();
    let split = tasks.iter().map(|t| (t.task_id, Split::Train)).collect();
    Ok(MetaDataset {
        tasks,
        split,
        removed: RemovalReport::default(),
    })
}

/// Order-invariant pooling of intervention vectors (elementwise sum).
pub fn pool_interventions<T: Scalar>(ws: &[Vec<T>]) -> Result<Vec<T>> {
    let first = ws
        .first()
        .ok_or_else(|| Error::Argument("cannot pool an empty list of interventions".into()))?;
    let mut out = vec![T::zero(); first.len()];
    for w in ws {
        if w.len() != out.len() {
            return Err(Error::Shape(format!(
                "pooled interventions have dimensions {} and {}",
                out.len(),
                w.len()
            )));
        }
        for (o, &v) in out.iter_mut().zip(w) {
            *o += v;
        }
    }
    Ok(out)
}

/// Number of (train, val, test) tasks for `n` tasks: floor of each held-out
/// fraction, at least one task per split.
pub fn split_counts(n: usize, frac_val: f64, frac_test: f64) -> Result<(usize, usize, usize)> {
    if !(0.0..1.0).contains(&frac_val) || !(0.0..1.0).contains(&frac_test) {
        return Err(Error::Split(format!(
            "fractions must lie in [0, 1): val={frac_val}, test={frac_test}"
        )));
    }
    if frac_val + frac_test >= 1.0 {
        return Err(Error::Split(format!(
            "val + test fractions must be below 1, got {}",
            frac_val + frac_test
        )));
    }
    // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    let count = |f: f64| ((n as f64 * f + 1e-9).floor() as usize).max(1);
    let (n_val, n_test) = (count(frac_val), count(frac_test));
    if n_val + n_test >= n {
        return Err(Error::Split(format!(
            "{n} tasks cannot fill train/val/test with {n_val} val and {n_test} test tasks"
        )));
    }
    Ok((n - n_val - n_test, n_val, n_test))
}

/// Uniformly random task -> split assignment with [`split_counts`] sizes.
pub fn random_assignment(
    task_ids: &[usize],
    frac_val: f64,
    frac_test: f64,
    seed: u64,
) -> Result<BTreeMap<usize, Split>> {
    let (_, n_val, n_test) = split_counts(task_ids.len(), frac_val, frac_test)?;
    let mut ids = task_ids.to_vec();
    ids.shuffle(&mut rng::stream(seed, 0));
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            (id, split)
        })
        .collect())
}

/// Assigns tasks to splits uniformly at random, then removes leaking samples.
pub fn split_holdout<T: Scalar>(
    md: MetaDataset<T>,
    frac_val: f64,
    frac_test: f64,
    seed: u64,
) -> Result<MetaDataset<T>> {
    let ids: Vec<usize> = md.tasks.iter().map(|t| t.task_id).collect();
    let assignment = random_assignment(&ids, frac_val, frac_test, seed)?;
    apply_split(md, assignment)
}

/// Applies an explicit task → split assignment and enforces the leakage rule:
/// samples treated in any test task leave every train/val task, samples
/// treated in any val task leave every train task.
pub fn apply_split<T: Scalar>(
    mut md: MetaDataset<T>,
    assignment: BTreeMap<usize, Split>,
) -> Result<MetaDataset<T>> {
    let task_ids: BTreeSet<usize> = md.tasks.iter().map(|t| t.task_id).collect();
    let assigned: BTreeSet<usize> = assignment.keys().copied().collect();
    if task_ids != assigned {
        return Err(Error::Split("split assignment does not cover exactly the task ids".into()));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        if !assignment.values().any(|&s| s == split) {
            return Err(Error::Split(format!("{split} split would be empty")));
        }
    }

    let treated_in = |split: Split| -> HashSet<SampleId> {
        md.tasks
            .iter()
            .filter(|t| assignment[&t.task_id] == split)
            .flat_map(|t| t.treated.iter().map(|s| s.id))
            .collect()
    };
    let test_treated = treated_in(Split::Test);
    let val_treated = treated_in(Split::Val);

    let mut removed = RemovalReport::default();
    for task in &mut md.tasks {
        let split = assignment[&task.task_id];
        let leaks = |s: &Arc<Sample<T>>| match split {
            Split::Train => test_treated.contains(&s.id) || val_treated.contains(&s.id),
            Split::Val => test_treated.contains(&s.id),
            Split::Test => false,
        };
        let (nt, nc) = (task.treated.len(), task.control.len());
        task.treated.retain(|s| !leaks(s));
        task.control.retain(|s| !leaks(s));
        let (dt, dc) = (nt - task.treated.len(), nc - task.control.len());
        if dt + dc > 0 {
            task.pseudo = None;
        }
        *removed.removed_treated.entry(split).or_default() += dt;
        *removed.removed_control.entry(split).or_default() += dc;
        if task.treated.is_empty() || task.control.is_empty() {
            return Err(Error::Split(format!(
                "leakage filtering emptied a group of {split} task {}",
                task.task_id
            )));
        }
    }
    md.split = assignment;
    md.removed = removed;
    Ok(md)
}

/// Uniform subsample without replacement of each group down to its cap.
/// Sample order is preserved. Any attached pseudo-outcomes are dropped since
/// they no longer align with the groups.
pub fn downsample<T: Scalar>(
    td: &TaskDataset<T>,
    max_treated: usize,
    max_control: usize,
    seed: u64,
) -> Result<TaskDataset<T>> {
    if max_treated == 0 || max_control == 0 {
        return Err(Error::Argument("downsampling caps must be at least 1".into()));
    }
    fn pick<S: Clone>(items: &[S], cap: usize, rng: &mut rng::Rng) -> Vec<S> {
        if items.len() <= cap {
            return items.to_vec();
        }
        let mut idx = index::sample(rng, items.len(), cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect()
    }
    let mut rng = rng::stream(seed, td.task_id as u64);
    let treated = pick(&td.treated, max_treated, &mut rng);
    let control = pick(&td.control, max_control, &mut rng);
    let unchanged = treated.len() == td.treated.len() && control.len() == td.control.len();
    Ok(TaskDataset {
        task_id: td.task_id,
        w: td.w.clone(),
        treated,
        control,
        pseudo: if unchanged { td.pseudo.clone() } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: u64, task: Option<usize>) -> Sample<f64> {
        Sample {
            id: SampleId(id),
            x: vec![id as f64],
            y: 0.0,
            treated: task.is_some(),
            task_id: task,
            tau_true: None,
            tau_pseudo: None,
        }
    }

    fn toy(n_tasks: usize, per_task: usize, n_controls: usize) -> MetaDataset<f64> {
        let mut samples = Vec::new();
        let mut id = 0;
        for t in 0..n_tasks {
            for _ in 0..per_task {
                samples.push(sample(id, Some(t)));
                id += 1;
            }
        }
        for _ in 0..n_controls {
            samples.push(sample(id, None));
            id += 1;
        }
        let ws = (0..n_tasks).map(|t| (t, vec![t as f64, 1.0])).collect();
        build_meta_dataset(samples, &ws).unwrap()
    }

    #[test]
    fn two_tasks_share_controls() {
        let md = toy(2, 3, 4);
        assert_eq!(md.tasks.len(), 2);
        for t in &md.tasks {
            assert_eq!(t.treated.len(), 3);
            assert_eq!(t.control.len(), 4);
        }
        let c0: Vec<_> = md.tasks[0].control.iter().map(|s| s.id).collect();
        let c1: Vec<_> = md.tasks[1].control.iter().map(|s| s.id).collect();
        assert_eq!(c0, c1);
    }

    #[test]
    fn empty_control_pool_is_rejected() {
        let samples = vec![sample(0, Some(0)), sample(1, Some(0))];
        let ws = BTreeMap::from([(0, vec![1.0])]);
        assert!(matches!(build_meta_dataset(samples, &ws), Err(Error::Task(_))));
    }

    #[test]
    fn task_without_treated_lists_its_id() {
        let samples = vec![sample(0, Some(0)), sample(1, None)];
        let ws = BTreeMap::from([(0, vec![1.0]), (7, vec![2.0])]);
        match build_meta_dataset(samples, &ws) {
            Err(Error::Task(msg)) => assert!(msg.contains('7')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_task_id_is_rejected() {
        let samples = vec![sample(0, Some(3)), sample(1, None)];
        let ws = BTreeMap::from([(0, vec![1.0])]);
        assert!(build_meta_dataset(samples, &ws).is_err());
    }

    #[test]
    fn pooling_sums_and_ignores_order() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 2.0];
        assert_eq!(pool_interventions(&[a.clone(), b.clone()]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            pool_interventions(&[a.clone(), b.clone()]).unwrap(),
            pool_interventions(&[b, a.clone()]).unwrap()
        );
        assert_eq!(pool_interventions(std::slice::from_ref(&a)).unwrap(), a);
        assert!(matches!(pool_interventions::<f64>(&[]), Err(Error::Argument(_))));
        assert!(matches!(
            pool_interventions(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn five_tasks_split_three_one_one() {
        assert_eq!(split_counts(5, 0.2, 0.2).unwrap(), (3, 1, 1));
        assert_eq!(split_counts(50, 0.04, 0.16).unwrap(), (40, 2, 8));
        assert_eq!(split_counts(100, 0.29, 0.1).unwrap(), (61, 29, 10));
        assert!(split_counts(2, 0.2, 0.2).is_err());
        assert!(split_counts(10, 0.5, 0.5).is_err());
        let md = split_holdout(toy(5, 2, 3), 0.2, 0.2, 7).unwrap();
        assert_eq!(md.task_ids_in(Split::Train).len(), 3);
        assert_eq!(md.task_ids_in(Split::Val).len(), 1);
        assert_eq!(md.task_ids_in(Split::Test).len(), 1);
    }

    #[test]
    fn sample_treated_in_test_leaves_train_controls() {
        // sample 100 is a control in task 0's pool and treated under test task 1
        let mut md = toy(3, 2, 3);
        let leaker = Arc::new(sample(100, None));
        md.tasks[0].control.push(leaker);
        let treated_twin = Arc::new(sample(100, Some(1)));
        md.tasks[1].treated.push(treated_twin);
        let assignment =
            BTreeMap::from([(0, Split::Train), (1, Split::Test), (2, Split::Val)]);
        let md = apply_split(md, assignment).unwrap();
        assert!(md.tasks[0].control.iter().all(|s| s.id != SampleId(100)));
        assert_eq!(md.removed.removed_control[&Split::Train], 1);
        md.check_leakage().unwrap();
    }

    #[test]
    fn leakage_check_catches_violation() {
        let mut md = toy(3, 2, 3);
        md.split = BTreeMap::from([(0, Split::Train), (1, Split::Test), (2, Split::Val)]);
        let stolen = md.tasks[1].treated[0].clone();
        md.tasks[0].control.push(stolen);
        assert!(matches!(md.check_leakage(), Err(Error::Protocol(_))));
    }

    #[test]
    fn downsample_caps_and_is_deterministic() {
        let md = toy(1, 10, 8);
        let td = &md.tasks[0];
        let a = downsample(td, 5, 100, 3).unwrap();
        assert_eq!(a.treated.len(), 5);
        assert_eq!(a.control.len(), 8);
        let b = downsample(td, 5, 100, 3).unwrap();
        let ids = |t: &TaskDataset<f64>| t.treated.iter().map(|s| s.id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let small = toy(1, 3, 2);
        let c = downsample(&small.tasks[0], 5, 5, 1).unwrap();
        assert_eq!(ids(&c), ids(&small.tasks[0]));
        assert!(downsample(td, 0, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_associative(a in prop::collection::vec(-5.0f64..5.0, 3),
                                  b in prop::collection::vec(-5.0f64..5.0, 3),
                                  c in prop::collection::vec(-5.0f64..5.0, 3)) {
            let ab = pool_interventions(&[a.clone(), b.clone()]).unwrap();
            let nested = pool_interventions(&[ab, c.clone()]).unwrap();
            let flat = pool_interventions(&[a, b, c]).unwrap();
            prop_assert_eq!(nested, flat);
        }

        #[test]
        fn split_partitions_task_ids(n in 3usize..40, seed in any::<u64>()) {
            let md = split_holdout(toy(n, 2, 2), 0.2, 0.2, seed).unwrap();
            prop_assert_eq!(md.split.len(), n);
            let mut seen = BTreeSet::new();
            for s in [Split::Train, Split::Val, Split::Test] {
                let ids = md.task_ids_in(s);
                prop_assert!(!ids.is_empty());
                for id in ids { prop_assert!(seen.insert(id)); }
            }
            prop_assert!(md.check_leakage().is_ok());
        }
    }
}
