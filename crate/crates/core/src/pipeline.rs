//! End-to-end experiment steps shared by the command-line tool and the
//! acceptance tests. Every step reads and writes files under one output
//! directory and is a pure function of the configuration and those files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate_zero_shot, EvalOptions, EvalReport, GammaSource, OraclePredictor, ZeroPredictor,
};
use crate::io;
use crate::nn::{Checkpoint, FusionModel, FusionSpec, CHECKPOINT_VERSION};
use crate::pseudo::{compute_pseudo_outcomes, NuisanceKind, NuisanceSettings, PseudoMode};
use crate::rng::derive_seed;
use crate::synthgen::{generate_population, AssignmentStats, DgpConfig, EffectKind, GroundTruth, Intervention};
use crate::tasks::{apply_split, build_meta_dataset, random_assignment, split_counts, MetaDataset, Split};
use crate::theory::{estimate_beta_smooth, linear_rademacher_bound, excess_risk_bound, BoundInputs, BoundReport};
use crate::trainer::{
    train_caml, train_meta_outcome_baseline, BaselineFlavor, CateModel, NullIntervention,
    OutcomeBaseline, RunRecord, TrainConfig,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "ZSCATE_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Tasks are assigned to splits uniformly at random.
    #[default]
    Random,
    /// Pooled pair tasks form the test split; singles fill train and val.
    Pairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub frac_val: f64,
    pub frac_test: f64,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { frac_val: 0.1, frac_test: 0.2, mode: SplitMode::Random }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub nuisance: NuisanceSettings,
    pub mode: PseudoMode,
    /// Cross-fitting folds for the nuisance models; below 2 means no cross-fitting.
    pub folds: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            nuisance: NuisanceSettings { kind: NuisanceKind::Mlp, ..NuisanceSettings::default() },
            mode: PseudoMode::TreatedOnly,
            folds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dim: 32, n_residual_blocks: 1, embed_dim: 16 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    Oracle,
    #[default]
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub us: Vec<f64>,
    pub gamma: GammaMode,
    pub gamma_folds: usize,
    pub gamma_nuisance: NuisanceSettings,
    pub positive_frac: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            us: vec![0.999, 0.998, 0.995, 0.99],
            gamma: GammaMode::Estimated,
            gamma_folds: 5,
            gamma_nuisance: NuisanceSettings::default(),
            positive_frac: 0.1,
        }
    }
}

/// Complete description of one experiment. The top-level `seed` drives every
/// random stream; seeds inside sub-configurations are overwritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub split: SplitConfig,
    pub pseudo: PseudoConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline_null: NullIntervention,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig {
                d: 10,
                e: 8,
                n_interventions: 50,
                m_per_task: 500,
                n_controls: 2000,
                noise_sd: 0.5,
                effect_kind: EffectKind::Linear,
                confounding_strength: 1.0,
                seed: 0,
                n_pair_tasks: 0,
            },
            split: SplitConfig::default(),
            pseudo: PseudoConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            baseline_null: NullIntervention::Zero,
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::MissingInput(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Copies the top-level seed into every sub-configuration.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.dgp.seed = self.seed;
        cfg.train.seed = derive_seed(self.seed, 4);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.train.validate()?;
        self.fusion_spec().validate()?;
        for &u in &self.eval.us {
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::Config(format!("eval u must lie in (0, 1), got {u}")));
            }
        }
        if !(self.eval.positive_frac > 0.0 && self.eval.positive_frac <= 1.0) {
            return Err(Error::Config("eval positive_frac must lie in (0, 1]".into()));
        }
        match self.split.mode {
            SplitMode::Random => {
                split_counts(self.dgp.n_tasks(), self.split.frac_val, self.split.frac_test)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
            SplitMode::Pairs => {
                if self.dgp.n_pair_tasks == 0 {
                    return Err(Error::Config("pairs split mode needs n_pair_tasks >= 1".into()));
                }
                split_counts(self.dgp.n_interventions, self.split.frac_val, 0.0)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn fusion_spec(&self) -> FusionSpec {
        FusionSpec::uniform(
            self.dgp.e,
            self.dgp.d,
            self.model.hidden_dim,
            self.model.n_residual_blocks,
            self.model.embed_dim,
            1,
        )
    }

    /// Identifies the generated data: hash of the resolved DGP configuration.
    pub fn config_hash(&self) -> Result<String> {
        io::json_hash(&self.resolved().dgp)
    }

    /// `--out`, then the environment override, then the configured directory.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

/// File layout of an output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }
    pub fn tasks(&self) -> PathBuf {
        self.root.join("tasks.csv")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo.csv")
    }
    pub fn pseudo_meta(&self) -> PathBuf {
        self.root.join("pseudo_meta.json")
    }
    pub fn model(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.json"))
    }
    pub fn run_record(&self, kind: ModelKind) -> PathBuf {
        self.root.join("runs").join(format!("{kind}.json"))
    }
    pub fn report(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.{ext}"))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub dgp: DgpConfig,
    pub n_samples: usize,
    pub n_tasks: usize,
    /// SHA-256 of each data file.
    pub files: BTreeMap<String, String>,
    pub assignment: Vec<AssignmentStats>,
}

fn split_assignment(cfg: &ExperimentConfig, interventions: &[Intervention<f64>]) -> Result<BTreeMap<usize, Split>> {
    let seed = derive_seed(cfg.seed, 2);
    match cfg.split.mode {
        SplitMode::Random => {
            let ids: Vec<usize> = interventions.iter().map(|i| i.task_id).collect();
            random_assignment(&ids, cfg.split.frac_val, cfg.split.frac_test, seed)
        }
        SplitMode::Pairs => {
            let singles: Vec<usize> = interventions
                .iter()
                .filter(|i| i.components.len() == 1)
                .map(|i| i.task_id)
                .collect();
            let (_, n_val, _) = split_counts(singles.len(), cfg.split.frac_val, 0.0)?;
            let mut ids = singles;
            ids.shuffle(&mut crate::rng::stream(seed, 0));
            let mut out: BTreeMap<usize, Split> = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, if i < n_val { Split::Val } else { Split::Train }))
                .collect();
            for i in interventions.iter().filter(|i| i.components.len() > 1) {
                out.insert(i.task_id, Split::Test);
            }
            Ok(out)
        }
    }
}

/// Generates the population and writes dataset, tasks, ground truth, split
/// and manifest files.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let paths = Paths::new(out);
    fs::create_dir_all(out)?;
    let pop = generate_population::<f64>(&cfg.dgp)?;

    let mut files = BTreeMap::new();
    let mut emit = |name: &str, path: PathBuf, bytes: Vec<u8>| -> Result<()> {
        files.insert(name.to_string(), io::sha256_hex(&bytes));
        write(&path, &bytes)
    };
    let mut buf = Vec::new();
    io::write_dataset_csv(&pop.samples, &mut buf)?;
    emit("dataset.csv", paths.dataset(), buf)?;
    let mut buf = Vec::new();
    io::write_tasks_csv(&pop.interventions, &mut buf)?;
    emit("tasks.csv", paths.tasks(), buf)?;
    emit(
        "ground_truth.json",
        paths.ground_truth(),
        serde_json::to_vec_pretty(&pop.ground_truth)?,
    )?;
    let split = split_assignment(&cfg, &pop.interventions)?;
    emit("split.json", paths.split(), io::split_to_json(&split)?.into_bytes())?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.config_hash()?,
        dgp: cfg.dgp.clone(),
        n_samples: pop.samples.len(),
        n_tasks: pop.interventions.len(),
        files,
        assignment: pop.assignment,
    };
    write(&paths.manifest(), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Dataset files loaded back into a split meta-dataset.
pub struct Loaded {
    pub md: MetaDataset<f64>,
    pub manifest: Manifest,
    pub ground_truth: Arc<GroundTruth<f64>>,
    pub interventions: Vec<Intervention<f64>>,
}

/// Loads the dataset written by [`generate`], refusing data produced by a
/// different configuration.
pub fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Loaded> {
    let paths = Paths::new(out);
    let manifest: Manifest = serde_json::from_str(&read(&paths.manifest())?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset schema version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let hash = cfg.config_hash()?;
    if manifest.config_hash != hash {
        return Err(Error::Incompatible(format!(
            "dataset in {} was generated from config {} but the current config hashes to {hash}",
            out.display(),
            manifest.config_hash
        )));
    }
    let samples = io::read_dataset_csv(fs::File::open(paths.dataset()).map_err(|e| {
        Error::MissingInput(format!("cannot read {}: {e}", paths.dataset().display()))
    })?)?;
    let interventions: Vec<Intervention<f64>> = io::read_tasks_csv(read(&paths.tasks())?.as_bytes())?;
    let ground_truth: GroundTruth<f64> = serde_json::from_str(&read(&paths.ground_truth())?)?;
    let split = io::split_from_json(&read(&paths.split())?)?;
    let map = interventions.iter().map(|i| (i.task_id, i.w.clone())).collect();
    let md = apply_split(build_meta_dataset(samples, &map)?, split)?;
    Ok(Loaded { md, manifest, ground_truth: Arc::new(ground_truth), interventions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PseudoMeta {
    key: String,
}

fn pseudo_key(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<String> {
    io::json_hash(&(&manifest.config_hash, &manifest.files, &cfg.pseudo, cfg.seed))
}

/// Attaches pseudo-outcomes, computing and caching them when the cache is
/// missing or was built from other settings.
pub fn ensure_pseudo(cfg: &ExperimentConfig, out: &Path, loaded: &mut Loaded) -> Result<()> {
    let paths = Paths::new(out);
    let key = pseudo_key(cfg, &loaded.manifest)?;
    let cached = fs::read_to_string(paths.pseudo_meta())
        .ok()
        .and_then(|t| serde_json::from_str::<PseudoMeta>(&t).ok())
        .is_some_and(|m| m.key == key);
    if cached {
        if let Ok(f) = fs::File::open(paths.pseudo()) {
            if io::read_pseudo_csv(&mut loaded.md, cfg.pseudo.mode, f).is_ok() {
                return Ok(());
            }
        }
    }
    compute_pseudo_outcomes(
        &mut loaded.md,
        &cfg.pseudo.nuisance,
        cfg.pseudo.mode,
        cfg.pseudo.folds,
        derive_seed(cfg.seed, 3),
        Some(&loaded.ground_truth),
    )?;
    let mut buf = Vec::new();
    io::write_pseudo_csv(&loaded.md, &mut buf)?;
    write(&paths.pseudo(), &buf)?;
    write(&paths.pseudo_meta(), &serde_json::to_vec_pretty(&PseudoMeta { key })?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Caml,
    /// Meta-learning ablation: one inner step per task.
    CamlErm,
    SMeta,
    TMeta,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Caml, ModelKind::CamlErm, ModelKind::SMeta, ModelKind::TMeta];
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Caml => "caml",
            ModelKind::CamlErm => "caml_erm",
            ModelKind::SMeta => "s_meta",
            ModelKind::TMeta => "t_meta",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}; expected caml, caml_erm, s_meta or t_meta")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelParams {
    Fusion { checkpoint: Checkpoint<f64> },
    Outcome { baseline: OutcomeBaseline<f64> },
}

/// A trained model together with the data it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub model: ModelKind,
    pub config_hash: String,
    pub trained_task_ids: Vec<usize>,
    pub params: ModelParams,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mf: Self = serde_json::from_str(&read(path)?)
            .map_err(|e| Error::Incompatible(format!("unreadable model file {}: {e}", path.display())))?;
        if mf.schema_version != SCHEMA_VERSION {
            return Err(Error::Incompatible(format!("model schema version {}", mf.schema_version)));
        }
        if let ModelParams::Fusion { checkpoint } = &mf.params {
            checkpoint.validate()?;
        }
        Ok(mf)
    }

    pub fn predictor(&self) -> &(dyn CateModel<f64> + 'static) {
        match &self.params {
            ModelParams::Fusion { checkpoint } => &checkpoint.params,
            ModelParams::Outcome { baseline } => baseline,
        }
    }
}

/// Trains one model on the train split and writes its model file and run record.
pub fn train(cfg: &ExperimentConfig, out: &Path, kind: ModelKind) -> Result<(ModelFile, RunRecord)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let paths = Paths::new(out);
    let mut loaded = load_dataset(&cfg, out)?;
    let spec = cfg.fusion_spec();
    let (params, mut record) = match kind {
        ModelKind::Caml | ModelKind::CamlErm => {
            ensure_pseudo(&cfg, out, &mut loaded)?;
            let mut tc = cfg.train.clone();
            if kind == ModelKind::CamlErm {
                tc.adapt_steps = 1;
            }
            let (model, record) = train_caml(&loaded.md, spec, &tc)?;
            (ModelParams::Fusion { checkpoint: Checkpoint::new(model) }, record)
        }
        ModelKind::SMeta | ModelKind::TMeta => {
            let flavor = if kind == ModelKind::SMeta {
                BaselineFlavor::SLearner
            } else {
                BaselineFlavor::TLearner
            };
            let (baseline, record) =
                train_meta_outcome_baseline(&loaded.md, spec, &cfg.train, flavor, cfg.baseline_null)?;
            (ModelParams::Outcome { baseline }, record)
        }
    };
    let mf = ModelFile {
        schema_version: SCHEMA_VERSION,
        model: kind,
        config_hash: loaded.manifest.config_hash.clone(),
        trained_task_ids: record.trained_task_ids.clone(),
        params,
    };
    let model_path = paths.model(kind);
    write(&model_path, serde_json::to_string_pretty(&mf)?.as_bytes())?;
    record.model = kind.to_string();
    record.checkpoint = Some(model_path.display().to_string());
    write(&paths.run_record(kind), &serde_json::to_vec_pretty(&record)?)?;
    Ok((mf, record))
}

/// What to evaluate.
#[derive(Clone, Debug)]
pub enum Predictor {
    Model(PathBuf),
    Oracle,
    Zero,
}

/// Evaluates a predictor on a split and writes the report JSON and CSVs.
pub fn evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    predictor: &Predictor,
    oracle_gamma: bool,
    split: Split,
) -> Result<EvalReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let paths = Paths::new(out);
    let loaded = load_dataset(&cfg, out)?;
    let eval_seed = derive_seed(cfg.seed, 5);
    let gamma = if oracle_gamma || cfg.eval.gamma == GammaMode::Oracle {
        GammaSource::Oracle { noise_sd: cfg.dgp.noise_sd, seed: eval_seed }
    } else {
        GammaSource::Estimated {
            settings: cfg.eval.gamma_nuisance.clone(),
            folds: cfg.eval.gamma_folds,
            seed: eval_seed,
        }
    };
    let mut opts = EvalOptions {
        us: cfg.eval.us.clone(),
        gamma,
        positive_frac: cfg.eval.positive_frac,
        model_id: String::new(),
        seed: cfg.seed,
        trained_task_ids: None,
    };
    let report = match predictor {
        Predictor::Model(path) => {
            let mf = ModelFile::load(path)?;
            if mf.config_hash != loaded.manifest.config_hash {
                return Err(Error::Incompatible(format!(
                    "model was trained on data from config {} but the dataset is {}",
                    mf.config_hash, loaded.manifest.config_hash
                )));
            }
            let m = mf.predictor();
            if m.intervention_dim() != loaded.md.intervention_dim() || m.feature_dim() != loaded.md.feature_dim() {
                return Err(Error::Incompatible(format!(
                    "model dims (e={}, d={}) do not match the dataset (e={}, d={})",
                    m.intervention_dim(),
                    m.feature_dim(),
                    loaded.md.intervention_dim(),
                    loaded.md.feature_dim()
                )));
            }
            opts.model_id = mf.model.to_string();
            opts.trained_task_ids = Some(mf.trained_task_ids.clone());
            evaluate_zero_shot(m, &loaded.md, split, &opts)?
        }
        Predictor::Oracle => {
            opts.model_id = "oracle".into();
            let oracle = OraclePredictor { ground_truth: loaded.ground_truth.clone() };
            evaluate_zero_shot(&oracle, &loaded.md, split, &opts)?
        }
        Predictor::Zero => {
            opts.model_id = "zero".into();
            let zero = ZeroPredictor {
                intervention_dim: loaded.md.intervention_dim(),
                feature_dim: loaded.md.feature_dim(),
                output_dim: 1,
            };
            evaluate_zero_shot(&zero, &loaded.md, split, &opts)?
        }
    };
    let name = format!("{}_{split}", report.model);
    write(&paths.report(&name, "json"), report.to_json()?.as_bytes())?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write(&paths.report(&name, "csv"), &buf)?;
    let mut buf = Vec::new();
    report.write_predictions_csv(&mut buf)?;
    write(&paths.report(&format!("{name}_predictions"), "csv"), &buf)?;
    Ok(report)
}

/// Instantiates the excess-risk bound for a trained fusion model: `n` train
/// tasks, `m` recipients per task, `epsilon = 6 noise_sd`, `beta` measured on
/// the train split, `C` the spectral norm of the intervention covariance (the
/// DGP draws `w` uniformly on the unit sphere, so `C = 1/e`) and `R` the
/// linear-class complexity bound with unit norms.
pub fn bound_for_model(
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: &Path,
    delta: f64,
) -> Result<BoundReport> {
    let cfg = cfg.resolved();
    let loaded = load_dataset(&cfg, out)?;
    let mf = ModelFile::load(model_path)?;
    let ModelParams::Fusion { checkpoint } = &mf.params else {
        return Err(Error::Config("the bound needs a fusion-model checkpoint".into()));
    };
    let model: &FusionModel<f64> = &checkpoint.params;
    let train: Vec<_> = loaded.md.tasks_in(Split::Train).collect();
    let mut points = Vec::new();
    for t in &train {
        for s in t.treated.iter().take(50) {
            points.push((t.w.as_slice(), s.x.as_slice()));
        }
    }
    let beta_sq = estimate_beta_smooth(model, &points)?;
    let n = train.len();
    let m = cfg.dgp.m_per_task;
    let inputs = BoundInputs {
        n,
        m,
        epsilon: 6.0 * cfg.dgp.noise_sd,
        delta,
        beta_smooth: beta_sq.sqrt(),
        poincare_c: 1.0 / cfg.dgp.e as f64,
        rademacher: linear_rademacher_bound(1.0, 1.0, n, m),
    };
    let terms = excess_risk_bound(&inputs)?;
    let diagnostics = [
        ("mean_sq_grad_w".to_string(), beta_sq),
        ("smoothness_points".to_string(), points.len() as f64),
        ("checkpoint_version".to_string(), CHECKPOINT_VERSION as f64),
    ]
    .into();
    Ok(BoundReport { inputs, terms, diagnostics })
}
