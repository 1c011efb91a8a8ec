use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use zscate::nn::CHECKPOINT_VERSION;
use zscate::pipeline::{
    bound_for_model, ensure_pseudo, evaluate, generate, load_dataset, train, ExperimentConfig, ModelKind, Paths,
    Predictor, SCHEMA_VERSION,
};
use zscate::rng;
use zscate::tasks::Split;
use zscate::theory::{
    linear_rademacher_bound, poincare_check_gaussian, excess_risk_bound, zs_rademacher_mc, BoundInputs, BoundReport,
    Family, SampleDist, TestFunction,
};
use zscate::Error;

#[derive(Parser)]
#[command(name = "zscate", about = "Zero-shot CATE estimation for unseen interventions", disable_version_flag = true)]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over ZSCATE_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print crate and file schema versions.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic population, task split and manifest.
    Generate,
    /// Compute (or reuse cached) pseudo-outcomes.
    Pseudo,
    /// Train a model on the train split.
    Train {
        /// caml, caml_erm, s_meta or t_meta.
        #[arg(long)]
        model: String,
    },
    /// Evaluate a model, or a reference predictor, on one split.
    Evaluate(EvaluateArgs),
    /// Numerical checks of the generalization analysis.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Print the default configuration as JSON.
    PrintConfig,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Evaluate `<out>/models/<model>.json`.
    #[arg(long, conflicts_with_all = ["checkpoint", "oracle_predictor", "zero_predictor"])]
    model: Option<String>,
    /// Evaluate the model file at this path.
    #[arg(long, conflicts_with_all = ["oracle_predictor", "zero_predictor"])]
    checkpoint: Option<PathBuf>,
    /// Predict the true CATE.
    #[arg(long, conflicts_with = "zero_predictor")]
    oracle_predictor: bool,
    /// Predict zero everywhere.
    #[arg(long)]
    zero_predictor: bool,
    /// Rank against noisy true effects instead of estimated scores.
    #[arg(long)]
    oracle_gamma: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Linear,
    Finite,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Sphere,
    Ball,
}

impl From<DistArg> for SampleDist {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Sphere => SampleDist::UnitSphere,
            DistArg::Ball => SampleDist::UnitBall,
        }
    }
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Monte-Carlo zero-shot Rademacher complexity.
    Rademacher {
        #[arg(long, value_enum, default_value = "linear")]
        family: FamilyArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        /// Intervention dimension.
        #[arg(long, default_value_t = 8)]
        e: usize,
        /// Feature dimension.
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        b1: f64,
        #[arg(long, default_value_t = 1.0)]
        b2: f64,
        /// Size of the finite family.
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, value_enum, default_value = "sphere")]
        dist: DistArg,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
    },
    /// Evaluate the excess-risk bound from explicit inputs or a trained model.
    Bound(BoundArgs),
    /// Empirical Gaussian Poincare inequality check.
    Poincare {
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
    },
}

#[derive(Args)]
struct BoundArgs {
    /// Measure inputs from this model file and the dataset in the output dir.
    #[arg(long, conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// Measure inputs from `<out>/models/<model>.json`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, required_unless_present_any = ["checkpoint", "model"])]
    n: Option<usize>,
    #[arg(long, required_unless_present_any = ["checkpoint", "model"])]
    m: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    poincare_c: f64,
    /// Complexity term; defaults to the linear-class closed form.
    #[arg(long)]
    rademacher: Option<f64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Argument(_) | Error::Domain(_) | Error::Size(_)) => 2,
        Some(Error::MissingInput(_)) => 3,
        Some(Error::Incompatible(_) | Error::Shape(_) | Error::Parse(_) | Error::Json(_) | Error::Csv(_)) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn save_report(out: &Path, name: &str, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let path = Paths::new(out).report(name, "json");
    fs::create_dir_all(path.parent().unwrap_or(out))?;
    fs::write(&path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    print_json(value)
}

fn model_path(out: &Path, model: &str) -> anyhow::Result<PathBuf> {
    let kind: ModelKind = model.parse()?;
    Ok(Paths::new(out).model(kind))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.version {
        println!(
            "zscate {} (data schema {SCHEMA_VERSION}, checkpoint schema {CHECKPOINT_VERSION})",
            env!("CARGO_PKG_VERSION")
        );
        return Ok(());
    }
    let Some(command) = &cli.command else {
        bail!(Error::Argument("no command given; see --help".into()));
    };
    if let Command::PrintConfig = command {
        return print_json(&ExperimentConfig::default());
    }
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir(cli.out.as_deref());
    match command {
        Command::Generate => {
            let manifest = generate(&cfg, &out)?;
            println!(
                "generated {} samples in {} tasks under {} (config {})",
                manifest.n_samples,
                manifest.n_tasks,
                out.display(),
                &manifest.config_hash[..12]
            );
        }
        Command::Pseudo => {
            let mut loaded = load_dataset(&cfg.resolved(), &out)?;
            ensure_pseudo(&cfg.resolved(), &out, &mut loaded)?;
            println!("pseudo-outcomes at {}", Paths::new(&out).pseudo().display());
        }
        Command::Train { model } => {
            let kind: ModelKind = model.parse()?;
            let (_, record) = train(&cfg, &out, kind)?;
            print_json(&json!({
                "model": record.model,
                "adapt_steps": record.config.adapt_steps,
                "iterations": record.losses.len(),
                "final_loss": record.losses.last(),
                "wall_time_secs": record.wall_time_secs,
                "checkpoint": record.checkpoint,
            }))?;
        }
        Command::Evaluate(args) => {
            let predictor = if args.oracle_predictor {
                Predictor::Oracle
            } else if args.zero_predictor {
                Predictor::Zero
            } else if let Some(path) = &args.checkpoint {
                Predictor::Model(path.clone())
            } else if let Some(model) = &args.model {
                Predictor::Model(model_path(&out, model)?)
            } else {
                bail!(Error::Argument(
                    "evaluate needs --model, --checkpoint, --oracle-predictor or --zero-predictor".into()
                ));
            };
            let report = evaluate(&cfg, &out, &predictor, args.oracle_gamma, args.split.into())?;
            print_json(&report)?;
        }
        Command::Theory(sub) => run_theory(sub, &cfg, &out)?,
        Command::PrintConfig => unreachable!(),
    }
    Ok(())
}

fn run_theory(sub: &TheoryCommand, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let seed = rng::derive_seed(cfg.seed, 6);
    match sub {
        TheoryCommand::Rademacher { family, n, m, e, d, b1, b2, k, dist, replicates } => {
            let fam = match family {
                FamilyArg::Linear => Family::Linear { b1: *b1, b2: *b2 },
                FamilyArg::Finite => Family::random_linear_probes(*k, *e, *d, rng::derive_seed(seed, 1)),
            };
            let dist = SampleDist::from(*dist);
            let est = zs_rademacher_mc(&fam, *n, *m, (*e, *d), (dist, dist), *replicates, seed)?;
            let closed_form = matches!(family, FamilyArg::Linear).then(|| linear_rademacher_bound(*b1, *b2, *n, *m));
            save_report(
                out,
                "theory_rademacher",
                &json!({
                    "family": fam,
                    "n": n,
                    "m": m,
                    "dims": [e, d],
                    "estimate": est.estimate,
                    "stderr": est.stderr,
                    "replicates": est.replicates,
                    "closed_form_bound": closed_form,
                    "within_bound": closed_form.map(|b| est.estimate <= b + 3.0 * est.stderr),
                }),
            )
        }
        TheoryCommand::Bound(args) => {
            let report = if let Some(path) = &args.checkpoint {
                bound_for_model(cfg, out, path, args.delta)?
            } else if let Some(model) = &args.model {
                bound_for_model(cfg, out, &model_path(out, model)?, args.delta)?
            } else {
                let (n, m) = (args.n.unwrap_or(0), args.m.unwrap_or(0));
                if n == 0 || m == 0 {
                    bail!(Error::Argument("n and m must be >= 1".into()));
                }
                let inputs = BoundInputs {
                    n,
                    m,
                    epsilon: args.epsilon,
                    delta: args.delta,
                    beta_smooth: args.beta,
                    poincare_c: args.poincare_c,
                    rademacher: args.rademacher.unwrap_or_else(|| linear_rademacher_bound(1.0, 1.0, n, m)),
                };
                let terms = excess_risk_bound(&inputs)?;
                BoundReport { inputs, terms, diagnostics: Default::default() }
            };
            save_report(out, "theory_bound", &report)
        }
        TheoryCommand::Poincare { dim, draws } => {
            if *dim == 0 {
                bail!(Error::Argument("dim must be >= 1".into()));
            }
            // Diagonal covariance with spectrum 1, 1/2, 1/4, ...; the linear test
            // function along the top eigenvector attains equality.
            let cov: Vec<Vec<f64>> = (0..*dim)
                .map(|i| (0..*dim).map(|j| if i == j { 0.5f64.powi(i as i32) } else { 0.0 }).collect())
                .collect();
            let mut top = vec![0.0; *dim];
            top[0] = 1.0;
            let fns = [
                TestFunction::Constant { c: 1.0 },
                TestFunction::Linear { a: top },
                TestFunction::random_tanh_quadratic(*dim, rng::derive_seed(seed, 2)),
            ];
            let report = poincare_check_gaussian(&cov, &fns, *draws, rng::derive_seed(seed, 3))?;
            save_report(out, "theory_poincare", &report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
