//! `wass`: distances, transport, class selection, the transfer pipeline,
//! bound diagnostics, property verification and synthetic data.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use wass_core::bounds::bound_report;
use wass_core::data::{
    load_class_weights, load_feature_matrix, load_labels, load_vector, save_class_weights, save_feature_matrix,
    save_labels, FeatureMatrix, LabeledDataset, MatrixFormat, TransportPlan,
};
use wass_core::distance::{pairwise_distances, DistanceMatrix};
use wass_core::experiment::{run_experiment, ExperimentConfig, DEFAULT_EXPERIMENT};
use wass_core::ot::{solve_exact_ot, OtProblem};
use wass_core::pipeline::{run_pipeline, Method, PipelineConfig, SoftmaxHead, TrainConfig};
use wass_core::select::{select_class_weights, weights_to_sample_probabilities, SolverChoice};
use wass_core::sinkhorn::{Epsilon, SinkhornConfig};
use wass_core::synth::{make_scenario, ScenarioKind, ScenarioSpec};
use wass_core::verify::{run_all, VerifyOptions};

use report::RunReport;

#[derive(Parser, Debug)]
#[command(name = "wass", version, about = "Wasserstein class selection for few-shot transfer")]
struct Cli {
    /// Base seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress diagnostics on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pairwise Euclidean distances between source and target rows.
    Distance(DistanceArgs),
    /// Exact optimal transport cost for a cost matrix.
    Ot(OtArgs),
    /// Jointly solve for class weights and a transport plan.
    Select(SelectArgs),
    /// Weight source classes, pre-train, fine-tune and evaluate.
    Pipeline(PipelineArgs),
    /// Compute every term of the transfer bound for two heads.
    Bound(BoundArgs),
    /// Run the randomized property suites.
    Verify(VerifyArgs),
    /// Write a synthetic transfer scenario.
    Synth(SynthArgs),
    /// Run a scenario x method x seed matrix and write CSV.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FormatArg {
    Binary,
    Csv,
}

fn resolve_format(explicit: Option<FormatArg>, path: &Path) -> MatrixFormat {
    match explicit {
        Some(FormatArg::Binary) => MatrixFormat::Binary,
        Some(FormatArg::Csv) => MatrixFormat::Csv,
        None => MatrixFormat::from_path(path),
    }
}

#[derive(Args, Debug, Serialize)]
struct DistanceArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Input format; inferred from the extension when omitted (.csv or binary).
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Output matrix, binary format.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct OtArgs {
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Source marginal as comma or newline separated values (default uniform).
    #[arg(long)]
    mu: Option<PathBuf>,
    /// Target marginal (default uniform).
    #[arg(long)]
    nu: Option<PathBuf>,
    #[arg(long)]
    out_plan: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SolverArg {
    Exact,
    Sinkhorn,
    Auto,
}

#[derive(Args, Debug, Serialize)]
struct SinkhornArgs {
    /// Sinkhorn regularization as a fraction of the mean distance.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-7)]
    sinkhorn_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    sinkhorn_max_iters: usize,
}

impl SinkhornArgs {
    fn config(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: Epsilon::MeanCostFraction(self.epsilon),
            tol: self.sinkhorn_tol,
            max_iters: self.sinkhorn_max_iters,
            ..SinkhornConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SelectArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_labels: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    out_plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SolverArg::Exact)]
    solver: SolverArg,
    #[command(flatten)]
    #[serde(flatten)]
    sinkhorn: SinkhornArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Wass,
    WassSinkhorn,
    All,
    Rnd,
    Mn,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Wass => Method::Wass,
            MethodArg::WassSinkhorn => Method::WassSinkhorn,
            MethodArg::All => Method::All,
            MethodArg::Rnd => Method::Rnd,
            MethodArg::Mn => Method::Mn,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_labels: PathBuf,
    #[arg(long)]
    target_train: PathBuf,
    #[arg(long)]
    target_train_labels: PathBuf,
    #[arg(long)]
    target_test: PathBuf,
    #[arg(long)]
    target_test_labels: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, value_enum, default_value_t = MethodArg::Wass)]
    method: MethodArg,
    /// Resample this many source rows instead of importance weighting (0 = weighting).
    #[arg(long, default_value_t = 0)]
    budget: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Number of nearest source classes kept by the MN baseline.
    #[arg(long, default_value_t = 3)]
    mn_top: usize,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    #[command(flatten)]
    #[serde(flatten)]
    sinkhorn: SinkhornArgs,
    #[arg(long)]
    out_weights: Option<PathBuf>,
    #[arg(long)]
    out_pretrained: Option<PathBuf>,
    #[arg(long)]
    out_finetuned: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BoundArgs {
    #[arg(long)]
    pretrained_head: PathBuf,
    #[arg(long)]
    finetuned_head: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_labels: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    target_labels: PathBuf,
    /// Class weights JSON (as written by `select`) defining the reweighted source.
    #[arg(long)]
    source_weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    /// Random instances per suite.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Simulated predictions per instance in the induced-error suite.
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Dda,
    Oda,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Dda)]
    kind: KindArg,
    #[arg(long, default_value_t = 10)]
    k_source: usize,
    #[arg(long, default_value_t = 3)]
    k_target: usize,
    #[arg(long, default_value_t = 0)]
    overlap: usize,
    /// Fresh target classes planted next to a source class.
    #[arg(long, default_value_t = 1)]
    near: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    stddev: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Samples per class in the source and target training sets.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 100)]
    per_class_test: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    format: FormatArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ExperimentArgs {
    /// TOML experiment file; the built-in disjoint-label matrix when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the built-in configuration and exit.
    #[arg(long)]
    print_default_config: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

struct Ctx {
    seed: u64,
    quiet: bool,
}

impl Ctx {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_matrix(path: &Path, format: Option<FormatArg>) -> Result<FeatureMatrix> {
    load_feature_matrix(path, resolve_format(format, path)).with_context(|| format!("loading {}", path.display()))
}

fn load_dataset(features: &Path, labels: &Path, format: Option<FormatArg>) -> Result<LabeledDataset> {
    let f = load_matrix(features, format)?;
    let index = load_labels(labels).with_context(|| format!("loading {}", labels.display()))?;
    if index.labels.len() != f.rows() {
        bail!(
            "{} has {} labels but {} has {} rows",
            labels.display(),
            index.labels.len(),
            features.display(),
            f.rows()
        );
    }
    Ok(LabeledDataset::from_index(f, index)?)
}

fn plan_matrix(plan: &TransportPlan) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix::new(plan.rows, plan.cols, plan.plan.clone())?)
}

fn save_matrix(m: &FeatureMatrix, path: &Path, report: &mut RunReport) -> Result<()> {
    save_feature_matrix(m, path, MatrixFormat::from_path(path))?;
    report.wrote(path);
    Ok(())
}

fn finish(report: RunReport, path: Option<&Path>, stdout: &Value, ctx: &Ctx) -> Result<()> {
    for w in &report.warnings {
        ctx.info(format!("warning: {w}"));
    }
    if let Some(p) = path {
        report.save(p)?;
    }
    println!("{}", serde_json::to_string(stdout)?);
    Ok(())
}

fn cmd_distance(a: &DistanceArgs, ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new("distance", serde_json::to_value(a)?);
    let (s, t) = report.time("load", || -> Result<_> {
        Ok((load_matrix(&a.source, a.format)?, load_matrix(&a.target, a.format)?))
    })?;
    let d = report.time("distances", || pairwise_distances(&s, &t))?;
    save_feature_matrix(&d.to_feature_matrix()?, &a.out, MatrixFormat::Binary)?;
    report.wrote(&a.out);
    report.result = json!({"rows": d.rows(), "cols": d.cols(), "mean": d.mean(), "max": d.max()});
    let out = report.result.clone();
    finish(report, a.report.as_deref(), &out, ctx)
}

fn cmd_ot(a: &OtArgs, ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new("ot", serde_json::to_value(a)?);
    let cost = DistanceMatrix::from_feature_matrix(&load_matrix(&a.cost, a.format)?)?;
    let mu = match &a.mu {
        Some(p) => load_vector(p)?,
        None => vec![1.0 / cost.rows() as f64; cost.rows()],
    };
    let nu = match &a.nu {
        Some(p) => load_vector(p)?,
        None => vec![1.0 / cost.cols() as f64; cost.cols()],
    };
    let sol = report.time("solve", || solve_exact_ot(&OtProblem::new(&cost, mu, nu)?))?;
    if let Some(p) = &a.out_plan {
        save_matrix(&plan_matrix(&sol.plan)?, p, &mut report)?;
    }
    report.result = json!({
        "w1": sol.objective(),
        "dual_objective": sol.dual_objective,
        "duality_gap": sol.duality_gap,
        "pivots": sol.pivots,
    });
    finish(report, a.report.as_deref(), &json!({"w1": sol.objective()}), ctx)
}

fn cmd_select(a: &SelectArgs, ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new("select", serde_json::to_value(a)?);
    let (source, target) = report.time("load", || -> Result<_> {
        Ok((load_dataset(&a.source, &a.source_labels, a.format)?, load_matrix(&a.target, a.format)?))
    })?;
    let d = report.time("distances", || pairwise_distances(source.features(), &target))?;
    let solver = match a.solver {
        SolverArg::Exact => SolverChoice::Exact,
        SolverArg::Sinkhorn => SolverChoice::Sinkhorn,
        SolverArg::Auto => SolverChoice::Auto,
    };
    let sol = report.time("solve", || {
        select_class_weights(&d, source.labels(), source.num_classes(), solver, &a.sinkhorn.config())
    })?;
    if !sol.converged {
        report.warn(format!(
            "sinkhorn stopped after {} iterations without reaching the tolerance",
            sol.iterations
        ));
    }
    save_class_weights(&sol.weights, source.class_ids(), &a.out_weights)?;
    report.wrote(&a.out_weights);
    if let Some(p) = &a.out_plan {
        save_matrix(&plan_matrix(&sol.plan)?, p, &mut report)?;
    }
    let clamped = sol.weights.clamped();
    let weights: serde_json::Map<String, Value> = source
        .class_ids()
        .iter()
        .zip(clamped.as_slice())
        .map(|(id, w)| (id.to_string(), json!(w)))
        .collect();
    let support: Vec<u64> = sol.support().iter().map(|&c| source.class_ids()[c]).collect();
    report.result = json!({
        "objective": sol.objective,
        "support": support,
        "support_size": sol.support_size,
        "weights": weights,
        "duality_gap": sol.duality_gap,
        "iterations": sol.iterations,
        "converged": sol.converged,
    });
    let out = report.result.clone();
    finish(report, a.report.as_deref(), &out, ctx)
}

fn cmd_pipeline(a: &PipelineArgs, ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new("pipeline", serde_json::to_value(a)?);
    report.config["seed"] = json!(ctx.seed);
    let (source, train, test) = report.time("load", || -> Result<_> {
        Ok((
            load_dataset(&a.source, &a.source_labels, a.format)?,
            load_dataset(&a.target_train, &a.target_train_labels, a.format)?,
            load_dataset(&a.target_test, &a.target_test_labels, a.format)?,
        ))
    })?;
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: ctx.seed,
        l2_penalty: a.l2,
        early_stop_patience: a.patience,
    };
    let cfg = PipelineConfig {
        method: a.method.into(),
        seed: ctx.seed,
        budget: (a.budget > 0).then_some(a.budget),
        pretrain: train_cfg,
        finetune: train_cfg,
        mn_top: a.mn_top,
        validation_fraction: a.validation_fraction,
        sinkhorn: a.sinkhorn.config(),
    };
    let outcome = run_pipeline(&source, &train, &test, &cfg)?;
    report.timings_ms.extend(outcome.timings_ms.iter().cloned());
    if outcome.converged == Some(false) {
        report.warn("sinkhorn stopped at its iteration cap".into());
    }
    if let Some(p) = &a.out_weights {
        save_class_weights(&outcome.weights, source.class_ids(), p)?;
        report.wrote(p);
    }
    if let Some(p) = &a.out_pretrained {
        outcome.pretrained.head.save(p)?;
        report.wrote(p);
    }
    if let Some(p) = &a.out_finetuned {
        outcome.finetuned.head.save(p)?;
        report.wrote(p);
    }
    let clamped = outcome.weights.clamped();
    let weights: serde_json::Map<String, Value> = source
        .class_ids()
        .iter()
        .zip(clamped.as_slice())
        .map(|(id, w)| (id.to_string(), json!(w)))
        .collect();
    report.result = json!({
        "method": cfg.method.name(),
        "weights": weights,
        "w1_objective": outcome.w1_objective,
        "support_size": outcome.support_size,
        "eval": outcome.target_eval,
        "pretrain_epochs": outcome.pretrained.loss_history.len(),
        "finetune_epochs": outcome.finetuned.loss_history.len(),
    });
    let out = report.result.clone();
    finish(report, a.report.as_deref(), &out, ctx)
}

fn cmd_bound(a: &BoundArgs, ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new("bound", serde_json::to_value(a)?);
    let pre = SoftmaxHead::load(&a.pretrained_head)?;
    let fine = SoftmaxHead::load(&a.finetuned_head)?;
    let source = load_dataset(&a.source, &a.source_labels, a.format)?;
    let target = load_dataset(&a.target, &a.target_labels, a.format)?;
    let masses = match &a.source_weights {
        Some(p) => {
            let w = load_class_weights(p, source.class_ids())?;
            Some(weights_to_sample_probabilities(&w.clamped(), source.labels())?)
        }
        None => None,
    };
    let b = report.time("bound", || bound_report(&pre, &fine, &source, masses.as_deref(), &target))?;
    if b.cond_term_source.is_none() {
        report.warn("feature supports differ; conditional terms are not defined".into());
    }
    report.result = serde_json::to_value(&b)?;
    let out = report.result.clone();
    finish(report, a.report.as_deref(), &out, ctx)
}

/// Exit status 1 when any suite fails.
fn cmd_verify(a: &VerifyArgs, ctx: &Ctx) -> Result<bool> {
    let mut report = RunReport::new("verify", serde_json::to_value(a)?);
    report.config["seed"] = json!(ctx.seed);
    let opts = VerifyOptions { seed: ctx.seed, trials: a.trials, draws: a.draws };
    let suites = report.time("suites", || run_all(&opts))?;
    let all_passed = suites.iter().all(|s| s.passed);
    for s in suites.iter().filter(|s| !s.passed) {
        report.warn(format!("{} failed on {} of {} cases", s.name, s.failures, s.cases));
    }
    report.result = json!({"all_passed": all_passed, "suites": suites});
    let out = report.result.clone();
    finish(report, a.report.as_deref(), &out, ctx)?;
    Ok(all_passed)
}

fn cmd_synth(a: &SynthArgs, ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new("synth", serde_json::to_value(a)?);
    report.config["seed"] = json!(ctx.seed);
    let spec = ScenarioSpec {
        kind: match a.kind {
            KindArg::Dda => ScenarioKind::Dda,
            KindArg::Oda => ScenarioKind::Oda,
        },
        k_source: a.k_source,
        k_target: a.k_target,
        overlap: a.overlap,
        separation: a.separation,
        near: a.near,
        dim: a.dim,
        stddev: a.stddev,
        per_class_source: a.per_class,
        per_class_target_train: a.per_class,
        per_class_target_test: a.per_class_test,
        seed: ctx.seed,
    };
    let s = make_scenario(&spec)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let (format, ext) = match a.format {
        FormatArg::Binary => (MatrixFormat::Binary, "wsf"),
        FormatArg::Csv => (MatrixFormat::Csv, "csv"),
    };
    for (name, data) in [("source", &s.source), ("target_train", &s.target_train), ("target_test", &s.target_test)] {
        let fpath = a.out_dir.join(format!("{name}.{ext}"));
        save_feature_matrix(data.features(), &fpath, format)?;
        report.wrote(&fpath);
        let lpath = a.out_dir.join(format!("{name}.lbl"));
        save_labels(&data.raw_labels(), &lpath)?;
        report.wrote(&lpath);
    }
    report.result = json!({
        "source_rows": s.source.len(),
        "target_train_rows": s.target_train.len(),
        "target_test_rows": s.target_test.len(),
        "overlap_ids": s.overlap_ids,
        "near_pairs": s.near_pairs,
    });
    let out = report.result.clone();
    finish(report, a.report.as_deref(), &out, ctx)
}

fn cmd_experiment(a: &ExperimentArgs, ctx: &Ctx) -> Result<()> {
    if a.print_default_config {
        print!("{DEFAULT_EXPERIMENT}");
        return Ok(());
    }
    let mut report = RunReport::new("experiment", serde_json::to_value(a)?);
    let cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default_dda(),
    };
    report.config["experiment"] = serde_json::to_value(&cfg)?;
    let results = report.time("run", || run_experiment(&cfg))?;
    for c in &results.cells {
        if let Some(m) = &c.message {
            report.warn(format!("{} / {} / seed {}: {m}", c.scenario, c.method, c.seed));
        }
    }
    let csv = results.to_csv();
    match &a.out {
        Some(p) => {
            std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
            report.wrote(p);
        }
        None => print!("{csv}"),
    }
    report.result = serde_json::to_value(&results.summaries)?;
    for w in &report.warnings {
        ctx.info(format!("warning: {w}"));
    }
    if let Some(p) = &a.report {
        report.save(p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    match &cli.command {
        Command::Distance(a) => cmd_distance(a, &ctx)?,
        Command::Ot(a) => cmd_ot(a, &ctx)?,
        Command::Select(a) => cmd_select(a, &ctx)?,
        Command::Pipeline(a) => cmd_pipeline(a, &ctx)?,
        Command::Bound(a) => cmd_bound(a, &ctx)?,
        Command::Verify(a) => return cmd_verify(a, &ctx),
        Command::Synth(a) => cmd_synth(a, &ctx)?,
        Command::Experiment(a) => cmd_experiment(a, &ctx)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let quiet = cli.quiet;
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if !quiet {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
