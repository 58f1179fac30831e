//! Command line: `pretrain-map`, `train`, `eval`, `gradcheck`, `ablate` and
//! `trace`.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
//! 3 file system or file format error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use demul_core::encoders::{name_refs, EmbeddingBackend};
use demul_core::eval::{
    eval_trained, eval_zero_shot, final_weight_llm_similarity_correlation, final_weight_similarity_correlation,
    run_ablation_suite, trace_summary, trace_weights, EvalResult, ExperimentConfig, FewShotTask, Method, World,
};
use demul_core::gradcheck::{run_gradcheck, GradCheckConfig, Mutation};
use demul_core::mapping::MappingPair;
use demul_core::num::SeededRng;
use demul_core::objective::LossSpec;
use demul_core::trainer::{advance, init_state, LossReport, Problem, StepOutcome, TrainState};

use crate::checkpoint::{load_checkpoint, load_mapping, save_checkpoint, save_mapping, MappingCheckpoint, StateCheckpoint};
use crate::config::{Backend, RunConfig};
use crate::error::{Error, Result};
use crate::remote::{RemoteBackend, RemoteConfig};
use crate::report;

pub const CHECKPOINT_FILE: &str = "checkpoint.dmul";
pub const MAPPING_FILE: &str = "mapping.dmul";

#[derive(Debug, Parser)]
#[command(name = "demul", version, about = "Description-free multi-prompt learning on synthetic encoders")]
pub struct Cli {
    /// Log filter, e.g. `info` or `demul=debug`; RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the cyclic mapping on the name corpus.
    PretrainMap(PretrainArgs),
    /// Train prompts and weights on a few-shot task.
    Train(TrainArgs),
    /// Test accuracy of a trained checkpoint or of the zero-shot baseline.
    Eval(EvalArgs),
    /// Compare every analytic gradient with central differences.
    Gradcheck(GradcheckArgs),
    /// Ablation table over methods, shot counts and seeds.
    Ablate(AblateArgs),
    /// Export the weight and similarity trace of a run.
    Trace(TraceArgs),
}

/// Settings shared by commands that build an experiment. Flags override the
/// configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Number of prompts M.
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Prompts sampled per step B'.
    #[arg(long)]
    pub prompt_batch: Option<usize>,
    /// Context tokens per prompt N.
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub no_trace: bool,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub remote_url: Option<String>,
    #[arg(long)]
    pub remote_model: Option<String>,
    /// Embedding cache file (newline-delimited JSON) for the remote backend.
    #[arg(long)]
    pub embed_cache: Option<PathBuf>,
}

impl ConfigArgs {
    fn any_override(&self) -> bool {
        let Self {
            config,
            seed,
            classes,
            shots,
            prompts,
            prompt_batch,
            context_len,
            epochs,
            batch_size,
            lr,
            lambda,
            alpha,
            tau,
            no_trace,
            backend,
            remote_url,
            remote_model,
            embed_cache,
        } = self;
        config.is_some()
            || seed.is_some()
            || classes.is_some()
            || shots.is_some()
            || prompts.is_some()
            || prompt_batch.is_some()
            || context_len.is_some()
            || epochs.is_some()
            || batch_size.is_some()
            || lr.is_some()
            || lambda.is_some()
            || alpha.is_some()
            || tau.is_some()
            || *no_trace
            || backend.is_some()
            || remote_url.is_some()
            || remote_model.is_some()
            || embed_cache.is_some()
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(seed, classes, shots, prompts, prompt_batch, context_len, epochs, batch_size, lr, lambda, alpha, tau, backend);
        if self.no_trace {
            cfg.trace = false;
        }
        if self.remote_url.is_some() {
            cfg.remote_url = self.remote_url.clone();
        }
        if self.remote_model.is_some() {
            cfg.remote_model = self.remote_model.clone();
        }
        if self.embed_cache.is_some() {
            cfg.embed_cache = self.embed_cache.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Existing directory for `mapping.dmul` and `pretrain_loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-training steps (overrides the configuration).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Full,
    Unweighted,
    NoDistill,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Full => Method::Full,
            MethodArg::Unweighted => Method::Unweighted,
            MethodArg::NoDistill => Method::NoDistill,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-trained mapping; pre-trained in place when omitted.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Continue from a training checkpoint with the configuration stored in it.
    #[arg(long, conflicts_with = "mapping")]
    pub resume: Option<PathBuf>,
    /// Stop once this many steps have completed in total.
    #[arg(long)]
    pub stop_after_steps: Option<u64>,
    #[arg(long, value_enum, default_value = "full")]
    pub method: MethodArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training checkpoint to evaluate.
    #[arg(long, required_unless_present = "zero_shot", conflicts_with = "zero_shot")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the class-name-only baseline instead.
    #[arg(long)]
    pub zero_shot: bool,
    /// Optional JSON file for the result.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Test hook: negate the analytic gradient of the named loss.
    #[arg(long, hide = true, value_parser = parse_loss)]
    pub flip_sign: Option<LossSpec>,
}

fn parse_loss(s: &str) -> std::result::Result<LossSpec, String> {
    LossSpec::ALL
        .into_iter()
        .find(|l| l.name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = LossSpec::ALL.iter().map(|l| l.name()).collect();
            format!("unknown loss `{s}`; expected one of {}", names.join(", "))
        })
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for `ablation.csv` and `ablation_runs.csv`; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Shot counts, comma separated.
    #[arg(long = "shot-counts", value_delimiter = ',', default_values_t = [8usize])]
    pub shot_counts: Vec<usize>,
    /// Seeds, comma separated (at least three).
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
}

/// Parses `args` and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(&cli.log);
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::PretrainMap(a) => cmd_pretrain_map(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Trace(a) => cmd_trace(&a),
    }
}

fn existing_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_pretrain_map(args: &PretrainArgs) -> Result<i32> {
    let mut cfg = args.config.resolve()?;
    if let Some(steps) = args.steps {
        cfg.pretrain_steps = steps;
    }
    existing_dir(&args.out)?;
    let exp = cfg.experiment();
    let world = World::build(&exp)?;
    let (mapping, rep) = world.pretrain(&exp)?;
    save_mapping(
        &MappingCheckpoint {
            config: cfg.to_json(),
            mapping,
        },
        &args.out.join(MAPPING_FILE),
    )?;
    report::write_loss_trace(&args.out.join("pretrain_loss.csv"), &rep.trace)?;
    println!("steps {}", rep.trace.len());
    println!("final L_mapping {:.6e}", rep.final_train_loss);
    println!("train cycle cosine {:.6}", rep.train_cycle_cosine);
    println!("held-out cycle cosine {:.6}", rep.held_out_cycle_cosine);
    Ok(0)
}

/// Remote backend of `cfg`, or `None` for the toy backend.
pub fn remote_backend(cfg: &RunConfig) -> Result<Option<RemoteBackend>> {
    if cfg.backend != Backend::Remote {
        return Ok(None);
    }
    let url = cfg.remote_url.clone().ok_or_else(|| Error::Config("remote_url is not set".into()))?;
    let model = cfg.remote_model.clone().ok_or_else(|| Error::Config("remote_model is not set".into()))?;
    let backend = RemoteBackend::new(RemoteConfig::new(url, model, cfg.d_llm), cfg.embed_cache.as_deref())?;
    Ok(Some(backend))
}

/// World, task and training problem of a configuration.
pub struct Setup {
    pub config: RunConfig,
    pub experiment: ExperimentConfig,
    pub world: World,
    pub task: FewShotTask,
    pub problem: Problem,
}

pub fn setup(cfg: RunConfig) -> Result<Setup> {
    let experiment = cfg.experiment();
    let world = World::build(&experiment)?;
    let task = world.task(&experiment.task, experiment.seed())?;
    let remote = remote_backend(&cfg)?;
    let backend = remote.as_ref().map(|r| r as &dyn EmbeddingBackend);
    if let Some(b) = backend {
        // One batched round trip fills the cache before per-class lookups.
        b.embed_batch(&name_refs(&task.class_names))?;
    }
    let problem = world.problem(&task, experiment.train.loss.tau, backend)?;
    Ok(Setup {
        config: cfg,
        experiment,
        world,
        task,
        problem,
    })
}

struct Progress;

impl demul_core::trainer::StepHook for Progress {
    fn after_step(&mut self, state: &TrainState, outcome: &StepOutcome) {
        let LossReport { cls, distill, mapping, total, lr, .. } = outcome.report;
        tracing::debug!(step = state.step, lr, cls, distill, mapping, total, "step");
    }
}

fn apply_method(cfg: &mut RunConfig, method: Method) {
    let base = cfg.experiment().train;
    if let Some(t) = method.train_config(&base) {
        cfg.weighted = t.weighted;
        cfg.alpha = t.loss.alpha;
        cfg.lambda = t.loss.lambda;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let (cfg, mut state) = match &args.resume {
        Some(path) => {
            if args.config.any_override() {
                return Err(Error::Usage(
                    "--resume takes its configuration from the checkpoint; drop the other settings".into(),
                ));
            }
            let ckpt = load_checkpoint(path)?;
            let cfg = RunConfig::from_json(&ckpt.config)?;
            (cfg, Some(ckpt.state))
        }
        None => {
            let mut cfg = args.config.resolve()?;
            apply_method(&mut cfg, args.method.into());
            (cfg, None)
        }
    };
    create_dir(&args.out)?;
    let s = setup(cfg)?;
    let train = &s.experiment.train;
    let mut state = match state.take() {
        Some(st) => st,
        None => {
            let mapping = match &args.mapping {
                Some(path) => checked_mapping(load_mapping(path)?.mapping, &s.config)?,
                None => s.world.pretrain(&s.experiment)?.0,
            };
            init_state(train, &s.problem, mapping)?
        }
    };
    let result = advance(&mut state, &s.problem, train, args.stop_after_steps, &mut Progress);
    let ckpt = StateCheckpoint {
        config: s.config.to_json(),
        state,
    };
    // The last good state is saved even when a step failed.
    save_checkpoint(&ckpt, &args.out.join(CHECKPOINT_FILE))?;
    result?;
    let state = &ckpt.state;
    report::write_metrics(&args.out.join("metrics.csv"), state)?;
    report::write_steps(&args.out.join("steps.csv"), state)?;
    let sched = demul_core::trainer::schedule(train, s.problem.features.len())?;
    let method = if !train.weighted {
        Method::Unweighted
    } else if train.loss.alpha == 0.0 {
        Method::NoDistill
    } else {
        Method::Full
    };
    let test = eval_trained(method, state, &s.problem, &s.task, s.experiment.seed())?;
    let zero = eval_zero_shot(&s.task, &s.world.encoders, &s.world.tokens)?;
    let summary = report::TrainSummary {
        seed: s.experiment.seed(),
        shots: s.task.shots,
        method: method.name().into(),
        steps: state.step,
        epochs: state.epoch,
        final_loss: state.history.last().map(|h| h.total),
        train_accuracy: state.metrics.last().map(|m| m.train_accuracy),
        test_accuracy: test.accuracy,
        per_class_accuracy: test.per_class.clone(),
        sparsity: test.sparsity,
        zero_shot_accuracy: zero.accuracy,
        completed: state.step == sched.total_steps,
    };
    report::write_json(&args.out.join("summary.json"), &summary)?;
    println!("steps {}/{}", state.step, sched.total_steps);
    println!("test accuracy {:.4}", test.accuracy);
    println!("zero-shot accuracy {:.4}", zero.accuracy);
    Ok(0)
}

fn checked_mapping(mapping: MappingPair, cfg: &RunConfig) -> Result<MappingPair> {
    if mapping.d_vlm() != cfg.d_vlm || mapping.d_llm() != cfg.d_llm {
        return Err(Error::Config(format!(
            "mapping is {}->{}, configuration needs {}->{}",
            mapping.d_vlm(),
            mapping.d_llm(),
            cfg.d_vlm,
            cfg.d_llm
        )));
    }
    if !mapping.psi_frozen() {
        return Err(Error::Config("mapping checkpoint has psi unfrozen; run pretrain-map first".into()));
    }
    Ok(mapping)
}

#[derive(serde::Serialize)]
struct EvalOutput {
    method: String,
    seed: u64,
    shots: usize,
    accuracy: f64,
    per_class_accuracy: Vec<f64>,
    sparsity: f64,
}

impl From<&EvalResult> for EvalOutput {
    fn from(r: &EvalResult) -> Self {
        EvalOutput {
            method: r.method.name().into(),
            seed: r.seed,
            shots: r.shots,
            accuracy: r.accuracy,
            per_class_accuracy: r.per_class.clone(),
            sparsity: r.sparsity,
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let result = match &args.checkpoint {
        Some(path) => {
            if args.config.any_override() {
                return Err(Error::Usage("--checkpoint takes its configuration from the checkpoint".into()));
            }
            let ckpt = load_checkpoint(path)?;
            let s = setup(RunConfig::from_json(&ckpt.config)?)?;
            let method = if s.experiment.train.weighted { Method::Full } else { Method::Unweighted };
            eval_trained(method, &ckpt.state, &s.problem, &s.task, s.experiment.seed())?
        }
        None => {
            let cfg = args.config.resolve()?;
            let exp = cfg.experiment();
            let world = World::build(&exp)?;
            let task = world.task(&exp.task, exp.seed())?;
            let mut r = eval_zero_shot(&task, &world.encoders, &world.tokens)?;
            r.seed = exp.seed();
            r
        }
    };
    println!("{} accuracy {:.4}", result.method.name(), result.accuracy);
    if let Some(out) = &args.out {
        report::write_json(out, &EvalOutput::from(&result))?;
    }
    Ok(0)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        seed: args.seed,
        instances: args.instances,
        tolerance: args.tolerance,
        ..GradCheckConfig::default()
    };
    if cfg.instances == 0 {
        return Err(Error::Usage("--instances must be positive".into()));
    }
    let mutation = args.flip_sign.map_or(Mutation::None, Mutation::FlipSign);
    let rep = run_gradcheck(&cfg, mutation)?;
    for line in rep.lines() {
        println!("{line}");
    }
    Ok(if rep.passed() { 0 } else { 1 })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    if cfg.backend == Backend::Remote {
        return Err(Error::Usage("ablate runs on the toy backend only".into()));
    }
    if args.seeds.len() < 3 {
        return Err(Error::Usage(format!("--seeds needs at least 3 values, got {}", args.seeds.len())));
    }
    if args.shot_counts.contains(&0) {
        return Err(Error::Usage("shot counts must be positive".into()));
    }
    create_dir(&args.out)?;
    let table = run_ablation_suite(&cfg.experiment(), &args.shot_counts, &args.seeds, &Method::ALL)?;
    report::write_ablation(&args.out.join("ablation.csv"), &table)?;
    report::write_runs(&args.out.join("ablation_runs.csv"), &table.results)?;
    println!("{:<12} {:>5} {:>8} {:>8} {:>4}", "method", "shots", "mean", "std", "runs");
    for r in &table.rows {
        println!(
            "{:<12} {:>5} {:>8.4} {:>8.4} {:>4}",
            r.method.name(),
            r.shots,
            r.mean,
            r.std,
            r.runs
        );
    }
    Ok(0)
}

pub fn cmd_trace(args: &TraceArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&args.run.join(CHECKPOINT_FILE))?;
    let state = &ckpt.state;
    let untraced = |e: demul_core::Error| Error::Usage(format!("{e}; train with tracing enabled"));
    let rows = trace_weights(state).map_err(untraced)?;
    let summary = trace_summary(state).map_err(untraced)?;
    report::write_trace(&args.run.join("trace.csv"), &rows)?;
    report::write_trace_summary(&args.run.join("trace_summary.csv"), &summary)?;
    let rho = final_weight_similarity_correlation(state)?;
    let rho_llm = final_weight_llm_similarity_correlation(state)?;
    println!("epochs traced {}", state.metrics.len() + 1);
    println!("spearman(weight, text similarity) {rho:.4}");
    println!("spearman(weight, llm similarity) {rho_llm:.4}");
    Ok(0)
}

/// Initial mapping of a configuration, as `pretrain-map --steps 0` writes it
/// (before freezing).
pub fn initial_mapping(cfg: &RunConfig) -> MappingPair {
    let mut rng = SeededRng::derive(cfg.seed, "mapping-init");
    MappingPair::new(cfg.d_vlm, cfg.d_llm, &mut rng)
}
