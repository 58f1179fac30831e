//! The training loop: data and prompt mini-batches, SGD with cosine decay,
//! prompts and raw weights updated by the total loss, `phi` by the cyclic
//! mapping loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{EncoderSet, TokenTable};
use crate::error::{Error, Result};
use crate::losses::ClassEmbeddings;
use crate::mapping::{apply_phi_step, mapping_loss, MappingPair, PHI, PSI};
use crate::num::{cosine_sim, GradBundle, RealMat, SeededRng};
use crate::objective::{argmax, class_scores, evaluate, prompt_embeddings, Inputs, LossConfig, LossSpec, Params};
use crate::prompts::{epoch_scale, init_bank, sample_prompts, PromptBatch, WeightTable, PROMPTS, WEIGHTS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub prompts: usize,
    pub context_len: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of `lr` used for the `phi` fine-tuning step.
    pub phi_lr_ratio: f64,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub prompt_batch: usize,
    /// `false` keeps the weights uniform and trains with the unweighted loss.
    pub weighted: bool,
    pub seed: u64,
    /// Record weight and similarity snapshots every epoch.
    pub trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prompts: 32,
            context_len: 16,
            epochs: 100,
            lr: 0.01,
            phi_lr_ratio: 0.1,
            loss: LossConfig::default(),
            batch_size: 32,
            prompt_batch: 32,
            weighted: true,
            seed: 0,
            trace: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        for (name, v) in [
            ("prompts", self.prompts),
            ("context_len", self.context_len),
            ("batch_size", self.batch_size),
            ("prompt_batch", self.prompt_batch),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.prompt_batch > self.prompts {
            return Err(Error::Parameter(format!(
                "prompt batch {} exceeds the number of prompts {}",
                self.prompt_batch, self.prompts
            )));
        }
        for (name, v) in [("lr", self.lr), ("phi_lr_ratio", self.phi_lr_ratio)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> LossSpec {
        LossSpec::Total { weighted: self.weighted }
    }
}

/// `lr_base * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_base: f64) -> f64 {
    if total_steps == 0 {
        return lr_base;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// Everything the loop reads but never changes: frozen encoders, class
/// embeddings and the encoded training examples.
#[derive(Debug, Clone)]
pub struct Problem {
    pub encoders: EncoderSet,
    pub tokens: TokenTable,
    pub class_names: Vec<String>,
    pub class_tokens: Vec<Vec<usize>>,
    pub classes: ClassEmbeddings,
    /// Image features `f(x)` of the training set.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Problem {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            encoders: &self.encoders,
            tokens: &self.tokens,
            class_tokens: &self.class_tokens,
            classes: &self.classes,
            features: &self.features,
            labels: &self.labels,
        }
    }

    /// Training subset addressed by `idx`.
    fn batch(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let features = idx.iter().map(|&i| self.features[i].clone()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (features, labels)
    }
}

/// Loss values of one step, measured before its updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub cls: f64,
    pub distill: f64,
    pub mapping: f64,
    pub total: f64,
    pub clamped: u64,
}

/// Per-(class, prompt) normalized weights and prompt to class-name cosines:
/// `cos(t_ij, g(c_i))` in the text space and `cos(phi(t_ij), h(c_i))` in the
/// LLM space.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub weights: RealMat,
    pub similarity: RealMat,
    pub llm_similarity: RealMat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub cls: f64,
    pub distill: f64,
    pub mapping: f64,
    pub total: f64,
    pub train_accuracy: f64,
    pub snapshot: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    /// Completed steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: crate::num::RngState,
    /// Example order of the current epoch and the next unread position.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub history: Vec<LossReport>,
    pub metrics: Vec<EpochMetrics>,
    /// Snapshot before the first step, when tracing.
    pub initial: Option<Snapshot>,
}

/// Step counts implied by a config and a training set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

pub fn schedule(config: &TrainConfig, examples: usize) -> Result<Schedule> {
    config.validate()?;
    if examples == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    let epochs = epoch_scale(config.epochs, config.prompts, config.prompt_batch)? as u64;
    let steps_per_epoch = examples.div_ceil(config.batch_size) as u64;
    Ok(Schedule {
        epochs,
        steps_per_epoch,
        total_steps: epochs * steps_per_epoch,
    })
}

/// Fresh prompts and uniform weights around a pre-trained mapping.
pub fn init_state(config: &TrainConfig, problem: &Problem, mapping: MappingPair) -> Result<TrainState> {
    config.validate()?;
    if !mapping.psi_frozen() {
        return Err(Error::Protocol("training needs a pre-trained mapping with psi frozen".into()));
    }
    let mut rng = SeededRng::derive(config.seed, "prompt-init");
    let bank = init_bank(config.prompts, config.context_len, problem.encoders.d_tok(), &mut rng)?;
    let weights = WeightTable::uniform(problem.num_classes(), config.prompts);
    let params = Params { bank, weights, mapping };
    let initial = if config.trace {
        Some(snapshot(&params, problem)?)
    } else {
        None
    };
    Ok(TrainState {
        params,
        step: 0,
        epoch: 0,
        rng: SeededRng::derive(config.seed, "train-batches").state(),
        order: Vec::new(),
        cursor: 0,
        history: Vec::new(),
        metrics: Vec::new(),
        initial,
    })
}

/// Result of [`train_step`]: the loss values plus the gradients that were
/// (or, for `phi` under the total loss, were not) applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub total_grad: GradBundle,
    pub mapping_grad: GradBundle,
}

/// One iteration on the given examples and prompts: total-loss step on
/// prompts and raw weights, then the `phi` step on the same `t_ij`, then
/// weight normalization. On a non-finite loss the state is left untouched.
pub fn train_step(
    state: &mut TrainState,
    problem: &Problem,
    examples: &[usize],
    prompt_batch: &PromptBatch,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    if !state.params.mapping.psi_frozen() {
        return Err(Error::Protocol("train_step needs psi frozen".into()));
    }
    let (features, labels) = problem.batch(examples);
    let inputs = Inputs {
        features: &features,
        labels: &labels,
        ..problem.inputs()
    };
    let eval = evaluate(config.spec(), &state.params, &inputs, prompt_batch, &config.loss)?;
    if !eval.value.is_finite() || !eval.grad.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    // The fine-tuning gradient is taken before anything moves so a failure
    // leaves the state intact.
    let mapping_grad = mapping_loss(&state.params.mapping, &eval.text)?;
    if !mapping_grad.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }

    state.params.bank.sgd_step(eval.grad.try_get(PROMPTS)?, lr);
    if config.weighted {
        state.params.weights.sgd_step(eval.grad.try_get(WEIGHTS)?, lr);
    }
    apply_phi_step(&mut state.params.mapping, &mapping_grad, lr * config.phi_lr_ratio)?;
    state.params.weights.renormalize();

    let report = LossReport {
        step: state.step,
        epoch: state.epoch,
        lr,
        cls: eval.cls.unwrap_or(f64::NAN),
        distill: eval.distill.unwrap_or(f64::NAN),
        mapping: mapping_grad.value,
        total: eval.value,
        clamped: eval.clamped as u64,
    };
    state.step += 1;
    state.history.push(report);
    Ok(StepOutcome {
        report,
        total_grad: eval.grad,
        mapping_grad,
    })
}

/// Observer called after every step; used by tests to watch the freeze
/// contract and by the CLI for logging.
pub trait StepHook {
    fn after_step(&mut self, state: &TrainState, outcome: &StepOutcome);
}

impl StepHook for () {
    fn after_step(&mut self, _: &TrainState, _: &StepOutcome) {}
}

impl<F: FnMut(&TrainState, &StepOutcome)> StepHook for F {
    fn after_step(&mut self, state: &TrainState, outcome: &StepOutcome) {
        self(state, outcome)
    }
}

/// Runs until `stop_at` steps have completed (or the schedule ends).
/// Resuming a saved state continues the exact same sequence of batches.
pub fn advance(
    state: &mut TrainState,
    problem: &Problem,
    config: &TrainConfig,
    stop_at: Option<u64>,
    hook: &mut dyn StepHook,
) -> Result<()> {
    let sched = schedule(config, problem.features.len())?;
    let stop = stop_at.unwrap_or(sched.total_steps).min(sched.total_steps);
    let mut rng = SeededRng::from_state(state.rng);
    while state.step < stop {
        if state.cursor >= state.order.len() || state.order.is_empty() {
            state.order = (0..problem.features.len()).collect();
            rand::seq::SliceRandom::shuffle(state.order.as_mut_slice(), &mut rng);
            state.cursor = 0;
        }
        let end = (state.cursor + config.batch_size).min(state.order.len());
        let examples = state.order[state.cursor..end].to_vec();
        let prompt_batch = if config.prompt_batch == config.prompts {
            PromptBatch::all(config.prompts)
        } else {
            sample_prompts(config.prompts, config.prompt_batch, &mut rng)?
        };
        let lr = cosine_lr(state.step, sched.total_steps, config.lr);
        let outcome = match train_step(state, problem, &examples, &prompt_batch, config, lr) {
            Ok(o) => o,
            Err(e) => {
                state.rng = rng.state();
                return Err(e);
            }
        };
        state.cursor = end;
        state.rng = rng.state();
        hook.after_step(state, &outcome);
        if state.step.is_multiple_of(sched.steps_per_epoch) {
            close_epoch(state, problem, config, sched.steps_per_epoch)?;
        }
    }
    state.rng = rng.state();
    Ok(())
}

fn close_epoch(state: &mut TrainState, problem: &Problem, config: &TrainConfig, steps: u64) -> Result<()> {
    let recent = &state.history[state.history.len() - steps as usize..];
    let mean = |f: fn(&LossReport) -> f64| recent.iter().map(f).sum::<f64>() / recent.len() as f64;
    let predictions = predict(&state.params, problem, &problem.features)?;
    let correct = predictions.iter().zip(&problem.labels).filter(|(p, y)| p == y).count();
    state.epoch += 1;
    let metrics = EpochMetrics {
        epoch: state.epoch,
        cls: mean(|r| r.cls),
        distill: mean(|r| r.distill),
        mapping: mean(|r| r.mapping),
        total: mean(|r| r.total),
        train_accuracy: correct as f64 / problem.labels.len() as f64,
        snapshot: if config.trace {
            Some(snapshot(&state.params, problem)?)
        } else {
            None
        },
    };
    state.metrics.push(metrics);
    Ok(())
}

/// Initializes and trains to the end of the schedule.
pub fn run_training(
    config: &TrainConfig,
    problem: &Problem,
    mapping: MappingPair,
    hook: &mut dyn StepHook,
) -> Result<TrainState> {
    let mut state = init_state(config, problem, mapping)?;
    advance(&mut state, problem, config, None, hook)?;
    Ok(state)
}

/// Predicted class of every feature with the full prompt bank:
/// `argmax_i (1/M) sum_j w_ij P_j(i | z)`.
pub fn predict(params: &Params, problem: &Problem, features: &[Vec<f64>]) -> Result<Vec<usize>> {
    let units = prompt_embeddings(&params.bank, &problem.encoders, &problem.tokens, &problem.class_tokens)?;
    let tau = problem.classes.tau();
    features
        .iter()
        .map(|z| class_scores(z, &units, params.weights.normalized(), tau).map(|s| argmax(&s)))
        .collect()
}

/// Normalized weights and prompt to class-name cosines of `params`.
pub fn snapshot(params: &Params, problem: &Problem) -> Result<Snapshot> {
    let units = prompt_embeddings(&params.bank, &problem.encoders, &problem.tokens, &problem.class_tokens)?;
    let (k, m) = (units.len(), params.bank.num_prompts());
    let mut sim = Vec::with_capacity(k * m);
    let mut llm = Vec::with_capacity(k * m);
    for (i, row) in units.iter().enumerate() {
        for t in row {
            sim.push(cosine_sim(t, &problem.classes.vlm()[i])?);
            let mapped = params.mapping.phi_apply(t)?;
            llm.push(cosine_sim(&mapped, &problem.classes.llm()[i])?);
        }
    }
    Ok(Snapshot {
        weights: params.weights.normalized().clone(),
        similarity: RealMat::new(k, m, sim)?,
        llm_similarity: RealMat::new(k, m, llm)?,
    })
}

/// `psi` parameters are untouched and its reported gradients are exactly
/// zero.
pub fn psi_gradients_zero(outcome: &StepOutcome) -> bool {
    [&outcome.total_grad, &outcome.mapping_grad]
        .iter()
        .all(|g| g.get(PSI).is_some_and(|v| v.iter().all(|x| x.to_bits() == 0)))
}

/// `phi` gradient reported under the total loss (distillation part only).
pub fn reported_phi_grad(outcome: &StepOutcome) -> Option<&[f64]> {
    outcome.total_grad.get(PHI).map(|v| v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ExperimentConfig, World};

    fn setup(cfg: &ExperimentConfig) -> (Problem, MappingPair) {
        let world = World::build(cfg).unwrap();
        let (mapping, _) = world.pretrain(cfg).unwrap();
        let task = world.task(&cfg.task, cfg.seed()).unwrap();
        (world.problem(&task, cfg.train.loss.tau, None).unwrap(), mapping)
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01), 0.01);
        assert!((cosine_lr(50, 100, 0.01) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.01).abs() < 1e-18);
        assert!(cosine_lr(30, 100, 0.01) > cosine_lr(31, 100, 0.01));
    }

    #[test]
    fn zero_lr_changes_only_counters() {
        let cfg = ExperimentConfig::small();
        let (problem, mapping) = setup(&cfg);
        let mut state = init_state(&cfg.train, &problem, mapping).unwrap();
        let before = state.params.clone();
        let out = train_step(&mut state, &problem, &[0, 1, 2], &PromptBatch::all(4), &cfg.train, 0.0).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(state.step, 1);
        assert_eq!(state.history, [out.report]);
        assert!(out.report.total.is_finite() && out.report.mapping >= 0.0);
    }

    #[test]
    fn psi_stays_frozen_for_a_whole_run() {
        let cfg = ExperimentConfig::small();
        let (problem, mapping) = setup(&cfg);
        let psi = mapping.psi().fingerprint();
        let phi = mapping.phi().fingerprint();
        let mut steps = 0;
        let mut hook = |s: &TrainState, o: &StepOutcome| {
            assert_eq!(s.params.mapping.psi().fingerprint(), psi);
            assert!(psi_gradients_zero(o));
            assert!(reported_phi_grad(o).is_some());
            steps += 1;
        };
        let state = run_training(&cfg.train, &problem, mapping, &mut hook).unwrap();
        assert_eq!(steps, state.step);
        assert_ne!(state.params.mapping.phi().fingerprint(), phi);
    }

    #[test]
    fn zero_epochs_is_an_empty_run() {
        let mut cfg = ExperimentConfig::small();
        cfg.train.epochs = 0;
        let (problem, mapping) = setup(&cfg);
        let state = run_training(&cfg.train, &problem, mapping.clone(), &mut ()).unwrap();
        assert_eq!(state.step, 0);
        assert!(state.metrics.is_empty() && state.history.is_empty());
        assert_eq!(state.params.mapping, mapping);
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let cfg = ExperimentConfig::small();
        let (problem, mapping) = setup(&cfg);
        let a = run_training(&cfg.train, &problem, mapping.clone(), &mut ()).unwrap();
        let b = run_training(&cfg.train, &problem, mapping.clone(), &mut ()).unwrap();
        assert_eq!(a, b);
        let sched = schedule(&cfg.train, problem.features.len()).unwrap();
        assert_eq!(a.step, sched.total_steps);
        assert_eq!(a.metrics.len() as u64, sched.epochs);
        assert_eq!(a.history.len() as u64, sched.total_steps);
    }

    #[test]
    fn interrupted_run_continues_identically() {
        let cfg = ExperimentConfig::small();
        let (problem, mapping) = setup(&cfg);
        let full = run_training(&cfg.train, &problem, mapping.clone(), &mut ()).unwrap();
        let mut part = init_state(&cfg.train, &problem, mapping).unwrap();
        // Stop mid-epoch so the cursor and order are carried over.
        advance(&mut part, &problem, &cfg.train, Some(4), &mut ()).unwrap();
        assert_eq!(part.step, 4);
        let mut resumed = part.clone();
        advance(&mut resumed, &problem, &cfg.train, None, &mut ()).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn prompt_batches_scale_epochs_and_leave_unsampled_prompts() {
        let mut cfg = ExperimentConfig::small();
        cfg.train.prompt_batch = 2;
        let (problem, mapping) = setup(&cfg);
        let sched = schedule(&cfg.train, problem.features.len()).unwrap();
        assert_eq!(sched.epochs, 6);
        let mut state = init_state(&cfg.train, &problem, mapping).unwrap();
        let before = state.params.bank.clone();
        let batch = PromptBatch { indices: alloc::vec![1, 3] };
        train_step(&mut state, &problem, &[0, 1, 2, 3], &batch, &cfg.train, 0.05).unwrap();
        for j in 0..4 {
            let same = state.params.bank.context(j) == before.context(j);
            assert_eq!(same, !batch.indices.contains(&j), "prompt {j}");
        }
        let state = run_training(&cfg.train, &problem, state.params.mapping.clone(), &mut ()).unwrap();
        assert_eq!(state.metrics.len(), 6);
    }

    #[test]
    fn unweighted_training_keeps_uniform_weights() {
        let mut cfg = ExperimentConfig::small();
        cfg.train.weighted = false;
        let (problem, mapping) = setup(&cfg);
        let state = run_training(&cfg.train, &problem, mapping, &mut ()).unwrap();
        assert_eq!(state.params.weights, WeightTable::uniform(3, 4));
    }

    #[test]
    fn invalid_configs_and_protocol_are_rejected() {
        let cfg = ExperimentConfig::small();
        let (problem, mapping) = setup(&cfg);
        let mut bad = cfg.train.clone();
        bad.prompt_batch = 5;
        assert!(matches!(init_state(&bad, &problem, mapping.clone()), Err(Error::Parameter(_))));
        let mut open = mapping.clone();
        open.set_frozen(false, false);
        assert!(matches!(init_state(&cfg.train, &problem, open), Err(Error::Protocol(_))));
        let mut state = init_state(&cfg.train, &problem, mapping).unwrap();
        state.params.mapping.set_frozen(false, false);
        let err = train_step(&mut state, &problem, &[0], &PromptBatch::all(4), &cfg.train, 0.01);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn failed_step_leaves_parameters() {
        let cfg = ExperimentConfig::small();
        let (mut problem, mapping) = setup(&cfg);
        problem.features[0] = alloc::vec![0.0; problem.features[0].len()];
        let mut state = init_state(&cfg.train, &problem, mapping).unwrap();
        let before = state.params.clone();
        assert!(train_step(&mut state, &problem, &[0, 1], &PromptBatch::all(4), &cfg.train, 0.01).is_err());
        assert_eq!(state.params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn traced_snapshots_have_class_by_prompt_shape() {
        let cfg = ExperimentConfig::small();
        let (problem, mapping) = setup(&cfg);
        let state = run_training(&cfg.train, &problem, mapping, &mut ()).unwrap();
        let init = state.initial.as_ref().unwrap();
        assert!(init.weights.as_slice().iter().all(|w| (w - 0.25).abs() < 1e-12));
        for m in &state.metrics {
            let s = m.snapshot.as_ref().unwrap();
            assert_eq!((s.similarity.rows(), s.similarity.cols()), (3, 4));
            assert!(s.similarity.as_slice().iter().all(|c| c.abs() <= 1.0 + 1e-12));
            assert!((0.0..=1.0).contains(&m.train_accuracy));
        }
    }
}
