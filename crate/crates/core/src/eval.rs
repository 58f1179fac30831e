//! Synthetic few-shot tasks, the zero-shot baseline, the ablation suite and
//! the weight/similarity trace.
//!
//! A task draws class prototypes in image space as `A g_hat(c) + sigma_p eta`
//! where `A` inverts the image encoder's linear part, so zero-shot
//! classification with class-name embeddings is informative but imperfect.
//! Noise vectors are `N(0, I/d)`: `sigma` is their expected norm relative to
//! the unit-norm `g_hat`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{synthetic_names, EmbeddingBackend, EncoderConfig, EncoderSet, TokenTable, ToyBackend};
use crate::error::{Error, Result};
use crate::losses::ClassEmbeddings;
use crate::mapping::{pretrain_mapping, MappingPair, NameCorpus, PretrainConfig, PretrainReport};
use crate::num::{cosine_sim, derive_seed, unit, RealMat, SeededRng};
use crate::trainer::{predict, run_training, Problem, StepHook, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub sigma_x: f64,
    pub sigma_p: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            classes: 10,
            shots: 8,
            test_per_class: 200,
            sigma_x: 0.3,
            sigma_p: 0.2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Parameter(format!("a task needs K >= 2 classes, got {}", self.classes)));
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return Err(Error::Parameter("shots and test_per_class must be positive".into()));
        }
        for (name, v) in [("sigma_x", self.sigma_x), ("sigma_p", self.sigma_p)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub class_names: Vec<String>,
    /// Image-space prototype of each class.
    pub prototypes: Vec<Vec<f64>>,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<usize>,
    pub shots: usize,
    pub sigma_x: f64,
    pub sigma_p: f64,
    pub seed: u64,
}

impl FewShotTask {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// `A`: maps a text-space direction to the image input whose encoder
/// pre-activation reproduces it (transpose of the image layer over its gain).
pub fn prototype_map(encoders: &EncoderSet) -> RealMat {
    let w = encoders.image_net().layers()[0].weight();
    let gain = encoders.config().image_gain;
    let mut a = w.transpose();
    if gain != 0.0 {
        a.as_mut_slice().iter_mut().for_each(|v| *v /= gain);
    }
    a
}

/// Draws a task over `class_names`. Train and test samples come from
/// separate streams, classes are balanced, and samples are class-major.
pub fn gen_task(
    encoders: &EncoderSet,
    tokens: &TokenTable,
    class_names: &[String],
    config: &TaskConfig,
    seed: u64,
) -> Result<FewShotTask> {
    config.validate()?;
    if class_names.len() != config.classes {
        return Err(Error::dim("task class names", config.classes, class_names.len()));
    }
    let a = prototype_map(encoders);
    let d_img = encoders.d_img();
    let scale = 1.0 / libm::sqrt(d_img as f64);
    let mut proto_rng = SeededRng::derive(seed, "task-prototypes");
    let mut prototypes = Vec::with_capacity(class_names.len());
    for name in class_names {
        let g = encoders.encode_class_name(tokens, name)?;
        let (g_hat, _) = unit(&g, "class-name text embedding")?;
        let mut mu = a.matvec(&g_hat);
        let eta = proto_rng.normal_vec(d_img, scale);
        mu.iter_mut().zip(&eta).for_each(|(m, e)| *m += config.sigma_p * e);
        prototypes.push(mu);
    }
    let draw = |label: &str, per_class: usize| {
        let mut rng = SeededRng::derive(seed, label);
        let mut xs = Vec::with_capacity(per_class * prototypes.len());
        let mut ys = Vec::with_capacity(per_class * prototypes.len());
        for (c, mu) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                let noise = rng.normal_vec(d_img, scale);
                xs.push(mu.iter().zip(&noise).map(|(m, e)| m + config.sigma_x * e).collect::<Vec<f64>>());
                ys.push(c);
            }
        }
        (xs, ys)
    };
    let (train_x, train_y) = draw("task-train", config.shots);
    let (test_x, test_y) = draw("task-test", config.test_per_class);
    Ok(FewShotTask {
        class_names: class_names.to_vec(),
        prototypes,
        train_x,
        train_y,
        test_x,
        test_y,
        shots: config.shots,
        sigma_x: config.sigma_x,
        sigma_p: config.sigma_p,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    ZeroShot,
    NoDistill,
    Unweighted,
    Full,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ZeroShot, Method::NoDistill, Method::Unweighted, Method::Full];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::NoDistill => "no_distill",
            Method::Unweighted => "unweighted",
            Method::Full => "full",
        }
    }

    /// Training config of this ablation derived from the full one.
    pub fn train_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Method::ZeroShot => return None,
            Method::NoDistill => cfg.loss.alpha = 0.0,
            Method::Unweighted => cfg.weighted = false,
            Method::Full => {}
        }
        Some(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Fraction of normalized weights below [`SPARSE_THRESHOLD`]; zero for
    /// methods without weights.
    pub sparsity: f64,
}

pub const SPARSE_THRESHOLD: f64 = 1e-3;

fn score(method: Method, shots: usize, seed: u64, predictions: &[usize], labels: &[usize], k: usize) -> EvalResult {
    let mut hits = alloc::vec![0usize; k];
    let mut counts = alloc::vec![0usize; k];
    for (p, y) in predictions.iter().zip(labels) {
        counts[*y] += 1;
        if p == y {
            hits[*y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    EvalResult {
        method,
        shots,
        seed,
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(h, c)| if *c == 0 { 0.0 } else { *h as f64 / *c as f64 })
            .collect(),
        sparsity: 0.0,
    }
}

/// Class-name-only prediction: `argmax_i cos(f(x), g(c_i))`.
pub fn eval_zero_shot(task: &FewShotTask, encoders: &EncoderSet, tokens: &TokenTable) -> Result<EvalResult> {
    let names = task
        .class_names
        .iter()
        .map(|c| encoders.encode_class_name(tokens, c))
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = Vec::with_capacity(task.test_x.len());
    for x in &task.test_x {
        let z = encoders.encode_image_f(x)?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, g) in names.iter().enumerate() {
            let c = cosine_sim(&z, g)?;
            if c > best.0 {
                best = (c, i);
            }
        }
        predictions.push(best.1);
    }
    Ok(score(Method::ZeroShot, task.shots, task.seed, &predictions, &task.test_y, task.num_classes()))
}

/// Everything fixed by a seed before training: world, corpus, pre-trained
/// mapping and the task.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    /// Synthetic names added to the class names to form the mapping corpus.
    pub corpus_size: usize,
    pub held_out_fraction: f64,
    pub pretrain: PretrainConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig::default(),
            corpus_size: 200,
            held_out_fraction: 0.2,
            pretrain: PretrainConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Seconds-scale configuration (K=3, M=4, N=2, small widths) for tests
    /// and smoke runs.
    pub fn small() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig {
                d_tok: 8,
                d_vlm: 16,
                d_llm: 24,
                d_img: 16,
                vocab_size: 64,
                ..EncoderConfig::default()
            },
            corpus_size: 12,
            held_out_fraction: 0.2,
            pretrain: PretrainConfig {
                steps: 40,
                ..PretrainConfig::default()
            },
            task: TaskConfig {
                classes: 3,
                shots: 4,
                test_per_class: 10,
                ..TaskConfig::default()
            },
            train: TrainConfig {
                prompts: 4,
                context_len: 2,
                epochs: 3,
                batch_size: 5,
                prompt_batch: 4,
                ..TrainConfig::default()
            },
        }
    }

    /// Copy with every seed set from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.encoder.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.train.seed = seed;
        cfg
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

/// Encoders, token table and names shared by every method at one seed.
#[derive(Debug, Clone)]
pub struct World {
    pub encoders: EncoderSet,
    pub tokens: TokenTable,
    pub class_names: Vec<String>,
    pub corpus: NameCorpus,
}

impl World {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let seed = config.encoder.seed;
        let k = config.task.classes;
        let mut names = synthetic_names(config.corpus_size + k, derive_seed(seed, "names"));
        let class_names = names.split_off(config.corpus_size);
        let mut all = names;
        all.extend(class_names.iter().cloned());
        let tokens = TokenTable::build(&config.encoder, &all)?;
        let encoders = EncoderSet::new(config.encoder.clone())?;
        let corpus = NameCorpus::new(&all, &tokens, config.held_out_fraction, derive_seed(seed, "corpus"))?;
        Ok(World {
            encoders,
            tokens,
            class_names,
            corpus,
        })
    }

    /// Fresh mapping pre-trained on the corpus; `psi` comes back frozen.
    pub fn pretrain(&self, config: &ExperimentConfig) -> Result<(MappingPair, PretrainReport)> {
        let mut rng = SeededRng::derive(config.pretrain.seed, "mapping-init");
        let mut pair = MappingPair::new(self.encoders.d_vlm(), self.encoders.d_llm(), &mut rng);
        let report = pretrain_mapping(&mut pair, &self.corpus, &self.encoders, &self.tokens, &config.pretrain)?;
        Ok((pair, report))
    }

    pub fn task(&self, config: &TaskConfig, seed: u64) -> Result<FewShotTask> {
        let task_seed = derive_seed(seed, &format!("task/{}-shot", config.shots));
        gen_task(&self.encoders, &self.tokens, &self.class_names, config, task_seed)
    }

    /// Training problem of `task` with class embeddings from `backend`
    /// (the toy `h` when `None`).
    pub fn problem(&self, task: &FewShotTask, tau: f64, backend: Option<&dyn EmbeddingBackend>) -> Result<Problem> {
        let toy = ToyBackend::new(&self.encoders, &self.tokens);
        let backend = backend.unwrap_or(&toy);
        let mut vlm = Vec::with_capacity(task.num_classes());
        let mut llm = Vec::with_capacity(task.num_classes());
        let mut class_tokens = Vec::with_capacity(task.num_classes());
        for c in &task.class_names {
            vlm.push(self.encoders.encode_class_name(&self.tokens, c)?);
            llm.push(crate::encoders::embed_llm(c, backend)?);
            class_tokens.push(self.tokens.tokens(c)?.to_vec());
        }
        let features = encode_all(&self.encoders, &task.train_x)?;
        Ok(Problem {
            encoders: self.encoders.clone(),
            tokens: self.tokens.clone(),
            class_names: task.class_names.clone(),
            class_tokens,
            classes: ClassEmbeddings::new(vlm, llm, tau)?,
            features,
            labels: task.train_y.clone(),
        })
    }
}

pub fn encode_all(encoders: &EncoderSet, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| encoders.encode_image_f(x).map(|v| v.into_inner())).collect()
}

/// Test-set result of a trained state.
pub fn eval_trained(
    method: Method,
    state: &TrainState,
    problem: &Problem,
    task: &FewShotTask,
    seed: u64,
) -> Result<EvalResult> {
    let features = encode_all(&problem.encoders, &task.test_x)?;
    let predictions = predict(&state.params, problem, &features)?;
    let mut result = score(method, task.shots, seed, &predictions, &task.test_y, task.num_classes());
    let w = state.params.weights.normalized();
    result.sparsity = state.params.weights.count_below(SPARSE_THRESHOLD) as f64 / (w.rows() * w.cols()) as f64;
    Ok(result)
}

/// Trains `method` on `task` and scores it on the test set.
pub fn run_method(
    method: Method,
    world: &World,
    mapping: &MappingPair,
    task: &FewShotTask,
    config: &ExperimentConfig,
    hook: &mut dyn StepHook,
) -> Result<(EvalResult, Option<TrainState>)> {
    let seed = config.seed();
    let Some(train) = method.train_config(&config.train) else {
        let mut r = eval_zero_shot(task, &world.encoders, &world.tokens)?;
        r.seed = seed;
        return Ok((r, None));
    };
    let problem = world.problem(task, train.loss.tau, None)?;
    let state = run_training(&train, &problem, mapping.clone(), hook)?;
    let result = eval_trained(method, &state, &problem, task, seed)?;
    Ok((result, Some(state)))
}

/// Mean and sample standard deviation of one (method, shots) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: Method,
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub results: Vec<EvalResult>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, method: Method, shots: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method && r.shots == shots)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var))
}

/// Runs `methods` at every shot count and seed. The mapping is pre-trained
/// once per seed and shared by all methods and shot counts of that seed.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    shots: &[usize],
    seeds: &[u64],
    methods: &[Method],
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Parameter(format!("the ablation suite needs >= 3 seeds, got {}", seeds.len())));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        let config = base.with_seed(seed);
        let world = World::build(&config)?;
        let needs_mapping = methods.iter().any(|m| *m != Method::ZeroShot);
        let mapping = if needs_mapping {
            Some(world.pretrain(&config)?.0)
        } else {
            None
        };
        for &s in shots {
            let mut cfg = config.clone();
            cfg.task.shots = s;
            let task = world.task(&cfg.task, seed)?;
            for &method in methods {
                let (r, _) = match &mapping {
                    Some(m) => run_method(method, &world, m, &task, &cfg, &mut ())?,
                    None => (eval_zero_shot(&task, &world.encoders, &world.tokens)?, None),
                };
                results.push(EvalResult { seed, ..r });
            }
        }
    }
    let mut rows = Vec::new();
    for &s in shots {
        for &method in methods {
            let acc: Vec<f64> = results
                .iter()
                .filter(|r| r.method == method && r.shots == s)
                .map(|r| r.accuracy)
                .collect();
            let (mean, std) = mean_std(&acc);
            rows.push(AblationRow {
                method,
                shots: s,
                mean,
                std,
                runs: acc.len(),
            });
        }
    }
    Ok(AblationTable { results, rows })
}

/// One (epoch, class, prompt) point of the weight trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: u64,
    /// `None` for the average across classes.
    pub class: Option<usize>,
    pub prompt: usize,
    pub weight: f64,
    pub similarity: f64,
}

/// Per-class trace rows from the snapshots of a traced run, epoch 0 first.
pub fn trace_weights(state: &TrainState) -> Result<Vec<TraceRow>> {
    let snaps = traced_snapshots(state)?;
    let mut rows = Vec::new();
    for (epoch, snap) in snaps {
        for i in 0..snap.weights.rows() {
            for j in 0..snap.weights.cols() {
                rows.push(TraceRow {
                    epoch,
                    class: Some(i),
                    prompt: j,
                    weight: snap.weights.get(i, j),
                    similarity: snap.similarity.get(i, j),
                });
            }
        }
    }
    Ok(rows)
}

/// Per-prompt averages across classes for every traced epoch.
pub fn trace_summary(state: &TrainState) -> Result<Vec<TraceRow>> {
    let snaps = traced_snapshots(state)?;
    let mut rows = Vec::new();
    for (epoch, snap) in snaps {
        let (w, s) = class_means(snap);
        for (j, (weight, similarity)) in w.into_iter().zip(s).enumerate() {
            rows.push(TraceRow {
                epoch,
                class: None,
                prompt: j,
                weight,
                similarity,
            });
        }
    }
    Ok(rows)
}

fn traced_snapshots(state: &TrainState) -> Result<Vec<(u64, &crate::trainer::Snapshot)>> {
    let initial = state
        .initial
        .as_ref()
        .ok_or_else(|| Error::Input("run was not traced".into()))?;
    let mut out = alloc::vec![(0, initial)];
    for m in &state.metrics {
        let snap = m
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::Input(format!("epoch {} has no snapshot", m.epoch)))?;
        out.push((m.epoch, snap));
    }
    Ok(out)
}

/// Per-prompt means over classes of weights and similarities.
pub fn class_means(snap: &crate::trainer::Snapshot) -> (Vec<f64>, Vec<f64>) {
    let (k, m) = (snap.weights.rows(), snap.weights.cols());
    let mean = |mat: &RealMat| -> Vec<f64> {
        (0..m)
            .map(|j| (0..k).map(|i| mat.get(i, j)).sum::<f64>() / k as f64)
            .collect()
    };
    (mean(&snap.weights), mean(&snap.similarity))
}

/// Ranks starting at 1; tied values share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = alloc::vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `NaN` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("spearman inputs", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::Input("spearman needs at least two points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(cov / libm::sqrt(va * vb))
}

/// Spearman correlation between the class-averaged final weights and
/// prompt to class-name cosines of a traced run.
pub fn final_weight_similarity_correlation(state: &TrainState) -> Result<f64> {
    let snaps = traced_snapshots(state)?;
    let (_, last) = snaps.last().expect("initial snapshot present");
    let (w, s) = class_means(last);
    spearman(&w, &s)
}

pub fn final_weight_llm_similarity_correlation(state: &TrainState) -> Result<f64> {
    let snaps = traced_snapshots(state)?;
    let (_, last) = snaps.last().expect("initial snapshot present");
    let (w, _) = class_means(last);
    let k = last.weights.rows();
    let s: Vec<f64> = (0..last.weights.cols())
        .map(|j| (0..k).map(|i| last.llm_similarity.get(i, j)).sum::<f64>() / k as f64)
        .collect();
    spearman(&w, &s)
}
