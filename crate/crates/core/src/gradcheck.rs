//! Finite-difference verification of every registered loss on random small
//! instances.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{synthetic_names, EmbeddingBackend, EncoderConfig, EncoderSet, TokenTable, ToyBackend};
use crate::error::{Error, Result};
use crate::losses::ClassEmbeddings;
use crate::mapping::MappingPair;
use crate::num::{derive_seed, finite_diff_grad, rel_err, RealMat, SeededRng};
use crate::objective::{evaluate, loss_value_cached, ForwardCache, Inputs, LossConfig, LossSpec, Params, GROUPS};
use crate::prompts::{sample_prompts, PromptBank, WeightTable};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub h: f64,
    pub tolerance: f64,
    pub classes: usize,
    pub prompts: usize,
    pub context_len: usize,
    pub d_tok: usize,
    pub d_vlm: usize,
    pub d_llm: usize,
    pub batch: usize,
    pub loss: LossConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 10,
            h: 1e-5,
            tolerance: 1e-4,
            classes: 3,
            prompts: 4,
            context_len: 2,
            d_tok: 8,
            d_vlm: 16,
            d_llm: 24,
            batch: 6,
            loss: LossConfig::default(),
        }
    }
}

/// Test hook: negate the analytic gradient of one loss before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    FlipSign(LossSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Instance and flat coordinate of the worst entry.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<16} max_rel_err={:.3e} coords={} worst=instance {} coord {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.coordinates,
                    c.worst.0,
                    c.worst.1
                )
            })
            .collect()
    }
}

/// Owned random instance of the full objective.
pub struct Instance {
    pub encoders: EncoderSet,
    pub tokens: TokenTable,
    pub class_tokens: Vec<Vec<usize>>,
    pub classes: ClassEmbeddings,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub params: Params,
    pub batch: crate::prompts::PromptBatch,
}

impl Instance {
    pub fn random(cfg: &GradCheckConfig, index: usize) -> Result<Self> {
        let seed = derive_seed(cfg.seed, &format!("gradcheck/{index}"));
        let enc_cfg = EncoderConfig {
            seed,
            d_tok: cfg.d_tok,
            d_vlm: cfg.d_vlm,
            d_llm: cfg.d_llm,
            d_img: cfg.d_vlm,
            vocab_size: 64,
            ..EncoderConfig::default()
        };
        let names = synthetic_names(cfg.classes, seed);
        let tokens = TokenTable::build(&enc_cfg, &names)?;
        let encoders = EncoderSet::new(enc_cfg)?;
        let class_tokens = names
            .iter()
            .map(|c| tokens.tokens(c).map(<[usize]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let backend = ToyBackend::new(&encoders, &tokens);
        let mut vlm = Vec::with_capacity(names.len());
        let mut llm = Vec::with_capacity(names.len());
        for c in &names {
            vlm.push(encoders.encode_class_name(&tokens, c)?);
            llm.push(backend.embed(c)?);
        }
        let classes = ClassEmbeddings::new(vlm, llm, cfg.loss.tau)?;

        let mut rng = SeededRng::derive(seed, "instance");
        let features = (0..cfg.batch)
            .map(|_| encoders.encode_image_f(&rng.normal_vec(cfg.d_vlm, 1.0)).map(|v| v.into_inner()))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..cfg.batch).map(|_| rng.below(cfg.classes)).collect();
        let bank = PromptBank::from_flat(
            cfg.prompts,
            cfg.context_len,
            cfg.d_tok,
            rng.normal_vec(cfg.prompts * cfg.context_len * cfg.d_tok, 0.3),
        )?;
        let raw = (0..cfg.classes * cfg.prompts).map(|_| 0.2 + rng.uniform()).collect();
        let weights = WeightTable::from_raw(RealMat::new(cfg.classes, cfg.prompts, raw)?);
        let mapping = MappingPair::new(cfg.d_vlm, cfg.d_llm, &mut rng);
        let size = 1 + rng.below(cfg.prompts);
        let batch = sample_prompts(cfg.prompts, size, &mut rng)?;
        Ok(Instance {
            encoders,
            tokens,
            class_tokens,
            classes,
            features,
            labels,
            params: Params { bank, weights, mapping },
            batch,
        })
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
}

/// Analytic and finite-difference gradients of `spec` over every parameter.
pub fn compare(spec: LossSpec, inst: &Instance, cfg: &GradCheckConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let eval = evaluate(spec, &inst.params, &inst.inputs(), &inst.batch, &cfg.loss)?;
    let analytic: Vec<f64> = GROUPS
        .iter()
        .map(|g| eval.grad.try_get(g).map(|v| v.to_vec()))
        .collect::<Result<Vec<_>>>()?
        .concat();

    // The probe differs from the previous one in at most two coordinates,
    // so the parameters are patched in place and untouched stages reused.
    let mut current = inst.params.flatten();
    let mut params = inst.params.clone();
    let mut cache = ForwardCache::default();
    let mut failure = None;
    let inputs = inst.inputs();
    let fd = finite_diff_grad(
        |x| {
            const CHUNK: usize = 64;
            for (c, (cur, new)) in current.chunks_mut(CHUNK).zip(x.chunks(CHUNK)).enumerate() {
                let diff = cur.iter().zip(new).fold(0u64, |acc, (a, b)| acc | (a.to_bits() ^ b.to_bits()));
                if diff == 0 {
                    continue;
                }
                for (off, (a, b)) in cur.iter_mut().zip(new).enumerate() {
                    if a.to_bits() != b.to_bits() {
                        *a = *b;
                        let group = params.set_coordinate(c * CHUNK + off, *b).expect("finite probe");
                        cache.invalidate(group);
                    }
                }
            }
            match loss_value_cached(spec, &params, &inputs, &inst.batch, &cfg.loss, &mut cache) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &inst.params.flatten(),
        cfg.h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((analytic, fd?.into_inner()))
}

/// Runs every loss in [`LossSpec::ALL`] over `cfg.instances` random instances.
pub fn run_gradcheck(cfg: &GradCheckConfig, mutation: Mutation) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(Error::Parameter("gradcheck needs at least one instance".into()));
    }
    let instances = (0..cfg.instances)
        .map(|i| Instance::random(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::with_capacity(LossSpec::ALL.len());
    for spec in LossSpec::ALL {
        let mut worst = (0.0, (0, 0));
        let mut coordinates = 0;
        for (n, inst) in instances.iter().enumerate() {
            let (mut analytic, fd) = compare(spec, inst, cfg)?;
            if mutation == Mutation::FlipSign(spec) {
                analytic.iter_mut().for_each(|v| *v = -*v);
            }
            coordinates += analytic.len();
            for (idx, (a, g)) in analytic.iter().zip(&fd).enumerate() {
                let e = rel_err(*a, *g);
                if e > worst.0 {
                    worst = (e, (n, idx));
                }
            }
        }
        checks.push(LossCheck {
            name: spec.name(),
            max_rel_err: worst.0,
            worst: worst.1,
            coordinates,
            passed: worst.0 < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        checks,
        tolerance: cfg.tolerance,
    })
}
