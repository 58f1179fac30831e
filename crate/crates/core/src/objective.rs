//! The full model objective over the trainable parameter groups
//! `prompts`, `weights` (raw), `phi` and `psi`.
//!
//! Forward pass for a data batch and a prompt batch: every sampled prompt
//! `j` is combined with every class name `i` and encoded, `t_ij = g(p(V_j,
//! c_i))`. Classification scores the image features against `t_ij`, the
//! distillation term scores `phi(t_ij)` against the LLM class embeddings and
//! the mapping term cycles `t_ij` through `psi . phi`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::ops::Range;

use crate::encoders::{EncoderSet, TokenTable};
use crate::error::{Error, Result};
use crate::losses::{self, ClassEmbeddings, CosineSoftmax};
use crate::mapping::{self, MappingPair, PHI, PSI};
use crate::nn::MlpTrace;
use crate::num::{unit, unit_backward, GradBundle, RealMat, RealVec};
use crate::prompts::{normalize_row_backward, PromptBank, PromptBatch, WeightTable, PROMPTS, WEIGHTS};

/// Parameter groups in flattening order.
pub const GROUPS: [&str; 4] = [PROMPTS, WEIGHTS, PHI, PSI];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    Mapping,
    Distill,
    ClsUnweighted,
    ClsWeighted,
    /// `L_cls + alpha L_distill`, with the weighted or unweighted `L_cls`.
    Total { weighted: bool },
}

impl LossSpec {
    pub const ALL: [LossSpec; 6] = [
        LossSpec::Mapping,
        LossSpec::Distill,
        LossSpec::ClsUnweighted,
        LossSpec::ClsWeighted,
        LossSpec::Total { weighted: true },
        LossSpec::Total { weighted: false },
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossSpec::Mapping => "mapping",
            LossSpec::Distill => "distill",
            LossSpec::ClsUnweighted => "cls_unweighted",
            LossSpec::ClsWeighted => "cls_weighted",
            LossSpec::Total { weighted: true } => "total",
            LossSpec::Total { weighted: false } => "total_unweighted",
        }
    }

    fn cls(self) -> Option<bool> {
        match self {
            LossSpec::ClsUnweighted | LossSpec::Total { weighted: false } => Some(false),
            LossSpec::ClsWeighted | LossSpec::Total { weighted: true } => Some(true),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_distill: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            tau_distill: 0.07,
            alpha: 0.5,
            lambda: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_distill", self.tau_distill)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} = {v} must be > 0")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Every trainable parameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub bank: PromptBank,
    pub weights: WeightTable,
    pub mapping: MappingPair,
}

impl Params {
    fn sizes(&self) -> [usize; 4] {
        [
            self.bank.as_slice().len(),
            self.weights.raw().as_slice().len(),
            self.mapping.phi().param_count(),
            self.mapping.psi().param_count(),
        ]
    }

    /// Offsets of `group` inside [`Params::flatten`].
    pub fn group_range(&self, group: &str) -> Result<Range<usize>> {
        let idx = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        let sizes = self.sizes();
        let start: usize = sizes[..idx].iter().sum();
        Ok(start..start + sizes[idx])
    }

    /// Prompts, raw weights, `phi`, `psi`, concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.sizes().iter().sum());
        out.extend_from_slice(self.bank.as_slice());
        out.extend_from_slice(self.weights.raw().as_slice());
        out.extend(self.mapping.phi().params());
        out.extend(self.mapping.psi().params());
        out
    }

    /// Sets the entry at flat index `idx` (as laid out by [`Params::flatten`])
    /// and returns the name of its group.
    pub fn set_coordinate(&mut self, idx: usize, value: f64) -> Result<&'static str> {
        let sizes = self.sizes();
        let total: usize = sizes.iter().sum();
        if idx >= total || !value.is_finite() {
            return Err(Error::Input(format!("coordinate {idx} = {value} (of {total})")));
        }
        let mut local = idx;
        let mut group = 0;
        while local >= sizes[group] {
            local -= sizes[group];
            group += 1;
        }
        match group {
            0 => self.bank.set_entry(local, value),
            1 => {
                let m = self.weights.prompts();
                self.weights.set_raw(local / m, local % m, value);
            }
            2 => self.mapping.set_phi_param(local, value),
            _ => self.mapping.set_psi_param(local, value),
        }
        Ok(GROUPS[group])
    }

    /// A copy with every group replaced from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Params> {
        let total: usize = self.sizes().iter().sum();
        if flat.len() != total {
            return Err(Error::dim("flat parameters", total, flat.len()));
        }
        let mut out = self.clone();
        out.bank.set_flat(&flat[self.group_range(PROMPTS)?])?;
        let raw = RealMat::new(self.weights.classes(), self.weights.prompts(), flat[self.group_range(WEIGHTS)?].to_vec())?;
        out.weights = WeightTable::from_raw(raw);
        out.mapping.set_phi_params(&flat[self.group_range(PHI)?])?;
        out.mapping.set_psi_params(&flat[self.group_range(PSI)?])?;
        Ok(out)
    }
}

/// Frozen inputs of the objective for one data batch.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub encoders: &'a EncoderSet,
    pub tokens: &'a TokenTable,
    /// Token ids of each class name, in class order.
    pub class_tokens: &'a [Vec<usize>],
    pub classes: &'a ClassEmbeddings,
    /// Image-encoder outputs of the batch examples.
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

impl Inputs<'_> {
    fn check(&self, params: &Params, batch: &PromptBatch) -> Result<()> {
        let k = self.classes.num_classes();
        if self.class_tokens.len() != k || params.weights.classes() != k {
            return Err(Error::dim("classes", k, self.class_tokens.len().min(params.weights.classes())));
        }
        if self.features.len() != self.labels.len() {
            return Err(Error::dim("batch labels", self.features.len(), self.labels.len()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        let m = params.bank.num_prompts();
        if params.weights.prompts() != m {
            return Err(Error::dim("weight columns", m, params.weights.prompts()));
        }
        if batch.is_empty() || batch.indices.iter().any(|&j| j >= m) {
            return Err(Error::Input(format!("prompt batch {:?} invalid for {m} prompts", batch.indices)));
        }
        if params.bank.d_tok() != self.encoders.d_tok() {
            return Err(Error::dim("prompt width", self.encoders.d_tok(), params.bank.d_tok()));
        }
        Ok(())
    }
}

/// Loss components and gradients of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub spec: LossSpec,
    /// Value of the requested loss.
    pub value: f64,
    pub cls: Option<f64>,
    pub distill: Option<f64>,
    pub mapping: Option<f64>,
    /// Examples whose mixed probability was floored.
    pub clamped: usize,
    /// All four groups, full size; entries for unsampled prompts are zero.
    pub grad: GradBundle,
    /// `t_ij` for every class `i` and sampled prompt, `(class, prompt)` order.
    pub text: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct TextPass {
    traces: Vec<MlpTrace>,
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    pool_len: Vec<usize>,
}

/// Pooled token mean of prompt `j` followed by class `i`'s name tokens.
fn pooled_input(bank: &PromptBank, j: usize, class_tokens: &[usize], tokens: &TokenTable) -> (Vec<f64>, usize) {
    let mut pooled = bank.context_sum(j);
    let names = tokens.sum_embeddings(class_tokens);
    pooled.iter_mut().zip(&names).for_each(|(p, v)| *p += v);
    let len = bank.context_len() + class_tokens.len();
    pooled.iter_mut().for_each(|p| *p /= len as f64);
    (pooled, len)
}

fn text_pass(params: &Params, inputs: &Inputs<'_>, batch: &PromptBatch) -> Result<TextPass> {
    let k = inputs.class_tokens.len();
    let mut pass = TextPass {
        traces: Vec::with_capacity(k * batch.len()),
        units: Vec::with_capacity(k * batch.len()),
        norms: Vec::with_capacity(k * batch.len()),
        pool_len: Vec::with_capacity(k),
    };
    for ids in inputs.class_tokens {
        pass.pool_len.push(params.bank.context_len() + ids.len());
        for &j in &batch.indices {
            let (pooled, _) = pooled_input(&params.bank, j, ids, inputs.tokens);
            let trace = inputs.encoders.text_net().forward_trace(&pooled);
            let (u, n) = unit(trace.output(), "prompt text embedding")?;
            pass.traces.push(trace);
            pass.units.push(u);
            pass.norms.push(n);
        }
    }
    Ok(pass)
}

/// Evaluates `spec` and all its parameter gradients.
pub fn evaluate(spec: LossSpec, params: &Params, inputs: &Inputs<'_>, batch: &PromptBatch, cfg: &LossConfig) -> Result<Evaluation> {
    run(spec, params, inputs, batch, cfg, true, None)
}

/// Value of `spec` alone.
pub fn loss_value(spec: LossSpec, params: &Params, inputs: &Inputs<'_>, batch: &PromptBatch, cfg: &LossConfig) -> Result<f64> {
    run(spec, params, inputs, batch, cfg, false, None).map(|e| e.value)
}

/// Forward intermediates kept between value-only evaluations in which only
/// some parameter groups change. The caller reports each changed group via
/// [`ForwardCache::invalidate`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    text: Option<TextPass>,
    mapped: Option<Vec<Vec<f64>>>,
}

impl ForwardCache {
    pub fn invalidate(&mut self, group: &str) {
        match group {
            PROMPTS => {
                self.text = None;
                self.mapped = None;
            }
            PHI => self.mapped = None,
            _ => {}
        }
    }
}

/// [`loss_value`] reusing cached intermediates. Results are bit-identical
/// to the uncached path as long as every change was reported.
pub fn loss_value_cached(
    spec: LossSpec,
    params: &Params,
    inputs: &Inputs<'_>,
    batch: &PromptBatch,
    cfg: &LossConfig,
    cache: &mut ForwardCache,
) -> Result<f64> {
    run(spec, params, inputs, batch, cfg, false, Some(cache)).map(|e| e.value)
}

/// Gradients of `spec` for the requested groups only.
pub fn grad(
    spec: LossSpec,
    params: &Params,
    inputs: &Inputs<'_>,
    batch: &PromptBatch,
    cfg: &LossConfig,
    groups: &[&str],
) -> Result<GradBundle> {
    if let Some(bad) = groups.iter().find(|g| !GROUPS.contains(g)) {
        return Err(Error::UnknownGroup(bad.to_string()));
    }
    let eval = evaluate(spec, params, inputs, batch, cfg)?;
    let mut out = GradBundle::new(eval.value);
    for g in groups {
        out.insert(g, eval.grad.try_get(g)?.to_vec());
    }
    Ok(out)
}

fn run(
    spec: LossSpec,
    params: &Params,
    inputs: &Inputs<'_>,
    batch: &PromptBatch,
    cfg: &LossConfig,
    want_grad: bool,
    cache: Option<&mut ForwardCache>,
) -> Result<Evaluation> {
    cfg.validate()?;
    inputs.check(params, batch)?;
    let k = inputs.class_tokens.len();
    let mb = batch.len();
    let (text_slot, mut mapped_slot) = match cache {
        Some(c) => (Some(&mut c.text), Some(&mut c.mapped)),
        None => (None, None),
    };
    let owned;
    let pass: &TextPass = match text_slot {
        Some(slot) => {
            if slot.is_none() {
                *slot = Some(text_pass(params, inputs, batch)?);
            }
            slot.as_ref().expect("just filled")
        }
        None => {
            owned = text_pass(params, inputs, batch)?;
            &owned
        }
    };
    let at = |i: usize, jj: usize| i * mb + jj;

    // Gradient on each unit text embedding, and separately on the raw one.
    let (mut d_unit, mut d_raw, mut g_weights, mut g_phi, mut g_psi) = if want_grad {
        let d_vlm = inputs.encoders.d_vlm();
        (
            alloc::vec![alloc::vec![0.0; d_vlm]; k * mb],
            alloc::vec![alloc::vec![0.0; d_vlm]; k * mb],
            alloc::vec![0.0; k * params.weights.prompts()],
            alloc::vec![0.0; params.mapping.phi().param_count()],
            alloc::vec![0.0; params.mapping.psi().param_count()],
        )
    } else {
        Default::default()
    };
    let mut value = 0.0;
    let (mut cls_value, mut distill_value, mut mapping_value) = (None, None, None);
    let mut clamped = 0;

    if let Some(weighted) = spec.cls() {
        if inputs.features.is_empty() {
            return Err(Error::Input("classification loss over an empty data batch".into()));
        }
        // Per example, per sampled prompt: softmax over classes.
        let z_hats = inputs
            .features
            .iter()
            .map(|z| unit(z, "image feature").map(|(u, _)| u))
            .collect::<Result<Vec<_>>>()?;
        let mut softmaxes = Vec::with_capacity(inputs.features.len() * mb);
        let mut true_probs = Vec::with_capacity(inputs.features.len());
        for (z_hat, &y) in z_hats.iter().zip(inputs.labels) {
            let mut row = Vec::with_capacity(mb);
            for jj in 0..mb {
                let ws: Vec<&[f64]> = (0..k).map(|i| pass.units[at(i, jj)].as_slice()).collect();
                let cs = CosineSoftmax::from_units(z_hat, ws, cfg.tau);
                row.push(cs.probs[y]);
                softmaxes.push(cs);
            }
            true_probs.push(row);
        }
        let out = if weighted {
            let rows: Vec<Vec<f64>> = (0..k).map(|i| params.weights.batch_row(i, batch)).collect();
            let raw: Vec<Vec<f64>> = (0..k)
                .map(|i| batch.indices.iter().map(|&j| params.weights.raw().get(i, j)).collect())
                .collect();
            let out = losses::cls_loss_weighted(&true_probs, inputs.labels, &rows, &raw, cfg.lambda)?;
            if want_grad {
                let d_norm = out.grad.try_get(losses::WEIGHTS)?;
                let d_l1 = out.grad.try_get(losses::RAW_WEIGHTS)?;
                let m_all = params.weights.prompts();
                for i in 0..k {
                    let d = normalize_row_backward(&raw[i], &d_norm[i * mb..(i + 1) * mb]);
                    for (jj, &j) in batch.indices.iter().enumerate() {
                        g_weights[i * m_all + j] += d[jj] + d_l1[i * mb + jj];
                    }
                }
            }
            out
        } else {
            losses::cls_loss_unweighted(&true_probs)?
        };
        clamped = out.clamped;
        cls_value = Some(out.grad.value);
        value += out.grad.value;
        if want_grad {
            let d_probs = out.grad.try_get(losses::PROBS)?;
            for (b, &y) in inputs.labels.iter().enumerate() {
                for jj in 0..mb {
                    let cs = &softmaxes[b * mb + jj];
                    let (_, d_w) = cs.backward_units(&cs.d_logits_prob(y, d_probs[b * mb + jj]));
                    for (i, dw) in d_w.iter().enumerate() {
                        d_unit[at(i, jj)].iter_mut().zip(dw).for_each(|(a, v)| *a += v);
                    }
                }
            }
        }
    }

    let distill_coef = match spec {
        LossSpec::Distill => 1.0,
        LossSpec::Total { .. } => cfg.alpha,
        _ => 0.0,
    };
    if matches!(spec, LossSpec::Distill | LossSpec::Total { .. }) {
        let phi = params.mapping.phi();
        let traces: Vec<MlpTrace> = if want_grad {
            pass.units.iter().map(|u| phi.forward_trace(u)).collect()
        } else {
            Vec::new()
        };
        let outputs = if want_grad {
            traces.iter().map(|t| t.output().to_vec()).collect()
        } else {
            phi_outputs(params, pass, mapped_slot.as_deref_mut()).to_vec()
        };
        let mapped: Vec<Vec<RealVec>> = outputs
            .chunks(mb)
            .map(|row| row.iter().map(|u| RealVec::new(u.clone())).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let out = losses::distill_loss(&mapped, inputs.classes.llm(), cfg.tau_distill)?;
        distill_value = Some(out.value);
        value += distill_coef * out.value;
        if want_grad && distill_coef != 0.0 {
            let d_mapped = out.try_get(losses::MAPPED)?;
            let d_llm = params.mapping.d_llm();
            let phi_grad_on = !params.mapping.phi_frozen();
            for (n, trace) in traces.iter().enumerate() {
                let d: Vec<f64> = d_mapped[n * d_llm..(n + 1) * d_llm].iter().map(|v| distill_coef * v).collect();
                let pg = if phi_grad_on { Some(g_phi.as_mut_slice()) } else { None };
                let d_in = phi.backward(trace, &d, pg);
                d_unit[n].iter_mut().zip(&d_in).for_each(|(a, v)| *a += v);
            }
        }
    }

    if spec == LossSpec::Mapping {
        let text: Vec<Vec<f64>> = pass.traces.iter().map(|t| t.output().to_vec()).collect();
        let v = if want_grad {
            let (out, d_in) = mapping::mapping_loss_with_inputs(&params.mapping, &text)?;
            g_phi = out.try_get(PHI)?.to_vec();
            g_psi = out.try_get(PSI)?.to_vec();
            d_raw = d_in;
            out.value
        } else {
            let mid = phi_outputs(params, pass, mapped_slot);
            mapping::cycle_value(&params.mapping, &pass.units, &mid)?
        };
        mapping_value = Some(v);
        value += v;
    }

    let mut grad = GradBundle::new(value);
    if want_grad {
        let mut g_prompts = alloc::vec![0.0; params.bank.as_slice().len()];
        let block = params.bank.context_len() * params.bank.d_tok();
        let d_tok = params.bank.d_tok();
        let text_net = inputs.encoders.text_net();
        for i in 0..k {
            for (jj, &j) in batch.indices.iter().enumerate() {
                let n = at(i, jj);
                let mut d_t = unit_backward(&pass.units[n], pass.norms[n], &d_unit[n]);
                d_t.iter_mut().zip(&d_raw[n]).for_each(|(a, v)| *a += v);
                if d_t.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let d_pooled = text_net.backward(&pass.traces[n], &d_t, None);
                let scale = 1.0 / pass.pool_len[i] as f64;
                for row in g_prompts[j * block..(j + 1) * block].chunks_mut(d_tok) {
                    row.iter_mut().zip(&d_pooled).for_each(|(a, v)| *a += scale * v);
                }
            }
        }
        grad.insert(PROMPTS, g_prompts);
        grad.insert(WEIGHTS, g_weights);
        grad.insert(PHI, g_phi);
        grad.insert(PSI, g_psi);
    }

    Ok(Evaluation {
        spec,
        value,
        cls: cls_value,
        distill: distill_value,
        mapping: mapping_value,
        clamped,
        grad,
        text: if want_grad {
            pass.traces.iter().map(|t| t.output().to_vec()).collect()
        } else {
            Vec::new()
        },
    })
}

fn phi_outputs<'c>(params: &Params, pass: &TextPass, slot: Option<&'c mut Option<Vec<Vec<f64>>>>) -> alloc::borrow::Cow<'c, [Vec<f64>]> {
    let compute = || pass.units.iter().map(|u| params.mapping.phi().forward(u)).collect::<Vec<_>>();
    match slot {
        Some(s) => alloc::borrow::Cow::Borrowed(s.get_or_insert_with(compute).as_slice()),
        None => alloc::borrow::Cow::Owned(compute()),
    }
}

/// Text embeddings `t_ij` of every class (rows) and prompt (columns).
pub fn prompt_embeddings(
    bank: &PromptBank,
    encoders: &EncoderSet,
    tokens: &TokenTable,
    class_tokens: &[Vec<usize>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    class_tokens
        .iter()
        .map(|ids| {
            (0..bank.num_prompts())
                .map(|j| {
                    let (pooled, _) = pooled_input(bank, j, ids, tokens);
                    let t = encoders.encode_pooled(&pooled);
                    unit(&t, "prompt text embedding").map(|(u, _)| u)
                })
                .collect()
        })
        .collect()
}

/// Inference scores `(1/M) sum_j w_ij P_j(i | z)` for one image feature,
/// given unit prompt embeddings from [`prompt_embeddings`].
pub fn class_scores(z: &[f64], units: &[Vec<Vec<f64>>], weights: &RealMat, tau: f64) -> Result<Vec<f64>> {
    let k = units.len();
    let m = units.first().map_or(0, Vec::len);
    if k == 0 || m == 0 || weights.rows() != k || weights.cols() != m {
        return Err(Error::dim("class score weights", k * m, weights.rows() * weights.cols()));
    }
    let (z_hat, _) = unit(z, "image feature")?;
    let mut scores = alloc::vec![0.0; k];
    for j in 0..m {
        let ws: Vec<&[f64]> = units.iter().map(|row| row[j].as_slice()).collect();
        let cs = CosineSoftmax::from_units(&z_hat, ws, tau);
        for (i, s) in scores.iter_mut().enumerate() {
            *s += weights.get(i, j) * cs.probs[i] / m as f64;
        }
    }
    Ok(scores)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
