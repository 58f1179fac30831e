//! Objectives on embeddings and probabilities: the cosine/temperature class
//! probability, distillation against LLM class embeddings, the unweighted and
//! weighted multi-prompt classification losses, and their combination.
//!
//! Gradients here stop at the loss inputs (mapped prompts, probabilities,
//! weights); [`crate::objective`] chains them back to the parameters.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{dot, softmax_unchecked, unit, unit_backward, GradBundle, RealVec};

pub const MAPPED: &str = "mapped";
pub const PROBS: &str = "probs";
pub const WEIGHTS: &str = "weights";
pub const RAW_WEIGHTS: &str = "raw_weights";

/// Floor applied to a mixed probability before its log.
pub const PROB_FLOOR: f64 = 1e-30;

/// Class-name embeddings in both spaces plus the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    vlm: Vec<RealVec>,
    llm: Vec<RealVec>,
    tau: f64,
}

impl ClassEmbeddings {
    pub fn new(vlm: Vec<RealVec>, llm: Vec<RealVec>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if vlm.is_empty() || vlm.len() != llm.len() {
            return Err(Error::dim("class embeddings", vlm.len(), llm.len()));
        }
        for set in [&vlm, &llm] {
            let d = set[0].dim();
            if let Some(bad) = set.iter().find(|v| v.dim() != d) {
                return Err(Error::dim("class embedding width", d, bad.dim()));
            }
        }
        Ok(ClassEmbeddings { vlm, llm, tau })
    }

    pub fn num_classes(&self) -> usize {
        self.vlm.len()
    }

    pub fn vlm(&self) -> &[RealVec] {
        &self.vlm
    }

    pub fn llm(&self) -> &[RealVec] {
        &self.llm
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

/// Softmax over `cos(z, w_k) / tau` for unit `z` and `w_k`, recorded for
/// the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CosineSoftmax<'a> {
    z_hat: &'a [f64],
    w_hat: Vec<&'a [f64]>,
    tau: f64,
    pub(crate) probs: Vec<f64>,
}

impl<'a> CosineSoftmax<'a> {
    pub(crate) fn from_units(z_hat: &'a [f64], w_hat: Vec<&'a [f64]>, tau: f64) -> Self {
        let logits: Vec<f64> = w_hat.iter().map(|w| dot(z_hat, w)).collect();
        let probs = softmax_unchecked(&logits, tau);
        CosineSoftmax { z_hat, w_hat, tau, probs }
    }

    /// `log p_k` without the round trip through `p_k`.
    pub(crate) fn log_prob(&self, k: usize) -> f64 {
        let logits: Vec<f64> = self.w_hat.iter().map(|w| dot(self.z_hat, w) / self.tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
        logits[k] - max - libm::log(lse)
    }

    /// Gradients on the unit query and the unit class vectors given the
    /// gradient on the logits `cos / tau`.
    pub(crate) fn backward_units(&self, d_logits: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut d_z = alloc::vec![0.0; self.z_hat.len()];
        let mut d_w = Vec::with_capacity(self.w_hat.len());
        for (w, dl) in self.w_hat.iter().zip(d_logits) {
            let dc = dl / self.tau;
            d_z.iter_mut().zip(w.iter()).for_each(|(d, v)| *d += dc * v);
            d_w.push(self.z_hat.iter().map(|v| dc * v).collect());
        }
        (d_z, d_w)
    }

    /// Logit gradient of `log p_k`, scaled by `coef`.
    pub(crate) fn d_logits_log_prob(&self, k: usize, coef: f64) -> Vec<f64> {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| coef * (if i == k { 1.0 } else { 0.0 } - p))
            .collect()
    }

    /// Logit gradient of `p_k`, scaled by `coef`.
    pub(crate) fn d_logits_prob(&self, k: usize, coef: f64) -> Vec<f64> {
        let pk = self.probs[k];
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| coef * pk * (if i == k { 1.0 } else { 0.0 } - p))
            .collect()
    }
}

/// Probability of each class given query `z` and one embedding per class.
pub fn predict_probs(z: &[f64], prompt_embs: &[RealVec], tau: f64) -> Result<RealVec> {
    if prompt_embs.is_empty() {
        return Err(Error::Input("no class embeddings".into()));
    }
    check_tau(tau)?;
    let (z_hat, _) = unit(z, "query embedding")?;
    let mut w_hat = Vec::with_capacity(prompt_embs.len());
    for w in prompt_embs {
        if w.dim() != z.len() {
            return Err(Error::dim("class embedding", z.len(), w.dim()));
        }
        w_hat.push(unit(w, "class embedding")?.0);
    }
    let cs = CosineSoftmax::from_units(&z_hat, w_hat.iter().map(Vec::as_slice).collect(), tau);
    RealVec::new(cs.probs)
}

/// `-(1/K) sum_i (1/M') sum_j log P(i | mapped[i][j])`, where `P` is the
/// cosine softmax over the `K` LLM class embeddings. Gradient group
/// [`MAPPED`] is laid out `(class, prompt, dim)`.
pub fn distill_loss(mapped: &[Vec<RealVec>], llm_class: &[RealVec], tau: f64) -> Result<GradBundle> {
    let k = llm_class.len();
    if k == 0 || mapped.len() != k {
        return Err(Error::dim("distillation classes", k, mapped.len()));
    }
    let m = mapped[0].len();
    if m == 0 || mapped.iter().any(|row| row.len() != m) {
        return Err(Error::Input("distillation needs the same M' >= 1 prompts per class".into()));
    }
    let mut llm_hat = Vec::with_capacity(k);
    for h in llm_class {
        llm_hat.push(unit(h, "LLM class embedding")?.0);
    }
    let d = llm_class[0].dim();
    let coef = 1.0 / (k * m) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(k * m * d);
    for (i, row) in mapped.iter().enumerate() {
        for u in row {
            if u.dim() != d {
                return Err(Error::dim("mapped prompt", d, u.dim()));
            }
            let (u_hat, u_norm) = unit(u, "mapped prompt")?;
            let cs = CosineSoftmax::from_units(&u_hat, llm_hat.iter().map(Vec::as_slice).collect(), tau);
            value -= coef * cs.log_prob(i);
            let (d_u_hat, _) = cs.backward_units(&cs.d_logits_log_prob(i, -coef));
            grad.extend(unit_backward(&u_hat, u_norm, &d_u_hat));
        }
    }
    Ok(GradBundle::new(value).with(MAPPED, grad))
}

/// A classification loss plus the number of examples whose mixed
/// probability hit [`PROB_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub grad: GradBundle,
    pub clamped: usize,
}

fn check_probs(true_probs: &[Vec<f64>]) -> Result<usize> {
    let m = true_probs.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(Error::Input("classification loss needs >= 1 example and prompt".into()));
    }
    for row in true_probs {
        if row.len() != m {
            return Err(Error::dim("probability row", m, row.len()));
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("probabilities must lie in [0, 1]".into()));
        }
    }
    Ok(m)
}

/// `-(1/B) sum_b log((1/M') sum_j true_probs[b][j])`; row `b` holds the
/// probability each sampled prompt assigns to example `b`'s label.
pub fn cls_loss_unweighted(true_probs: &[Vec<f64>]) -> Result<ClsLoss> {
    let m = check_probs(true_probs)?;
    let uniform = alloc::vec![1.0; m];
    mixed_cls(true_probs, |_| &uniform)
}

/// `-(1/B) sum_b log((1/M') sum_j w[y_b][j] true_probs[b][j]) + lambda sum |raw|`.
/// `weights` rows are the normalized weights over the sampled prompts and
/// `raw` the matching raw entries. Groups: [`PROBS`], [`WEIGHTS`] (on the
/// normalized weights, `K x M'`) and [`RAW_WEIGHTS`] (the L1 term alone).
pub fn cls_loss_weighted(
    true_probs: &[Vec<f64>],
    labels: &[usize],
    weights: &[Vec<f64>],
    raw: &[Vec<f64>],
    lambda: f64,
) -> Result<ClsLoss> {
    let m = check_probs(true_probs)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("lambda {lambda} must be >= 0")));
    }
    if labels.len() != true_probs.len() {
        return Err(Error::dim("labels", true_probs.len(), labels.len()));
    }
    if raw.len() != weights.len() {
        return Err(Error::dim("raw weight rows", weights.len(), raw.len()));
    }
    for (w, r) in weights.iter().zip(raw) {
        if w.len() != m || r.len() != m {
            return Err(Error::dim("weight row", m, w.len().max(r.len())));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= weights.len()) {
        return Err(Error::Input(format!("label {bad} out of range for {} classes", weights.len())));
    }
    let mut out = mixed_cls(true_probs, |b| &weights[labels[b]])?;

    let b = true_probs.len() as f64;
    let mut g_w = alloc::vec![0.0; weights.len() * m];
    let g_p = out.grad.get(PROBS).expect("probs group").to_vec();
    for (p, y) in true_probs.iter().zip(labels) {
        let w = &weights[*y];
        let mix: f64 = w.iter().zip(p).map(|(w, p)| w * p).sum::<f64>() / m as f64;
        if mix < PROB_FLOOR {
            continue;
        }
        for j in 0..m {
            g_w[y * m + j] -= p[j] / (m as f64 * mix * b);
        }
    }
    let mut l1 = 0.0;
    let mut g_raw = Vec::with_capacity(raw.len() * m);
    for r in raw.iter().flatten() {
        l1 += r.abs();
        g_raw.push(if *r >= 0.0 { lambda } else { -lambda });
    }
    let value = out.grad.value + lambda * l1;
    out.grad = GradBundle::new(value)
        .with(PROBS, g_p)
        .with(WEIGHTS, g_w)
        .with(RAW_WEIGHTS, g_raw);
    Ok(out)
}

fn mixed_cls<'w, F>(true_probs: &[Vec<f64>], weights_for: F) -> Result<ClsLoss>
where
    F: Fn(usize) -> &'w [f64],
{
    let m = true_probs[0].len() as f64;
    let b = true_probs.len() as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    let mut grad = Vec::with_capacity(true_probs.len() * true_probs[0].len());
    for (row, p) in true_probs.iter().enumerate() {
        let w = weights_for(row);
        let mix: f64 = w.iter().zip(p).map(|(w, p)| w * p).sum::<f64>() / m;
        if mix < PROB_FLOOR {
            clamped += 1;
            value -= libm::log(PROB_FLOOR) / b;
            grad.extend(core::iter::repeat_n(0.0, p.len()));
        } else {
            value -= libm::log(mix) / b;
            grad.extend(w.iter().map(|w| -w / (m * mix * b)));
        }
    }
    Ok(ClsLoss {
        grad: GradBundle::new(value).with(PROBS, grad),
        clamped,
    })
}

/// `cls + alpha * distill`, gradients summed per group.
pub fn total_loss(cls: &GradBundle, distill: &GradBundle, alpha: f64) -> Result<GradBundle> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha {alpha} must be >= 0")));
    }
    Ok(cls.add_scaled(distill, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{finite_diff_grad, max_rel_err, SeededRng};
    use proptest::prelude::*;

    fn rv(v: &[f64]) -> RealVec {
        RealVec::new(v.to_vec()).unwrap()
    }

    fn basis(k: usize, d: usize) -> Vec<RealVec> {
        (0..k)
            .map(|i| {
                let mut v = alloc::vec![0.0; d];
                v[i] = 1.0;
                rv(&v)
            })
            .collect()
    }

    #[test]
    fn identical_prompts_give_uniform_probs() {
        let w = alloc::vec![rv(&[1.0, 2.0]); 4];
        let p = predict_probs(&[0.3, -0.2], &w, 0.07).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sharp_temperature_concentrates_on_aligned_class() {
        let p = predict_probs(&[1.0, 0.0, 0.0], &basis(3, 3), 1e-3).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
    }

    #[test]
    fn two_class_probability_example() {
        let s = libm::sqrt(1.0 - 0.81);
        let z = [0.9, s, 0.0];
        let b = 0.1 / s;
        let w = [rv(&[1.0, 0.0, 0.0]), rv(&[0.0, b, libm::sqrt(1.0 - b * b)])];
        let p = predict_probs(&z, &w, 0.07).unwrap();
        // 1 / (1 + exp(-0.8 / 0.07)) at 30 digits
        assert!((p[0] - 0.999_989_119_978_154_2).abs() < 1e-12);
        assert!((p[1] - 1.088_002_184_580e-5).abs() < 1e-12);
        assert!(predict_probs(&[0.0; 3], &w, 0.07).is_err());
        assert!(predict_probs(&z, &w, 0.0).is_err());
    }

    #[test]
    fn distill_single_class_is_zero() {
        let mapped = alloc::vec![alloc::vec![rv(&[0.3, 0.1]), rv(&[-1.0, 2.0])]];
        let b = distill_loss(&mapped, &[rv(&[1.0, 1.0])], 0.07).unwrap();
        assert_eq!(b.value, 0.0);
    }

    #[test]
    fn distill_symmetric_pair_is_log_two() {
        let h = [rv(&[1.0, 0.0, 0.0]), rv(&[0.0, 1.0, 0.0])];
        let mapped = alloc::vec![alloc::vec![rv(&[0.0, 0.0, 1.0])]; 2];
        let b = distill_loss(&mapped, &h, 0.07).unwrap();
        assert!((b.value - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn distill_on_target_five_classes() {
        let h = basis(5, 8);
        let mapped: Vec<Vec<RealVec>> = h.iter().map(|v| alloc::vec![v.clone(), v.clone()]).collect();
        let b = distill_loss(&mapped, &h, 0.07).unwrap();
        // log(1 + 4 exp(-1/0.07)) evaluated at 30 digits
        assert!((b.value - 2.499_496_680_040_807e-6).abs() < 1e-15);
        let direct = libm::log1p(4.0 * libm::exp(-1.0 / 0.07));
        assert!((b.value - direct).abs() < 1e-15);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let (k, m, d) = (3, 2, 5);
        let h: Vec<RealVec> = (0..k).map(|_| rv(&rng.normal_vec(d, 1.0))).collect();
        let flat = rng.normal_vec(k * m * d, 1.0);
        let build = |x: &[f64]| -> Vec<Vec<RealVec>> {
            x.chunks(m * d).map(|c| c.chunks(d).map(rv).collect()).collect()
        };
        let b = distill_loss(&build(&flat), &h, 0.5).unwrap();
        let fd = finite_diff_grad(|x| distill_loss(&build(x), &h, 0.5).unwrap().value, &flat, 1e-5).unwrap();
        assert!(max_rel_err(b.get(MAPPED).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn unweighted_examples() {
        let one = cls_loss_unweighted(&[alloc::vec![0.25]]).unwrap();
        assert!((one.grad.value + libm::log(0.25)).abs() < 1e-15);
        let chance = cls_loss_unweighted(&alloc::vec![alloc::vec![1.0 / 3.0; 4]; 5]).unwrap();
        assert!((chance.grad.value - libm::log(3.0)).abs() < 1e-15);
        let mixed = cls_loss_unweighted(&[alloc::vec![0.5, 0.7]]).unwrap();
        assert!((mixed.grad.value - 0.510_825_623_765_990_7).abs() < 1e-15);
        let zero = cls_loss_unweighted(&[alloc::vec![0.0, 0.0]]).unwrap();
        assert_eq!(zero.clamped, 1);
        assert!((zero.grad.value + libm::log(PROB_FLOOR)).abs() < 1e-9);
    }

    fn probs_instance(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
        let mut rng = SeededRng::new(seed);
        let probs = (0..5).map(|_| (0..3).map(|_| 0.05 + 0.9 * rng.uniform()).collect()).collect();
        let labels = (0..5).map(|_| rng.below(4)).collect();
        let raw = (0..4).map(|_| (0..3).map(|_| 0.1 + rng.uniform()).collect()).collect();
        (probs, labels, raw)
    }

    fn normalize(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
        raw.iter().map(|r| crate::prompts::normalize_row(r)).collect()
    }

    #[test]
    fn uniform_weights_shift_value_by_log_m() {
        let (probs, labels, _) = probs_instance(0);
        let uniform = alloc::vec![alloc::vec![1.0 / 3.0; 3]; 4];
        let w = cls_loss_weighted(&probs, &labels, &uniform, &uniform, 0.0).unwrap();
        let u = cls_loss_unweighted(&probs).unwrap();
        assert!((w.grad.value - (u.grad.value + libm::log(3.0))).abs() < 1e-12);
        let (gw, gu) = (w.grad.get(PROBS).unwrap(), u.grad.get(PROBS).unwrap());
        assert!(gw.iter().zip(gu.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn one_hot_weights_select_a_prompt() {
        let (probs, labels, _) = probs_instance(1);
        let hot = alloc::vec![alloc::vec![0.0, 1.0, 0.0]; 4];
        let w = cls_loss_weighted(&probs, &labels, &hot, &hot, 0.0).unwrap();
        let direct: f64 = -probs.iter().map(|p| libm::log(p[1] / 3.0)).sum::<f64>() / 5.0;
        assert!((w.grad.value - direct).abs() < 1e-14);
    }

    #[test]
    fn weighted_gradients_match_finite_differences() {
        let (probs, labels, raw) = probs_instance(2);
        let lambda = 0.05;
        let w = normalize(&raw);
        let out = cls_loss_weighted(&probs, &labels, &w, &raw, lambda).unwrap();
        let f = |p: &[f64], wf: &[f64], r: &[f64]| {
            let p: Vec<Vec<f64>> = p.chunks(3).map(<[f64]>::to_vec).collect();
            let wv: Vec<Vec<f64>> = wf.chunks(3).map(<[f64]>::to_vec).collect();
            let rv: Vec<Vec<f64>> = r.chunks(3).map(<[f64]>::to_vec).collect();
            cls_loss_weighted(&p, &labels, &wv, &rv, lambda).unwrap().grad.value
        };
        let (pf, wf, rf) = (probs.concat(), w.concat(), raw.concat());
        let fd_p = finite_diff_grad(|x| f(x, &wf, &rf), &pf, 1e-5).unwrap();
        let fd_w = finite_diff_grad(|x| f(&pf, x, &rf), &wf, 1e-5).unwrap();
        let fd_r = finite_diff_grad(|x| f(&pf, &wf, x), &rf, 1e-5).unwrap();
        assert!(max_rel_err(out.grad.get(PROBS).unwrap(), &fd_p) < 1e-6);
        assert!(max_rel_err(out.grad.get(WEIGHTS).unwrap(), &fd_w) < 1e-6);
        assert!(max_rel_err(out.grad.get(RAW_WEIGHTS).unwrap(), &fd_r) < 1e-6);
    }

    #[test]
    fn total_loss_combines_linearly() {
        let cls = GradBundle::new(1.5).with("prompts", alloc::vec![1.0, -2.0]);
        let distill = GradBundle::new(0.5).with("prompts", alloc::vec![4.0, 4.0]).with("phi", alloc::vec![1.0]);
        let zero = total_loss(&cls, &distill, 0.0).unwrap();
        assert_eq!(zero.value, cls.value);
        assert_eq!(zero.get("prompts"), cls.get("prompts"));
        let doubled = total_loss(&cls, &cls, 1.0).unwrap();
        assert_eq!(doubled.value, 3.0);
        assert_eq!(doubled.get("prompts").unwrap().as_slice(), &[2.0, -4.0]);
        let half = total_loss(&cls, &distill, 0.5).unwrap();
        assert_eq!(half.value, 1.75);
        assert_eq!(half.get("phi").unwrap().as_slice(), &[0.5]);
        assert!(total_loss(&cls, &distill, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn probs_ignore_positive_rescaling(
            seed in 0u64..200,
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let z = rng.normal_vec(6, 1.0);
            let ws: Vec<RealVec> = (0..4).map(|_| rv(&rng.normal_vec(6, 1.0))).collect();
            let p = predict_probs(&z, &ws, 0.07).unwrap();
            let zs: Vec<f64> = z.iter().map(|v| v * a).collect();
            let wss: Vec<RealVec> = ws.iter().map(|w| rv(&w.iter().map(|v| v * b).collect::<Vec<_>>())).collect();
            let q = predict_probs(&zs, &wss, 0.07).unwrap();
            for (x, y) in p.iter().zip(q.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn distill_is_nonnegative(seed in 0u64..200, tau in 0.01f64..2.0) {
            let mut rng = SeededRng::new(seed);
            let h: Vec<RealVec> = (0..3).map(|_| rv(&rng.normal_vec(4, 1.0))).collect();
            let mapped: Vec<Vec<RealVec>> =
                (0..3).map(|_| (0..2).map(|_| rv(&rng.normal_vec(4, 1.0))).collect()).collect();
            prop_assert!(distill_loss(&mapped, &h, tau).unwrap().value >= 0.0);
        }
    }
}
