//! The cyclic mapping between the text space (`d_vlm`) and the LLM space
//! (`d_llm`): `phi` maps forward, `psi` maps back, and both are five-layer
//! tanh MLPs of width `max(d_vlm, d_llm)` with a linear output layer.
//!
//! The mapping loss is `1 - mean_i cos(psi(phi(t_i)), t_i)`, with `phi`
//! always fed the unit direction of `t_i` so the loss only sees directions.
//! Both maps are pre-trained on a name corpus; afterwards `psi` is frozen and
//! only `phi` keeps learning, now on the prompt embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{EncoderSet, TokenTable};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp, MlpTrace};
use crate::num::{dot, norm, unit, unit_backward, GradBundle, RealMat, RealVec, SeededRng};

pub const MAPPING_DEPTH: usize = 5;
pub const PHI: &str = "phi";
pub const PSI: &str = "psi";

#[derive(Debug, Clone, PartialEq)]
pub struct MappingPair {
    phi: Mlp,
    psi: Mlp,
    pub(crate) phi_frozen: bool,
    pub(crate) psi_frozen: bool,
}

impl MappingPair {
    /// Fresh maps: each layer is a random orthonormal matrix scaled by
    /// [`INIT_GAIN`], biases zero.
    pub fn new(d_vlm: usize, d_llm: usize, rng: &mut SeededRng) -> Self {
        let h = d_vlm.max(d_llm);
        let phi = scaled_orthogonal(&[d_vlm, h, h, h, h, d_llm], rng);
        let psi = scaled_orthogonal(&[d_llm, h, h, h, h, d_vlm], rng);
        MappingPair {
            phi,
            psi,
            phi_frozen: false,
            psi_frozen: false,
        }
    }

    /// Assembles a pair from existing networks; each must have exactly five
    /// layers and the widths must chain `d_vlm -> d_llm -> d_vlm`.
    pub fn from_nets(phi: Mlp, psi: Mlp) -> Result<Self> {
        for (name, net) in [(PHI, &phi), (PSI, &psi)] {
            if net.depth() != MAPPING_DEPTH {
                return Err(Error::Parameter(format!(
                    "{name} has {} layers, expected {MAPPING_DEPTH}",
                    net.depth()
                )));
            }
        }
        if phi.output_dim() != psi.input_dim() {
            return Err(Error::dim("phi output / psi input", phi.output_dim(), psi.input_dim()));
        }
        if psi.output_dim() != phi.input_dim() {
            return Err(Error::dim("psi output / phi input", phi.input_dim(), psi.output_dim()));
        }
        Ok(MappingPair {
            phi,
            psi,
            phi_frozen: false,
            psi_frozen: false,
        })
    }

    pub fn d_vlm(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn d_llm(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn phi(&self) -> &Mlp {
        &self.phi
    }

    pub fn psi(&self) -> &Mlp {
        &self.psi
    }

    pub fn phi_frozen(&self) -> bool {
        self.phi_frozen
    }

    pub fn psi_frozen(&self) -> bool {
        self.psi_frozen
    }

    pub fn set_frozen(&mut self, phi: bool, psi: bool) {
        self.phi_frozen = phi;
        self.psi_frozen = psi;
    }

    pub fn set_phi_params(&mut self, flat: &[f64]) -> Result<()> {
        self.phi.set_params(flat)
    }

    pub fn set_psi_params(&mut self, flat: &[f64]) -> Result<()> {
        self.psi.set_params(flat)
    }

    pub(crate) fn set_phi_param(&mut self, idx: usize, value: f64) {
        self.phi.set_param(idx, value);
    }

    pub(crate) fn set_psi_param(&mut self, idx: usize, value: f64) {
        self.psi.set_param(idx, value);
    }

    pub fn phi_apply(&self, t: &[f64]) -> Result<RealVec> {
        RealVec::new(self.phi.forward_checked(t)?)
    }

    pub fn psi_apply(&self, u: &[f64]) -> Result<RealVec> {
        RealVec::new(self.psi.forward_checked(u)?)
    }

    /// `psi(phi(t / |t|))`.
    pub fn cycle(&self, t: &[f64]) -> Result<RealVec> {
        let (t_hat, _) = unit(t, "mapping input")?;
        self.psi_apply(&self.phi_apply(&t_hat)?)
    }

    /// Mean of `cos(psi(phi(t)), t)` over `points`.
    pub fn mean_cycle_cosine(&self, points: &[Vec<f64>]) -> Result<f64> {
        let loss = mapping_loss_value(self, points)?;
        Ok(1.0 - loss)
    }
}

/// Scale of the orthogonal initialization. Below ~0.7 the ten-layer cycle
/// starts with vanishing signal and SGD stalls.
pub const INIT_GAIN: f64 = 0.9;

fn scaled_orthogonal(widths: &[usize], rng: &mut SeededRng) -> Mlp {
    let layers = widths
        .windows(2)
        .map(|w| {
            let mut m = RealMat::random_orthonormal(w[1], w[0], rng);
            m.as_mut_slice().iter_mut().for_each(|v| *v *= INIT_GAIN);
            Dense::new(m, alloc::vec![0.0; w[1]]).expect("widths chain")
        })
        .collect();
    Mlp::new(layers, Activation::Tanh, Activation::Identity).expect("widths chain")
}

fn check_batch(pair: &MappingPair, batch: &[Vec<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("mapping loss over an empty batch".into()));
    }
    for t in batch {
        if t.len() != pair.d_vlm() {
            return Err(Error::dim("mapping input", pair.d_vlm(), t.len()));
        }
    }
    Ok(())
}

fn cycled_unit(cycled: &[f64], index: usize) -> Result<(Vec<f64>, f64)> {
    let n = norm(cycled);
    if !(n >= 1e-12) || !n.is_finite() {
        return Err(Error::DegenerateCycle { index, norm: n });
    }
    Ok((cycled.iter().map(|v| v / n).collect(), n))
}

/// Value of the mapping loss without gradients.
pub fn mapping_loss_value(pair: &MappingPair, batch: &[Vec<f64>]) -> Result<f64> {
    check_batch(pair, batch)?;
    let units = batch
        .iter()
        .map(|t| unit(t, "mapping input").map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;
    let mid: Vec<Vec<f64>> = units.iter().map(|u| pair.phi.forward(u)).collect();
    cycle_value(pair, &units, &mid)
}

/// Mapping loss from unit inputs and their `phi` images.
pub(crate) fn cycle_value(pair: &MappingPair, units: &[Vec<f64>], mid: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (t_hat, m)) in units.iter().zip(mid).enumerate() {
        let cycled = pair.psi.forward(m);
        let (c_hat, _) = cycled_unit(&cycled, i)?;
        total += dot(&c_hat, t_hat).clamp(-1.0, 1.0);
    }
    Ok(1.0 - total / units.len() as f64)
}

/// Mapping loss with gradients for `phi` and `psi`. A frozen network reports
/// an all-zero gradient.
pub fn mapping_loss(pair: &MappingPair, batch: &[Vec<f64>]) -> Result<GradBundle> {
    mapping_backward(pair, batch, false).map(|(b, _)| b)
}

/// [`mapping_loss`] plus the gradient with respect to every input point.
pub(crate) fn mapping_loss_with_inputs(pair: &MappingPair, batch: &[Vec<f64>]) -> Result<(GradBundle, Vec<Vec<f64>>)> {
    mapping_backward(pair, batch, true)
}

fn mapping_backward(pair: &MappingPair, batch: &[Vec<f64>], inputs: bool) -> Result<(GradBundle, Vec<Vec<f64>>)> {
    check_batch(pair, batch)?;
    let n = batch.len() as f64;
    let mut g_phi = alloc::vec![0.0; pair.phi.param_count()];
    let mut g_psi = alloc::vec![0.0; pair.psi.param_count()];
    let mut d_inputs = Vec::new();
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let (t_hat, t_norm) = unit(t, "mapping input")?;
        let phi_tr: MlpTrace = pair.phi.forward_trace(&t_hat);
        let psi_tr = pair.psi.forward_trace(phi_tr.output());
        let (c_hat, c_norm) = cycled_unit(psi_tr.output(), i)?;
        total += dot(&c_hat, &t_hat).clamp(-1.0, 1.0);
        if pair.phi_frozen && pair.psi_frozen && !inputs {
            continue;
        }
        // d(-cos/n)/d(c_hat) = -t_hat/n
        let d_unit: Vec<f64> = t_hat.iter().map(|v| -v / n).collect();
        let d_cycled = unit_backward(&c_hat, c_norm, &d_unit);
        let psi_grad = if pair.psi_frozen { None } else { Some(g_psi.as_mut_slice()) };
        let d_mid = pair.psi.backward(&psi_tr, &d_cycled, psi_grad);
        let phi_grad = if pair.phi_frozen { None } else { Some(g_phi.as_mut_slice()) };
        let mut d_t_hat = pair.phi.backward(&phi_tr, &d_mid, phi_grad);
        if inputs {
            d_t_hat.iter_mut().zip(&c_hat).for_each(|(d, c)| *d -= c / n);
            d_inputs.push(unit_backward(&t_hat, t_norm, &d_t_hat));
        }
    }
    let bundle = GradBundle::new(1.0 - total / n).with(PHI, g_phi).with(PSI, g_psi);
    Ok((bundle, d_inputs))
}

/// Names used to pre-train the mapping, split into train and held-out parts.
#[derive(Debug, Clone, PartialEq)]
pub struct NameCorpus {
    entries: Vec<(String, Vec<usize>)>,
    train: Vec<usize>,
    held_out: Vec<usize>,
}

impl NameCorpus {
    pub fn new(names: &[String], tokens: &TokenTable, held_out_fraction: f64, seed: u64) -> Result<Self> {
        if !(held_out_fraction > 0.0 && held_out_fraction <= 0.5) {
            return Err(Error::Parameter(format!(
                "held-out fraction {held_out_fraction} outside (0, 0.5]"
            )));
        }
        let mut entries = Vec::with_capacity(names.len());
        let mut seen = alloc::collections::BTreeSet::new();
        for name in names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Input(format!("duplicate corpus name `{name}`")));
            }
            entries.push((name.clone(), tokens.tokens(name)?.to_vec()));
        }
        if entries.len() < 2 {
            return Err(Error::Input("name corpus needs at least two names".into()));
        }
        let mut order: Vec<usize> = (0..entries.len()).collect();
        let mut rng = SeededRng::derive(seed, "corpus-split");
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let n_held = (libm::round(entries.len() as f64 * held_out_fraction) as usize).max(1);
        let held_out = order[..n_held].to_vec();
        let train = order[n_held..].to_vec();
        Ok(NameCorpus {
            entries,
            train,
            held_out,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn train_names(&self) -> impl Iterator<Item = &str> {
        self.train.iter().map(|&i| self.entries[i].0.as_str())
    }

    pub fn held_out_names(&self) -> impl Iterator<Item = &str> {
        self.held_out.iter().map(|&i| self.entries[i].0.as_str())
    }

    /// Class-name `g` embeddings of the train and held-out parts.
    pub fn embeddings(&self, encoders: &EncoderSet, tokens: &TokenTable) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let embed = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
            idx.iter()
                .map(|&i| Ok(encoders.encode_class_name(tokens, &self.entries[i].0)?.into_inner()))
                .collect()
        };
        Ok((embed(&self.train)?, embed(&self.held_out)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mini-batch loss before each update.
    pub trace: Vec<f64>,
    pub final_train_loss: f64,
    pub train_cycle_cosine: f64,
    pub held_out_cycle_cosine: f64,
}

/// Jointly trains `phi` and `psi` with SGD on the corpus names, then freezes
/// `psi`.
pub fn pretrain_mapping(
    pair: &mut MappingPair,
    corpus: &NameCorpus,
    encoders: &EncoderSet,
    tokens: &TokenTable,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if pair.phi_frozen || pair.psi_frozen {
        return Err(Error::Protocol("pre-training needs both maps unfrozen".into()));
    }
    if config.batch_size == 0 || !(config.lr >= 0.0) {
        return Err(Error::Parameter("pre-training needs batch_size > 0 and lr >= 0".into()));
    }
    let (train, held_out) = corpus.embeddings(encoders, tokens)?;
    let mut rng = SeededRng::derive(config.seed, "pretrain-batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(config.steps);
    let mut initial = None;
    let mut above = 0usize;
    for step in 0..config.steps {
        if cursor >= order.len() {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<Vec<f64>> = order[cursor..end].iter().map(|&i| train[i].clone()).collect();
        cursor = end;
        let bundle = mapping_loss(pair, &batch)?;
        trace.push(bundle.value);
        let first = *initial.get_or_insert(bundle.value);
        if bundle.value > 10.0 * first {
            above += 1;
            if above >= 100 {
                return Err(Error::Divergence { step, trace });
            }
        } else {
            above = 0;
        }
        if !bundle.is_finite() {
            return Err(Error::Divergence { step, trace });
        }
        pair.phi.sgd_step(bundle.try_get(PHI)?, config.lr);
        pair.psi.sgd_step(bundle.try_get(PSI)?, config.lr);
    }
    pair.psi_frozen = true;
    let final_train_loss = mapping_loss_value(pair, &train)?;
    Ok(PretrainReport {
        trace,
        final_train_loss,
        train_cycle_cosine: 1.0 - final_train_loss,
        held_out_cycle_cosine: pair.mean_cycle_cosine(&held_out)?,
    })
}

/// One SGD step on `phi` alone over the current prompt embeddings. `psi`
/// must already be frozen. Returns the pre-step loss and gradients.
pub fn finetune_step_phi(pair: &mut MappingPair, prompt_batch: &[Vec<f64>], lr: f64) -> Result<GradBundle> {
    if !pair.psi_frozen {
        return Err(Error::Protocol("phi fine-tuning requires psi to be frozen".into()));
    }
    let bundle = mapping_loss(pair, prompt_batch)?;
    apply_phi_step(pair, &bundle, lr)?;
    Ok(bundle)
}

/// SGD on `phi` with an already computed mapping-loss bundle.
pub(crate) fn apply_phi_step(pair: &mut MappingPair, bundle: &GradBundle, lr: f64) -> Result<()> {
    if !pair.psi_frozen {
        return Err(Error::Protocol("phi fine-tuning requires psi to be frozen".into()));
    }
    if !pair.phi_frozen {
        pair.phi.sgd_step(bundle.try_get(PHI)?, lr);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{finite_diff_grad, max_rel_err};
    use proptest::prelude::*;

    fn linear_net(first: RealMat, rest: usize) -> Mlp {
        let d = first.rows();
        let mut layers = alloc::vec![Dense::new(first, alloc::vec![0.0; d]).unwrap()];
        for _ in 0..rest {
            let mut eye = RealMat::zeros(d, d);
            for i in 0..d {
                eye.set(i, i, 1.0);
            }
            layers.push(Dense::new(eye, alloc::vec![0.0; d]).unwrap());
        }
        Mlp::new(layers, Activation::Identity, Activation::Identity).unwrap()
    }

    fn scaled_eye(d: usize, s: f64) -> RealMat {
        let mut m = RealMat::zeros(d, d);
        for i in 0..d {
            m.set(i, i, s);
        }
        m
    }

    fn points(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| rng.normal_vec(d, 1.0)).collect()
    }

    #[test]
    fn identity_cycle_has_zero_loss_and_gradient() {
        let pair = MappingPair::from_nets(linear_net(scaled_eye(6, 1.0), 4), linear_net(scaled_eye(6, 1.0), 4)).unwrap();
        let b = mapping_loss(&pair, &points(6, 5, 1)).unwrap();
        assert!(b.value.abs() < 1e-12);
        for (_, g) in b.groups() {
            assert!(g.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn negation_cycle_scores_two() {
        let pair = MappingPair::from_nets(linear_net(scaled_eye(6, 1.0), 4), linear_net(scaled_eye(6, -1.0), 4)).unwrap();
        let v = mapping_loss(&pair, &points(6, 5, 2)).unwrap().value;
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_cycle_scores_one() {
        let mut rot = RealMat::zeros(6, 6);
        for k in 0..3 {
            rot.set(2 * k, 2 * k + 1, -1.0);
            rot.set(2 * k + 1, 2 * k, 1.0);
        }
        let pair = MappingPair::from_nets(linear_net(rot, 4), linear_net(scaled_eye(6, 1.0), 4)).unwrap();
        let v = mapping_loss(&pair, &points(6, 5, 3)).unwrap().value;
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cycle_names_the_sample() {
        let pair = MappingPair::from_nets(linear_net(scaled_eye(4, 0.0), 4), linear_net(scaled_eye(4, 1.0), 4)).unwrap();
        let err = mapping_loss(&pair, &points(4, 3, 4)).unwrap_err();
        assert!(matches!(err, Error::DegenerateCycle { index: 0, .. }));
        assert!(mapping_loss(&pair, &[]).is_err());
    }

    #[test]
    fn architecture_is_five_layers_wide_as_the_larger_space() {
        let pair = MappingPair::new(8, 12, &mut SeededRng::new(0));
        assert_eq!(pair.phi().depth(), 5);
        assert_eq!(pair.psi().depth(), 5);
        for l in &pair.phi().layers()[..4] {
            assert_eq!(l.output_dim(), 12);
        }
        assert_eq!((pair.d_vlm(), pair.d_llm()), (8, 12));
        let four = linear_net(scaled_eye(8, 1.0), 3);
        assert!(MappingPair::from_nets(four.clone(), four).is_err());
    }

    // Orthonormal layers scaled by 0.9 and contracting tanh: at most 0.9^5.
    const FRESH_NORM_RATIO: f64 = 0.6;

    #[test]
    fn fresh_maps_bound_output_norm() {
        // Regression pin: output norm stays under this multiple of the input
        // norm for the seed-0 initialization on unit-scale inputs.
        let pair = MappingPair::new(32, 48, &mut SeededRng::new(0));
        for t in points(32, 20, 5) {
            let u = pair.phi_apply(&t).unwrap();
            assert!(u.norm() < FRESH_NORM_RATIO * norm(&t), "{} vs {}", u.norm(), norm(&t));
            assert_eq!(u, pair.phi_apply(&t).unwrap());
        }
        assert!(pair.phi_apply(&[1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let pair = MappingPair::new(5, 7, &mut SeededRng::new(seed));
            let batch = points(5, 4, seed + 10);
            let b = mapping_loss(&pair, &batch).unwrap();
            let p0 = pair.phi().params();
            let fd = finite_diff_grad(
                |p| {
                    let mut q = pair.clone();
                    q.set_phi_params(p).unwrap();
                    mapping_loss_value(&q, &batch).unwrap()
                },
                &p0,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_err(b.get(PHI).unwrap(), &fd) < 1e-4);
            let q0 = pair.psi().params();
            let fd = finite_diff_grad(
                |p| {
                    let mut q = pair.clone();
                    q.set_psi_params(p).unwrap();
                    mapping_loss_value(&q, &batch).unwrap()
                },
                &q0,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_err(b.get(PSI).unwrap(), &fd) < 1e-4);
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut pair = MappingPair::new(5, 7, &mut SeededRng::new(4));
        pair.set_frozen(false, true);
        let batch = points(5, 3, 21);
        let (_, d) = mapping_loss_with_inputs(&pair, &batch).unwrap();
        let flat: Vec<f64> = batch.concat();
        let fd = finite_diff_grad(
            |x| mapping_loss_value(&pair, &x.chunks(5).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap(),
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&d.concat(), &fd) < 1e-4);
    }

    #[test]
    fn frozen_psi_reports_exact_zero_and_never_moves() {
        let mut pair = MappingPair::new(6, 6, &mut SeededRng::new(1));
        assert!(finetune_step_phi(&mut pair, &points(6, 4, 0), 0.1).is_err());
        pair.set_frozen(false, true);
        let psi_hash = pair.psi().fingerprint();
        let batch = points(6, 8, 7);
        for _ in 0..100 {
            let b = finetune_step_phi(&mut pair, &batch, 1e-2).unwrap();
            assert!(b.get(PSI).unwrap().iter().all(|v| *v == 0.0));
        }
        assert_eq!(psi_hash, pair.psi().fingerprint());
    }

    #[test]
    fn zero_learning_rate_leaves_phi_alone() {
        let mut pair = MappingPair::new(6, 6, &mut SeededRng::new(1));
        pair.set_frozen(false, true);
        let before = pair.phi().fingerprint();
        finetune_step_phi(&mut pair, &points(6, 4, 0), 0.0).unwrap();
        assert_eq!(before, pair.phi().fingerprint());
    }

    proptest! {
        #[test]
        fn loss_bounded_and_scale_invariant(seed in 0u64..50, scale in 0.01f64..100.0) {
            let pair = MappingPair::new(4, 6, &mut SeededRng::new(seed));
            let batch = points(4, 3, seed + 100);
            let v = mapping_loss_value(&pair, &batch).unwrap();
            prop_assert!((0.0..=2.0).contains(&v));
            let scaled: Vec<Vec<f64>> = batch.iter().map(|t| t.iter().map(|x| x * scale).collect()).collect();
            let w = mapping_loss_value(&pair, &scaled).unwrap();
            prop_assert!((v - w).abs() < 1e-12);
        }
    }
}
