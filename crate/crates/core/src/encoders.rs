//! Frozen stand-ins for the image encoder `f`, the text encoder `g` and the
//! LLM embedding model `h`, plus the token table and prompt assembly.
//!
//! Nothing here is mutable after construction. The toy `h` is a noisy
//! orthonormal lift of the class-name `g` embedding:
//! `h(c) = normalize(R * g(c)/|g(c)| + sigma_h * xi_c)`, so the LLM space is
//! correlated with the text space without being a copy of it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp};
use crate::num::{fingerprint, norm, RealMat, RealVec, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub seed: u64,
    pub d_tok: usize,
    pub d_vlm: usize,
    pub d_llm: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    /// Noise scale of the toy LLM embedding.
    pub sigma_h: f64,
    pub token_std: f64,
    pub text_gain: f64,
    pub text_bias_std: f64,
    pub image_gain: f64,
    /// Expected norm of the image encoder bias, an offset shared by every
    /// image feature that class-name prompts do not see.
    pub image_bias_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            seed: 0,
            d_tok: 16,
            d_vlm: 32,
            d_llm: 48,
            d_img: 32,
            vocab_size: 512,
            sigma_h: 0.1,
            token_std: 0.12,
            text_gain: 1.0,
            text_bias_std: 0.0,
            image_gain: 1.0,
            image_bias_std: 1.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_tok", self.d_tok),
            ("d_vlm", self.d_vlm),
            ("d_llm", self.d_llm),
            ("d_img", self.d_img),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !(self.sigma_h >= 0.0) || !self.sigma_h.is_finite() {
            return Err(Error::Parameter(format!("sigma_h {} must be >= 0", self.sigma_h)));
        }
        Ok(())
    }
}

/// Frozen word-embedding table plus the class-name tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    table: RealMat,
    names: BTreeMap<String, Vec<usize>>,
}

impl TokenTable {
    /// Each name gets 1-3 token ids drawn from a stream keyed by the name;
    /// distinct names never share a token sequence.
    pub fn build(config: &EncoderConfig, names: &[String]) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, "token-table");
        let table = RealMat::random_normal(config.vocab_size, config.d_tok, config.token_std, &mut rng);
        let mut map = BTreeMap::new();
        let mut used: BTreeSet<Vec<usize>> = BTreeSet::new();
        for name in names {
            if name.is_empty() {
                return Err(Error::Input("empty class name".into()));
            }
            if map.contains_key(name) {
                return Err(Error::Input(format!("duplicate class name `{name}`")));
            }
            let mut rng = SeededRng::derive(config.seed, &format!("tokens/{name}"));
            let ids = loop {
                let len = 1 + rng.below(3);
                let ids: Vec<usize> = (0..len).map(|_| rng.below(config.vocab_size)).collect();
                if !used.contains(&ids) {
                    break ids;
                }
            };
            used.insert(ids.clone());
            map.insert(name.clone(), ids);
        }
        Ok(TokenTable { table, names: map })
    }

    pub fn d_tok(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn tokens(&self, name: &str) -> Result<&[usize]> {
        self.names
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("unknown class name `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }

    /// Sum of the embeddings of `ids`.
    pub fn sum_embeddings(&self, ids: &[usize]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.d_tok()];
        for &id in ids {
            out.iter_mut().zip(self.table.row(id)).for_each(|(o, v)| *o += v);
        }
        out
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = fingerprint(self.table.as_slice());
        for (name, ids) in &self.names {
            h ^= crate::num::fnv1a64(name.as_bytes()).rotate_left(ids.len() as u32);
            for id in ids {
                h = crate::num::splitmix64(h ^ *id as u64);
            }
        }
        h
    }
}

/// Pronounceable synthetic class names, unique, deterministic per seed.
pub fn synthetic_names(count: usize, seed: u64) -> Vec<String> {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut rng = SeededRng::derive(seed, "names");
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = 2 + rng.below(3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS[rng.below(ONSETS.len())]);
            name.push_str(VOWELS[rng.below(VOWELS.len())]);
        }
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// `p*(V, c) = [v1]...[vN][c]`: the context rows followed by the class-name
/// token embeddings. `context` is the flat `N x d_tok` block.
pub fn prompt_assemble(context: &[f64], class_tokens: &[usize], table: &TokenTable) -> Result<RealMat> {
    let d = table.d_tok();
    if context.is_empty() {
        return Err(Error::Parameter("a prompt needs at least one context vector".into()));
    }
    if !context.len().is_multiple_of(d) {
        return Err(Error::dim("prompt context", d * (context.len() / d + 1), context.len()));
    }
    if class_tokens.is_empty() {
        return Err(Error::Input("class name without tokens".into()));
    }
    let n = context.len() / d;
    let mut data = Vec::with_capacity((n + class_tokens.len()) * d);
    data.extend_from_slice(context);
    for &id in class_tokens {
        if id >= table.vocab_size() {
            return Err(Error::Input(format!("token id {id} out of vocabulary")));
        }
        data.extend_from_slice(table.embedding(id));
    }
    RealMat::new(n + class_tokens.len(), d, data)
}

/// The frozen encoders `f` (image) and `g` (text), and the alignment `R`
/// used by the toy `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSet {
    config: EncoderConfig,
    text: Mlp,
    image: Mlp,
    // d_llm x d_vlm; orthonormal columns when d_llm >= d_vlm.
    alignment: RealMat,
}

impl EncoderSet {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, "text-encoder");
        let text = Mlp::random(
            &[config.d_tok, config.d_vlm, config.d_vlm],
            config.text_gain,
            config.text_bias_std,
            Activation::Identity,
            &mut rng,
        );
        let mut rng = SeededRng::derive(config.seed, "image-encoder");
        let mut w = RealMat::random_orthonormal(config.d_vlm, config.d_img, &mut rng);
        w.as_mut_slice().iter_mut().for_each(|v| *v *= config.image_gain);
        let bias = rng.normal_vec(config.d_vlm, config.image_bias_std / libm::sqrt(config.d_vlm as f64));
        let image = Mlp::new(alloc::vec![Dense::new(w, bias)?], Activation::Tanh, Activation::Tanh)?;
        let mut rng = SeededRng::derive(config.seed, "alignment");
        let alignment = RealMat::random_orthonormal(config.d_llm, config.d_vlm, &mut rng);
        Ok(EncoderSet {
            config,
            text,
            image,
            alignment,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_tok(&self) -> usize {
        self.config.d_tok
    }

    pub fn d_vlm(&self) -> usize {
        self.config.d_vlm
    }

    pub fn d_llm(&self) -> usize {
        self.config.d_llm
    }

    pub fn d_img(&self) -> usize {
        self.config.d_img
    }

    pub fn text_net(&self) -> &Mlp {
        &self.text
    }

    pub fn image_net(&self) -> &Mlp {
        &self.image
    }

    pub fn alignment(&self) -> &RealMat {
        &self.alignment
    }

    /// Mean-pool then the two-layer text network. The output is the raw,
    /// unnormalized text feature.
    pub fn encode_text_g(&self, sequence: &RealMat) -> Result<RealVec> {
        if sequence.cols() != self.d_tok() {
            return Err(Error::dim("text encoder token width", self.d_tok(), sequence.cols()));
        }
        let mut pooled = alloc::vec![0.0; self.d_tok()];
        for r in 0..sequence.rows() {
            pooled.iter_mut().zip(sequence.row(r)).for_each(|(p, v)| *p += v);
        }
        let n = sequence.rows() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        RealVec::new(self.text.forward(&pooled))
    }

    /// `g` applied to an already pooled token mean.
    pub fn encode_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        self.text.forward(pooled)
    }

    /// Class-name-only text embedding `g(c)` (no context vectors).
    pub fn encode_class_name(&self, tokens: &TokenTable, name: &str) -> Result<RealVec> {
        let ids = tokens.tokens(name)?;
        let mut pooled = tokens.sum_embeddings(ids);
        pooled.iter_mut().for_each(|p| *p /= ids.len() as f64);
        RealVec::new(self.text.forward(&pooled))
    }

    pub fn encode_image_f(&self, x: &[f64]) -> Result<RealVec> {
        RealVec::new(self.image.forward_checked(x)?)
    }

    /// Fixed per-class noise `xi_c ~ N(0, I / d_llm)`.
    pub fn llm_noise(&self, name: &str) -> Vec<f64> {
        let mut rng = SeededRng::derive(self.config.seed, &format!("llm-noise/{name}"));
        rng.normal_vec(self.d_llm(), 1.0 / libm::sqrt(self.d_llm() as f64))
    }

    /// Upper bound on how far the text feature moves when one of `seq_len`
    /// pooled tokens moves by `delta`: `|W2|_F |W1|_F delta / seq_len`.
    pub fn text_lipschitz_bound(&self, seq_len: usize) -> f64 {
        let frob: f64 = self
            .text
            .layers()
            .iter()
            .map(|l| norm(l.weight().as_slice()))
            .product();
        frob / seq_len as f64
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.text.params())
            ^ fingerprint(&self.image.params()).rotate_left(17)
            ^ fingerprint(self.alignment.as_slice()).rotate_left(31)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    Remote,
}

/// Source of LLM text embeddings (`h`).
pub trait EmbeddingBackend {
    fn kind(&self) -> BackendKind;

    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<RealVec>;

    /// Embeds several texts; results come back in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<RealVec>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// `h` built from the frozen encoders; pure and deterministic.
#[derive(Debug, Clone, Copy)]
pub struct ToyBackend<'a> {
    encoders: &'a EncoderSet,
    tokens: &'a TokenTable,
}

impl<'a> ToyBackend<'a> {
    pub fn new(encoders: &'a EncoderSet, tokens: &'a TokenTable) -> Self {
        ToyBackend { encoders, tokens }
    }
}

impl EmbeddingBackend for ToyBackend<'_> {
    fn kind(&self) -> BackendKind {
        BackendKind::Toy
    }

    fn dim(&self) -> usize {
        self.encoders.d_llm()
    }

    fn embed(&self, text: &str) -> Result<RealVec> {
        let g = self.encoders.encode_class_name(self.tokens, text)?;
        let (g_hat, _) = crate::num::unit(&g, "class-name text embedding")?;
        let mut lifted = self.encoders.alignment.matvec(&g_hat);
        let sigma = self.encoders.config.sigma_h;
        if sigma > 0.0 {
            let xi = self.encoders.llm_noise(text);
            lifted.iter_mut().zip(&xi).for_each(|(v, x)| *v += sigma * x);
        }
        let (unit, _) = crate::num::unit(&lifted, "toy LLM embedding")?;
        RealVec::new(unit)
    }
}

/// `h(text)` through any backend, with the output width checked.
pub fn embed_llm(text: &str, backend: &dyn EmbeddingBackend) -> Result<RealVec> {
    let v = backend.embed(text)?;
    if v.dim() != backend.dim() {
        return Err(Error::dim("embedding backend output", backend.dim(), v.dim()));
    }
    Ok(v)
}

/// Names paired with the corresponding class list, for callers that hold
/// `&[String]`.
pub fn name_refs(names: &[String]) -> Vec<&str> {
    names.iter().map(String::as_str).collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::cosine_sim;

    fn setup() -> (EncoderSet, TokenTable, Vec<String>) {
        let cfg = EncoderConfig::default();
        let names = synthetic_names(20, 0);
        let tokens = TokenTable::build(&cfg, &names).unwrap();
        (EncoderSet::new(cfg).unwrap(), tokens, names)
    }

    #[test]
    fn names_are_unique_and_deterministic() {
        let a = synthetic_names(300, 5);
        let b = synthetic_names(300, 5);
        assert_eq!(a, b);
        let set: BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 300);
    }

    #[test]
    fn every_name_has_one_to_three_tokens() {
        let (_, tokens, names) = setup();
        for n in &names {
            let ids = tokens.tokens(n).unwrap();
            assert!((1..=3).contains(&ids.len()));
        }
        assert!(tokens.tokens("not-a-class").is_err());
    }

    #[test]
    fn prompt_assemble_concatenates() {
        let (_, tokens, names) = setup();
        let ids = tokens.tokens(&names[0]).unwrap();
        let ctx: Vec<f64> = (0..2 * 16).map(|i| i as f64 * 0.01).collect();
        let seq = prompt_assemble(&ctx, &ids[..1], &tokens).unwrap();
        assert_eq!(seq.rows(), 3);
        assert_eq!(seq.row(0), &ctx[..16]);
        assert_eq!(seq.row(1), &ctx[16..]);
        assert_eq!(seq.row(2), tokens.embedding(ids[0]));
        let ctx16 = alloc::vec![0.0; 16 * 16];
        assert_eq!(prompt_assemble(&ctx16, ids, &tokens).unwrap().rows(), 16 + ids.len());
        assert!(matches!(prompt_assemble(&[], ids, &tokens), Err(Error::Parameter(_))));
    }

    #[test]
    fn text_encoder_is_deterministic_and_pooling_symmetric() {
        let (enc, tokens, names) = setup();
        let ids = tokens.tokens(&names[3]).unwrap();
        let ctx: Vec<f64> = (0..4 * 16).map(|i| ((i * 7) % 11) as f64 * 0.05).collect();
        let seq = prompt_assemble(&ctx, ids, &tokens).unwrap();
        let a = enc.encode_text_g(&seq).unwrap();
        let b = enc.encode_text_g(&seq).unwrap();
        assert_eq!(a, b);
        let mut rows: Vec<Vec<f64>> = (0..seq.rows()).map(|r| seq.row(r).to_vec()).collect();
        rows.reverse();
        let flipped = RealMat::new(seq.rows(), 16, rows.concat()).unwrap();
        let c = enc.encode_text_g(&flipped).unwrap();
        for (x, y) in a.iter().zip(c.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn image_encoder_checks_and_bias_image() {
        let (enc, _, _) = setup();
        let zero = alloc::vec![0.0; enc.d_img()];
        let a = enc.encode_image_f(&zero).unwrap();
        let b = enc.encode_image_f(&zero).unwrap();
        assert_eq!(a, b);
        let expected: Vec<f64> = enc.image_net().layers()[0].bias().iter().map(|v| libm::tanh(*v)).collect();
        assert_eq!(a.as_slice(), expected.as_slice());
        assert!(matches!(enc.encode_image_f(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn toy_llm_embedding_is_unit_and_deterministic() {
        let (enc, tokens, names) = setup();
        let backend = ToyBackend::new(&enc, &tokens);
        for n in &names {
            let v = embed_llm(n, &backend).unwrap();
            assert_eq!(v.dim(), 48);
            assert!((v.norm() - 1.0).abs() < 1e-9);
            assert_eq!(v, embed_llm(n, &backend).unwrap());
        }
        assert!(matches!(embed_llm("nope", &backend), Err(Error::Input(_))));
    }

    #[test]
    fn noiseless_square_alignment_is_exact() {
        let cfg = EncoderConfig {
            d_llm: 32,
            sigma_h: 0.0,
            ..EncoderConfig::default()
        };
        let names = synthetic_names(5, 1);
        let tokens = TokenTable::build(&cfg, &names).unwrap();
        let enc = EncoderSet::new(cfg).unwrap();
        let backend = ToyBackend::new(&enc, &tokens);
        for n in &names {
            let g = enc.encode_class_name(&tokens, n).unwrap();
            let rg = enc.alignment().matvec(&g);
            let h = embed_llm(n, &backend).unwrap();
            assert!((cosine_sim(&rg, &h).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_llm_widths_are_accepted() {
        for d_llm in [1536, 3072] {
            let cfg = EncoderConfig {
                d_llm,
                ..EncoderConfig::default()
            };
            let names = synthetic_names(2, 0);
            let tokens = TokenTable::build(&cfg, &names).unwrap();
            let enc = EncoderSet::new(cfg).unwrap();
            let v = embed_llm(&names[0], &ToyBackend::new(&enc, &tokens)).unwrap();
            assert_eq!(v.dim(), d_llm);
        }
    }

    #[test]
    fn encoding_never_mutates_frozen_state() {
        let (enc, tokens, names) = setup();
        let (fe, ft) = (enc.fingerprint(), tokens.fingerprint());
        let backend = ToyBackend::new(&enc, &tokens);
        for n in &names {
            embed_llm(n, &backend).unwrap();
            enc.encode_class_name(&tokens, n).unwrap();
        }
        enc.encode_image_f(&alloc::vec![0.5; enc.d_img()]).unwrap();
        assert_eq!(fe, enc.fingerprint());
        assert_eq!(ft, tokens.fingerprint());
    }

    #[test]
    fn text_encoder_respects_lipschitz_bound() {
        let (enc, tokens, names) = setup();
        let mut rng = SeededRng::new(9);
        for n in &names {
            let ids = tokens.tokens(n).unwrap();
            let ctx = rng.normal_vec(16 * 4, 0.02);
            let seq = prompt_assemble(&ctx, ids, &tokens).unwrap();
            let base = enc.encode_text_g(&seq).unwrap();
            let delta = 0.05;
            let mut data = seq.as_slice().to_vec();
            let dir = rng.normal_vec(16, 1.0);
            let dn = norm(&dir);
            data[..16].iter_mut().zip(&dir).for_each(|(v, d)| *v += delta * d / dn);
            let moved = enc.encode_text_g(&RealMat::new(seq.rows(), 16, data).unwrap()).unwrap();
            let change = (moved.norm() - base.norm()).abs();
            assert!(change <= enc.text_lipschitz_bound(seq.rows()) * delta + 1e-12);
        }
    }
}
