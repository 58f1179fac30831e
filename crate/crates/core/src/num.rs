//! Dense vectors and matrices, seeded randomness, and the elementary
//! operations the losses are built from.
//!
//! All math is `f64`. Gradient checks compare analytic gradients against
//! [`finite_diff_grad`] using [`rel_err`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Deref;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A finite, non-empty vector of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("empty vector".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(RealVec(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "RealVec dimension must be positive");
        RealVec(alloc::vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty() && data.iter().all(|v| v.is_finite()));
        RealVec(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for RealVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for RealVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Input(format!("matrix shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(RealMat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        RealMat {
            rows,
            cols,
            data: alloc::vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.iter_mut().for_each(|v| *v = value);
        m
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.normal() * std;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }


    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `out = self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `out = self^T * y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = alloc::vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    pub fn transpose(&self) -> RealMat {
        let mut t = RealMat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Matrix with orthonormal columns (rows >= cols) or orthonormal rows
    /// (rows < cols), from modified Gram-Schmidt on a Gaussian draw.
    pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        if rows < cols {
            return Self::random_orthonormal(cols, rows, rng).transpose();
        }
        loop {
            let g = Self::random_normal(cols, rows, 1.0, rng);
            // Orthonormalize the `cols` vectors of length `rows`.
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
            let mut ok = true;
            for k in 0..cols {
                let mut v = g.row(k).to_vec();
                for b in &basis {
                    let p = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= p * bi);
                }
                let n = norm(&v);
                if n < 1e-10 {
                    ok = false;
                    break;
                }
                v.iter_mut().for_each(|vi| *vi /= n);
                basis.push(v);
            }
            if ok {
                let mut m = Self::zeros(rows, cols);
                for (c, b) in basis.iter().enumerate() {
                    for (r, &v) in b.iter().enumerate() {
                        m.set(r, c, v);
                    }
                }
                return m;
            }
        }
    }
}

/// Inner product. Four interleaved partial sums, combined in a fixed order,
/// so results are reproducible but not identical to a left-to-right sum.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Cosine similarity; zero-norm inputs are rejected rather than mapped to 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate(format!(
            "cosine_sim of vectors with norms {na:e} and {nb:e}"
        )));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit vector and norm of `a`, or a degenerate-input error.
pub(crate) fn unit(a: &[f64], what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} has norm {n:e}")));
    }
    Ok((a.iter().map(|v| v / n).collect(), n))
}

/// Backward through `u -> u / |u|`: given `unit = u/|u|`, `|u|` and the
/// upstream gradient on the unit vector, returns the gradient on `u`.
pub(crate) fn unit_backward(unit: &[f64], n: f64, d_unit: &[f64]) -> Vec<f64> {
    let p = dot(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(u, d)| (d - p * u) / n)
        .collect()
}

/// Temperature softmax with max-subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<RealVec> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("softmax temperature {tau} must be > 0")));
    }
    if logits.is_empty() {
        return Err(Error::Input("softmax of empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    Ok(RealVec::from_vec_unchecked(softmax_unchecked(logits, tau)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| libm::exp((l - max) / tau)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}


/// Relative error `|a - g| / max(|a|, |g|, 1e-8)`.
pub fn rel_err(a: f64, g: f64) -> f64 {
    (a - g).abs() / a.abs().max(g.abs()).max(1e-8)
}

pub fn max_rel_err(a: &[f64], g: &[f64]) -> f64 {
    a.iter()
        .zip(g)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Central finite differences of `loss_fn` at `params`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<RealVec>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    if params.is_empty() {
        return Err(Error::Input("finite_diff_grad over zero parameters".into()));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = loss_fn(&x);
        x[k] = orig - h;
        let down = loss_fn(&x);
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { coordinate: k });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(RealVec::from_vec_unchecked(grad))
}

/// Loss value plus gradients keyed by parameter-group name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub value: f64,
    grads: BTreeMap<String, RealVec>,
}

impl GradBundle {
    pub fn new(value: f64) -> Self {
        GradBundle {
            value,
            grads: BTreeMap::new(),
        }
    }

    /// Registers a group. Panics on a duplicate name or a non-finite entry.
    pub fn with(mut self, name: &str, grad: Vec<f64>) -> Self {
        self.insert(name, grad);
        self
    }

    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        assert!(
            grad.iter().all(|v| v.is_finite()),
            "non-finite gradient in group {name}"
        );
        let prev = self
            .grads
            .insert(name.to_string(), RealVec::from_vec_unchecked(grad));
        assert!(prev.is_none(), "duplicate gradient group {name}");
    }

    pub fn get(&self, name: &str) -> Option<&RealVec> {
        self.grads.get(name)
    }

    pub fn try_get(&self, name: &str) -> Result<&RealVec> {
        self.get(name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &RealVec)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// `self + alpha * other`, groups summed by name.
    pub fn add_scaled(&self, other: &GradBundle, alpha: f64) -> GradBundle {
        let mut out = self.clone();
        out.value += alpha * other.value;
        for (name, g) in &other.grads {
            match out.grads.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.0.iter_mut().zip(g.iter()) {
                        *a += alpha * b;
                    }
                }
                None => {
                    out.grads.insert(
                        name.clone(),
                        RealVec::from_vec_unchecked(g.iter().map(|v| alpha * v).collect()),
                    );
                }
            }
        }
        out
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Sub-seed for a named stream: `splitmix64(seed ^ fnv1a64(label))`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label.as_bytes()))
}

/// Bit-level fingerprint of a parameter slice, used for the freeze contract.
pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Position of a [`SeededRng`] stream, enough to restore it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// ChaCha8 stream keyed by a `u64` seed. Identical on all platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `label`, see [`derive_seed`].
    pub fn derive(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn normal_vec(&mut self, dim: usize, std: f64) -> Vec<f64> {
        (0..dim).map(|_| self.normal() * std).collect()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
