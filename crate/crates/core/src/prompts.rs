//! Learnable prompt contexts shared across classes, the per-(class, prompt)
//! weight table, and prompt mini-batch sampling.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{RealMat, SeededRng};

pub const PROMPTS: &str = "prompts";
pub const WEIGHTS: &str = "weights";

/// Standard deviation of freshly initialized context vectors.
pub const INIT_STD: f64 = 0.02;

/// Additive floor used when normalizing weight rows.
pub const WEIGHT_EPS: f64 = 1e-8;

/// `M` context blocks of `N x d_tok`, stored flat in `(prompt, row, col)`
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    m: usize,
    n: usize,
    d_tok: usize,
    data: Vec<f64>,
}

impl PromptBank {
    pub fn from_flat(m: usize, n: usize, d_tok: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 || d_tok == 0 {
            return Err(Error::Parameter(format!("prompt bank shape {m}x{n}x{d_tok}")));
        }
        if data.len() != m * n * d_tok {
            return Err(Error::dim("prompt bank", m * n * d_tok, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt bank".into()));
        }
        Ok(PromptBank { m, n, d_tok, data })
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn context_len(&self) -> usize {
        self.n
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    /// Flat `N x d_tok` context of prompt `j`.
    pub fn context(&self, j: usize) -> &[f64] {
        let block = self.n * self.d_tok;
        &self.data[j * block..(j + 1) * block]
    }

    pub fn context_matrix(&self, j: usize) -> RealMat {
        RealMat::new(self.n, self.d_tok, self.context(j).to_vec()).expect("bank entries are finite")
    }

    /// Sum of the context rows of prompt `j`.
    pub fn context_sum(&self, j: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.d_tok];
        for row in self.context(j).chunks(self.d_tok) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.data.len() {
            return Err(Error::dim("prompt bank", self.data.len(), flat.len()));
        }
        self.data.copy_from_slice(flat);
        Ok(())
    }

    pub(crate) fn set_entry(&mut self, idx: usize, value: f64) {
        self.data[idx] = value;
    }

    pub(crate) fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.data.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
    }
}

/// Entries i.i.d. `N(0, 0.02^2)`.
pub fn init_bank(m: usize, n: usize, d_tok: usize, rng: &mut SeededRng) -> Result<PromptBank> {
    if m == 0 || n == 0 {
        return Err(Error::Parameter(format!("prompt bank needs M, N >= 1 (got {m}, {n})")));
    }
    let data = rng.normal_vec(m * n * d_tok, INIT_STD);
    PromptBank::from_flat(m, n, d_tok, data)
}

/// Rectify, add `WEIGHT_EPS`, and rescale each row to sum to one.
pub fn normalize_weights(raw: &RealMat) -> RealMat {
    let mut out = RealMat::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let row = normalize_row(raw.row(i));
        for (j, v) in row.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

pub(crate) fn normalize_row(raw: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = raw.iter().map(|r| r.max(0.0) + WEIGHT_EPS).collect();
    let sum: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / sum).collect()
}

/// Gradient on a raw row given the gradient on its normalized row. The
/// rectifier uses its right derivative at zero, so a raw entry sitting at
/// exactly zero can be pulled back into the support.
pub(crate) fn normalize_row_backward(raw: &[f64], d_norm: &[f64]) -> Vec<f64> {
    let w = normalize_row(raw);
    let sum: f64 = raw.iter().map(|r| r.max(0.0) + WEIGHT_EPS).sum();
    let mean: f64 = w.iter().zip(d_norm).map(|(w, d)| w * d).sum();
    raw.iter()
        .zip(d_norm)
        .map(|(&r, &d)| if r >= 0.0 { (d - mean) / sum } else { 0.0 })
        .collect()
}

/// Raw per-(class, prompt) weights and their row-normalized view.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    raw: RealMat,
    normalized: RealMat,
}

impl WeightTable {
    /// All raw weights 1.0, hence uniform rows.
    pub fn uniform(classes: usize, prompts: usize) -> Self {
        Self::from_raw(RealMat::filled(classes, prompts, 1.0))
    }

    pub fn from_raw(raw: RealMat) -> Self {
        let normalized = normalize_weights(&raw);
        WeightTable { raw, normalized }
    }

    pub fn raw(&self) -> &RealMat {
        &self.raw
    }

    pub fn normalized(&self) -> &RealMat {
        &self.normalized
    }

    pub fn classes(&self) -> usize {
        self.raw.rows()
    }

    pub fn prompts(&self) -> usize {
        self.raw.cols()
    }

    /// Normalized weights of class `i` restricted to the sampled prompts and
    /// renormalized over them.
    pub fn batch_row(&self, i: usize, batch: &PromptBatch) -> Vec<f64> {
        let sub: Vec<f64> = batch.indices.iter().map(|&j| self.raw.get(i, j)).collect();
        normalize_row(&sub)
    }

    /// SGD on the raw table (gradient laid out `K x M`, row-major), followed
    /// by projection onto `raw >= 0` and renormalization.
    pub(crate) fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        if lr != 0.0 {
            for (r, g) in self.raw.as_mut_slice().iter_mut().zip(grad) {
                *r = (*r - lr * g).max(0.0);
            }
        }
        self.renormalize();
    }

    /// Overwrites one raw entry and renormalizes its row.
    pub(crate) fn set_raw(&mut self, i: usize, j: usize, value: f64) {
        self.raw.set(i, j, value);
        let row = normalize_row(self.raw.row(i));
        for (c, v) in row.into_iter().enumerate() {
            self.normalized.set(i, c, v);
        }
    }

    pub fn renormalize(&mut self) {
        self.normalized = normalize_weights(&self.raw);
    }

    /// Fraction of normalized weights strictly below `threshold`.
    pub fn count_below(&self, threshold: f64) -> usize {
        self.normalized.as_slice().iter().filter(|w| **w < threshold).count()
    }
}

/// Sampled prompt indices (0-based, distinct, ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBatch {
    pub indices: Vec<usize>,
}

impl PromptBatch {
    pub fn all(m: usize) -> Self {
        PromptBatch {
            indices: (0..m).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `size` distinct prompts out of `m`, uniformly without replacement.
pub fn sample_prompts(m: usize, size: usize, rng: &mut SeededRng) -> Result<PromptBatch> {
    if size == 0 || size > m {
        return Err(Error::Parameter(format!("prompt batch {size} must be in 1..={m}")));
    }
    let mut indices = rand::seq::index::sample(rng, m, size).into_vec();
    indices.sort_unstable();
    Ok(PromptBatch { indices })
}

/// `ceil(epochs * m / batch)`: keeps the number of updates each prompt sees
/// on par with full-bank training.
pub fn epoch_scale(epochs: usize, m: usize, batch: usize) -> Result<usize> {
    if batch == 0 || batch > m {
        return Err(Error::Parameter(format!("prompt batch {batch} must be in 1..={m}")));
    }
    Ok((epochs * m).div_ceil(batch))
}
