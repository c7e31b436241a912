//! Normalized view-agreement loss.
//!
//! The pairwise term compares an online prediction `q` with a target
//! projection `z` after L2 normalization:
//! `‖q̂ − ẑ‖² = 2 − 2·⟨q, z⟩ / (‖q‖·‖z‖)`. The runtime uses the cosine form;
//! the squared-distance form only appears in tests as an oracle.

use thiserror::Error;

/// Norm below which an embedding is treated as collapsed.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("degenerate embedding: norm {norm:e} is below {NORM_EPS:e}")]
    Degenerate { norm: f64 },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding must have at least one dimension")]
    EmptyEmbedding,
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("batch size mismatch: {sizes:?}")]
    BatchMismatch { sizes: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// A finite, non-empty representation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LossError::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

/// Loss value; pairwise terms lie in `[0, 4]`, two-target sums in `[0, 8]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LossValue(f64);

impl LossValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl std::ops::Add for LossValue {
    type Output = LossValue;
    fn add(self, rhs: Self) -> Self {
        LossValue(self.0 + rhs.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn checked_norm(v: &Embedding) -> Result<f64> {
    let norm = v.norm();
    if !norm.is_finite() {
        return Err(LossError::NonFinite);
    }
    if norm <= NORM_EPS {
        return Err(LossError::Degenerate { norm });
    }
    Ok(norm)
}

fn check_dims(q: &Embedding, z: &Embedding) -> Result<()> {
    if q.dim() != z.dim() {
        return Err(LossError::DimensionMismatch { left: q.dim(), right: z.dim() });
    }
    Ok(())
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &Embedding) -> Result<Embedding> {
    let norm = checked_norm(v)?;
    Ok(Embedding(v.0.iter().map(|x| x / norm).collect()))
}

/// `2 − 2·cos(q, z)`.
pub fn pairwise_view_loss(q: &Embedding, z: &Embedding) -> Result<LossValue> {
    check_dims(q, z)?;
    let nq = checked_norm(q)?;
    let nz = checked_norm(z)?;
    let cos = dot(&q.0, &z.0) / (nq * nz);
    Ok(LossValue((2.0 - 2.0 * cos).clamp(0.0, 4.0)))
}

/// Pairwise loss together with its gradient with respect to `q`.
///
/// `∂L/∂q = −2/(‖q‖‖z‖) · (z − (⟨q,z⟩/‖q‖²)·q)`; `z` is a constant here, the
/// target side never receives a gradient.
pub fn pairwise_view_loss_grad(q: &Embedding, z: &Embedding) -> Result<(LossValue, Vec<f64>)> {
    check_dims(q, z)?;
    let nq = checked_norm(q)?;
    let nz = checked_norm(z)?;
    let qz = dot(&q.0, &z.0);
    let cos = qz / (nq * nz);
    let scale = -2.0 / (nq * nz);
    let proj = qz / (nq * nq);
    let grad = q.0.iter().zip(&z.0).map(|(qi, zi)| scale * (zi - proj * qi)).collect();
    Ok((LossValue((2.0 - 2.0 * cos).clamp(0.0, 4.0)), grad))
}

/// `L(q1, z2) + L(q1, z3)`.
pub fn triple_view_loss(q1: &Embedding, z2: &Embedding, z3: &Embedding) -> Result<LossValue> {
    Ok(pairwise_view_loss(q1, z2)? + pairwise_view_loss(q1, z3)?)
}

fn check_batches(sizes: &[usize]) -> Result<usize> {
    let first = sizes[0];
    if sizes.iter().any(|&s| s != first) {
        return Err(LossError::BatchMismatch { sizes: sizes.to_vec() });
    }
    if first == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(first)
}

/// Mean of [`triple_view_loss`] over the batch.
pub fn batch_loss(q1: &[Embedding], z2: &[Embedding], z3: &[Embedding]) -> Result<LossValue> {
    let b = check_batches(&[q1.len(), z2.len(), z3.len()])?;
    let mut total = 0.0;
    for ((q, a), c) in q1.iter().zip(z2).zip(z3) {
        total += triple_view_loss(q, a, c)?.value();
    }
    Ok(LossValue(total / b as f64))
}

/// Batch mean of one pairwise term and the gradient of that mean with respect
/// to every row of `q` (already divided by the batch size).
pub fn mean_pair_loss_grad(q: &[Embedding], z: &[Embedding]) -> Result<(LossValue, Vec<Vec<f64>>)> {
    let b = check_batches(&[q.len(), z.len()])?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(b);
    for (qi, zi) in q.iter().zip(z) {
        let (l, mut g) = pairwise_view_loss_grad(qi, zi)?;
        total += l.value();
        g.iter_mut().for_each(|v| *v /= b as f64);
        grads.push(g);
    }
    Ok((LossValue(total / b as f64), grads))
}

/// Mean pairwise loss without gradients.
pub fn mean_pair_loss(q: &[Embedding], z: &[Embedding]) -> Result<LossValue> {
    let b = check_batches(&[q.len(), z.len()])?;
    let mut total = 0.0;
    for (qi, zi) in q.iter().zip(z) {
        total += pairwise_view_loss(qi, zi)?.value();
    }
    Ok(LossValue(total / b as f64))
}
