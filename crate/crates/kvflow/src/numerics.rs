//! Dense vector primitives, masked softmax, norms, and similarity.
//!
//! Masking is carried as an explicit boolean flag per entry rather than as
//! stored sentinel values, so vectors stay finite; the `-inf` substitution
//! happens only inside [`softmax`]. The softmax fast path deliberately skips
//! the running maximum and compensates with wide (`f64`) accumulation; an
//! overflow guard falls back to max-subtracted evaluation when any unmasked
//! score exceeds [`OVERFLOW_GUARD`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest score the no-max exponential path accepts before the
/// max-subtracted fallback engages. `exp(700)` is still finite in `f64`;
/// anything above is close enough to the overflow threshold to shift.
pub const OVERFLOW_GUARD: f64 = 700.0;

/// Dense real vector with a fixed dimension. All elements are finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct VecF<T> {
    data: Vec<T>,
}

impl<T: Real> VecF<T> {
    /// Builds a vector, rejecting empty and non-finite input.
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("vector must have positive dimension".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("vector elements must be finite".into()));
        }
        Ok(Self { data })
    }

    /// Internal constructor for values produced by finite arithmetic.
    pub(crate) fn from_data(data: Vec<T>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    /// Rounds a wide slice down to storage precision.
    pub fn from_wide_slice(xs: &[f64]) -> Self {
        Self::from_data(xs.iter().map(|&x| T::from_wide(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Copies the elements out at accumulation precision.
    pub fn to_wide(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.wide()).collect()
    }

    /// Dot product accumulated in `f64`.
    pub fn dot_wide(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(dot_wide(&self.data, &other.data))
    }

    pub fn norms(&self) -> Norms {
        norms_wide(&self.data)
    }
}

pub(crate) fn dot_wide<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.wide() * y.wide()).sum()
}

pub(crate) fn norms_wide<T: Real>(v: &[T]) -> Norms {
    let mut l1 = 0.0;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for &x in v {
        let a = x.wide().abs();
        l1 += a;
        sq += a * a;
        linf = linf.max(a);
    }
    Norms { l1, l2: sq.sqrt(), linf }
}

/// L1, L2, and L-infinity norms of one vector, all nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

/// `(l1, l2, linf)` of `v`, accumulated in `f64`.
pub fn vector_norms<T: Real>(v: &VecF<T>) -> Norms {
    v.norms()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Bitwise-identical inputs return exactly `1.0` so that zero-drift query
/// pairs report zero dissimilarity with no rounding residue.
pub fn cosine_similarity<T: Real>(a: &VecF<T>, b: &VecF<T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch { expected: a.dim(), got: b.dim() });
    }
    let na = a.norms().l2;
    let nb = b.norms().l2;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("undefined cosine for zero vector"));
    }
    if a.as_slice() == b.as_slice() {
        return Ok(1.0);
    }
    let cos = a.dot_wide(b)? / (na * nb);
    Ok(cos.clamp(-1.0, 1.0))
}

/// Per-slot scores with an explicit mask. Masked entries are excluded from
/// softmax support and come out of it exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVec<T> {
    scores: Vec<T>,
    masked: Vec<bool>,
}

impl<T: Real> ScoreVec<T> {
    pub fn new(scores: Vec<T>, masked: Vec<bool>) -> Result<Self> {
        if scores.len() != masked.len() {
            return Err(Error::DimMismatch { expected: scores.len(), got: masked.len() });
        }
        if scores.is_empty() {
            return Err(Error::Config("score vector must be nonempty".into()));
        }
        Ok(Self { scores, masked })
    }

    /// All entries unmasked.
    pub fn from_scores(scores: Vec<T>) -> Result<Self> {
        let masked = vec![false; scores.len()];
        Self::new(scores, masked)
    }

    pub(crate) fn from_parts(scores: Vec<T>, masked: Vec<bool>) -> Self {
        debug_assert_eq!(scores.len(), masked.len());
        Self { scores, masked }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn get(&self, i: usize) -> Result<T> {
        self.scores
            .get(i)
            .copied()
            .ok_or(Error::IndexOutOfRange { index: i, len: self.scores.len() })
    }

    pub fn unmasked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| !m).count()
    }

    /// Indices that participate in the softmax support.
    pub fn unmasked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i)
    }

    /// Sum of unmasked entries, accumulated in `f64`.
    pub fn sum_wide(&self) -> f64 {
        self.unmasked_indices().map(|i| self.scores[i].wide()).sum()
    }
}

/// Softmax output: weights plus the denominator accumulator.
#[derive(Debug, Clone)]
pub struct Softmax<T> {
    /// Normalized weights; masked entries are exactly zero.
    pub weights: ScoreVec<T>,
    /// Sum of exponentials actually accumulated. On the fast path this is
    /// the raw denominator `sum(exp(s))`; when `shifted` it is
    /// `sum(exp(s - max))`.
    pub denominator: f64,
    /// True when the overflow guard forced the max-subtracted fallback.
    pub shifted: bool,
}

/// Softmax over the unmasked entries without a running maximum.
///
/// Accumulation is in `f64`; if any unmasked score exceeds
/// [`OVERFLOW_GUARD`] the computation restarts with the maximum subtracted
/// and the result is flagged. Errors with [`Error::EmptySupport`] when every
/// entry is masked.
pub fn softmax<T: Real>(scores: &ScoreVec<T>) -> Result<Softmax<T>> {
    if scores.unmasked_count() == 0 {
        return Err(Error::EmptySupport);
    }

    let mut shift = 0.0;
    let mut shifted = false;
    if scores
        .unmasked_indices()
        .any(|i| scores.scores[i].wide() > OVERFLOW_GUARD)
    {
        shift = scores
            .unmasked_indices()
            .map(|i| scores.scores[i].wide())
            .fold(f64::NEG_INFINITY, f64::max);
        shifted = true;
    }

    let mut exps = vec![0.0f64; scores.len()];
    let mut denom = 0.0f64;
    for ((e, &s), &m) in exps.iter_mut().zip(&scores.scores).zip(&scores.masked) {
        if m {
            continue;
        }
        let p = (s.wide() - shift).exp();
        *e = p;
        denom += p;
    }

    let weights = exps
        .iter()
        .zip(&scores.masked)
        .map(|(&p, &m)| if m { T::zero() } else { T::from_wide(p / denom) })
        .collect();

    Ok(Softmax {
        weights: ScoreVec::from_parts(weights, scores.masked.clone()),
        denominator: denom,
        shifted,
    })
}

/// Column sum of absolute softmax Jacobian entries, `sum_i |J_ij|` with
/// `J_ij = w_i (delta_ij - w_j)`, summed from the explicit entries.
///
/// For a valid softmax output this equals `2 w_j (1 - w_j)` and never
/// exceeds `1/2`.
pub fn softmax_jacobian_colsum<T: Real>(weights: &ScoreVec<T>, j: usize) -> Result<f64> {
    if j >= weights.len() {
        return Err(Error::IndexOutOfRange { index: j, len: weights.len() });
    }
    let wj = weights.scores[j].wide();
    let mut colsum = 0.0f64;
    for (i, s) in weights.scores.iter().enumerate() {
        let wi = s.wide();
        let entry = if i == j { wi * (1.0 - wj) } else { -wi * wj };
        colsum += entry.abs();
    }
    Ok(colsum)
}
