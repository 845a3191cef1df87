//! Single-query attention over the arena: a max-subtracted reference path
//! and a fused block-wise pass that produces the attention output, the
//! per-slot importance scores, and the eviction argmin in one sweep.
//!
//! The fused pass walks the cache in blocks, exponentiates scores without a
//! running maximum, and accumulates three things per block: the softmax
//! denominator, the output sum of the un-normalized contribution rows
//! `exp(s_i) * v_i`, and the L1 reduction of those same rows. One division
//! by the final denominator then yields the output, the weights, and the
//! normalized importance scores; the eviction slot is the score argmin.
//! Results are invariant to the block size.

use crate::arena::KvArena;
use crate::error::{Error, Result};
use crate::numerics::{dot_wide, ScoreVec, VecF, OVERFLOW_GUARD};
use crate::scalar::Real;

/// Block size for the fused pass over the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    block_size: usize,
}

impl BlockConfig {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size < 1 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        Ok(Self { block_size })
    }

    /// One block spanning the whole cache.
    pub fn full() -> Self {
        Self { block_size: usize::MAX }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { block_size: 128 }
    }
}

/// Everything one decode step produces: attention output, weights,
/// normalized importance scores, the slot to evict, and the softmax
/// denominator accumulator.
#[derive(Debug, Clone)]
pub struct AttnStepResult<T> {
    pub output: VecF<T>,
    /// Softmax weights per slot; invalid slots are masked and exactly zero.
    pub weights: ScoreVec<f64>,
    /// Per-slot importance `weight * l1(value)`, normalized by the final
    /// denominator.
    pub longflow_scores: ScoreVec<f64>,
    /// Argmin of the importance scores over valid slots, lowest index on
    /// ties.
    pub evict_slot: usize,
    /// Sum of exponentials accumulated by the pass (max-shifted when the
    /// overflow guard engaged).
    pub denominator: f64,
    /// True when the overflow guard forced a max-subtracted recomputation.
    pub overflow_fallback: bool,
}

fn scaled_score<T: Real>(q: &VecF<T>, key: &[T], inv_sqrt_d: f64) -> f64 {
    dot_wide(q.as_slice(), key) * inv_sqrt_d
}

/// Plain scaled-dot-product attention over the valid slots, computed the
/// textbook way (max-subtracted softmax). Serves as the equivalence
/// reference for the fused pass.
pub fn reference_attention<T: Real>(
    q: &VecF<T>,
    arena: &KvArena<T>,
) -> Result<(VecF<T>, ScoreVec<f64>)> {
    if q.dim() != arena.head_dim() {
        return Err(Error::DimMismatch { expected: arena.head_dim(), got: q.dim() });
    }
    if arena.valid_count() == 0 {
        return Err(Error::EmptyCache);
    }
    let d = arena.head_dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut max_score = f64::NEG_INFINITY;
    let mut scores = vec![f64::NEG_INFINITY; arena.capacity()];
    for slot in arena.valid_slots() {
        let s = scaled_score(q, arena.key(slot), inv_sqrt_d);
        scores[slot] = s;
        max_score = max_score.max(s);
    }

    let mut denom = 0.0f64;
    let mut exps = vec![0.0f64; arena.capacity()];
    for slot in arena.valid_slots() {
        let p = (scores[slot] - max_score).exp();
        exps[slot] = p;
        denom += p;
    }

    let mut out = vec![0.0f64; d];
    let mut weights = vec![0.0f64; arena.capacity()];
    for slot in arena.valid_slots() {
        let w = exps[slot] / denom;
        weights[slot] = w;
        for (o, &x) in out.iter_mut().zip(arena.value(slot)) {
            *o += w * x.wide();
        }
    }

    let masked: Vec<bool> = arena.valid_mask().iter().map(|&v| !v).collect();
    Ok((
        VecF::from_wide_slice(&out),
        ScoreVec::from_parts(weights, masked),
    ))
}

/// Per-token contribution rows `weight_i * value_i` for the valid slots in
/// ascending slot order. The rows sum to the attention output.
pub fn contribution_vectors<T: Real>(q: &VecF<T>, arena: &KvArena<T>) -> Result<Vec<VecF<T>>> {
    let (_, weights) = reference_attention(q, arena)?;
    let rows = arena
        .valid_slots()
        .map(|slot| {
            let w = weights.scores()[slot];
            let row: Vec<f64> = arena.value(slot).iter().map(|&x| w * x.wide()).collect();
            VecF::from_wide_slice(&row)
        })
        .collect();
    Ok(rows)
}

struct FusedAccum {
    out: Vec<f64>,
    denom: f64,
    /// Per-slot exponentials (zero where masked).
    exps: Vec<f64>,
    /// Per-slot un-normalized importance `exp(s_i) * l1(value_i)`.
    loss: Vec<f64>,
}

fn fused_pass<T: Real>(
    q: &VecF<T>,
    arena: &KvArena<T>,
    block_size: usize,
    shift: f64,
) -> std::result::Result<FusedAccum, ()> {
    let d = arena.head_dim();
    let capacity = arena.capacity();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let bs = block_size.min(capacity);

    let mut acc = FusedAccum {
        out: vec![0.0; d],
        denom: 0.0,
        exps: vec![0.0; capacity],
        loss: vec![0.0; capacity],
    };

    let mut start = 0;
    while start < capacity {
        let end = (start + bs).min(capacity);
        for slot in start..end {
            if !arena.is_valid(slot) {
                continue; // masked: score -inf, exp contributes exactly 0
            }
            let s = scaled_score(q, arena.key(slot), inv_sqrt_d);
            if shift == 0.0 && s > OVERFLOW_GUARD {
                return Err(()); // guard tripped, caller reruns shifted
            }
            let p = (s - shift).exp();
            acc.denom += p;
            acc.exps[slot] = p;
            let mut l1 = 0.0f64;
            for (o, &x) in acc.out.iter_mut().zip(arena.value(slot)) {
                let c = p * x.wide();
                *o += c;
                l1 += c.abs();
            }
            acc.loss[slot] = l1;
        }
        start = end;
    }
    Ok(acc)
}

/// One fused pass over the cache in blocks: attention output, per-slot
/// importance scores, and the eviction argmin, all from a single loop.
pub fn fused_decode_step<T: Real>(
    q: &VecF<T>,
    arena: &KvArena<T>,
    cfg: BlockConfig,
) -> Result<AttnStepResult<T>> {
    if q.dim() != arena.head_dim() {
        return Err(Error::DimMismatch { expected: arena.head_dim(), got: q.dim() });
    }
    if arena.valid_count() == 0 {
        return Err(Error::EmptyCache);
    }

    let (acc, fallback) = match fused_pass(q, arena, cfg.block_size(), 0.0) {
        Ok(acc) => (acc, false),
        Err(()) => {
            let inv_sqrt_d = 1.0 / (arena.head_dim() as f64).sqrt();
            let max_score = arena
                .valid_slots()
                .map(|slot| scaled_score(q, arena.key(slot), inv_sqrt_d))
                .fold(f64::NEG_INFINITY, f64::max);
            let acc = fused_pass(q, arena, cfg.block_size(), max_score)
                .expect("shifted pass cannot trip the guard");
            (acc, true)
        }
    };

    let masked: Vec<bool> = arena.valid_mask().iter().map(|&v| !v).collect();
    let output: Vec<f64> = acc.out.iter().map(|o| o / acc.denom).collect();
    let weights: Vec<f64> = acc.exps.iter().map(|p| p / acc.denom).collect();
    let scores: Vec<f64> = acc.loss.iter().map(|l| l / acc.denom).collect();

    let evict_slot = argmin_over_valid(&scores, &masked).expect("at least one valid slot");

    Ok(AttnStepResult {
        output: VecF::from_wide_slice(&output),
        weights: ScoreVec::from_parts(weights, masked.clone()),
        longflow_scores: ScoreVec::from_parts(scores, masked),
        evict_slot,
        denominator: acc.denom,
        overflow_fallback: fallback,
    })
}

/// Lowest-index argmin over unmasked entries.
pub(crate) fn argmin_over_valid(scores: &[f64], masked: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&s, &m)) in scores.iter().zip(masked).enumerate() {
        if m {
            continue;
        }
        match best {
            Some((_, b)) if s >= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// One full decode step: write the new token, run the fused pass with the
/// query over the updated cache, and record the resulting eviction decision
/// for the next step (once the cache is full).
pub fn decode_step_full<T: Real>(
    q: &VecF<T>,
    k_new: &VecF<T>,
    v_new: &VecF<T>,
    arena: &mut KvArena<T>,
    cfg: BlockConfig,
) -> Result<AttnStepResult<T>> {
    arena.append_or_overwrite(k_new, v_new)?;
    let result = fused_decode_step(q, arena, cfg)?;
    if arena.is_full() {
        arena.set_eviction(result.evict_slot)?;
    }
    Ok(result)
}
