//! Eviction policies behind one interface: the per-step importance argmin,
//! accumulated-attention baselines (H2O, VATP), recency, seeded random, and
//! SnapKV-style prefill compression.
//!
//! Baselines default to splitting the budget between heavy-hitter and
//! recent tokens (`protect_recent = budget / 2`) and to compacting every
//! 128 steps in one batch; the importance policy evicts one token every
//! step and protects nothing by default.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arena::KvArena;
use crate::attention::AttnStepResult;
use crate::error::{Error, Result};
use crate::numerics::{norms_wide, ScoreVec, VecF};
use crate::scalar::Real;

/// Default compaction interval for the accumulated-score baselines.
pub const BASELINE_INTERVAL: usize = 128;

/// Which eviction rule drives the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Per-step argmin of `weight * l1(value)` from the fused pass.
    LongFlow,
    /// Accumulated attention scores; lowest accumulated mass evicted.
    H2o,
    /// Accumulated attention scores scaled by the value L1 norm.
    Vatp,
    /// Oldest unprotected token by write time.
    Recency,
    /// Uniform over unprotected valid slots, seeded.
    Random,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::LongFlow => "longflow",
            PolicyKind::H2o => "h2o",
            PolicyKind::Vatp => "vatp",
            PolicyKind::Recency => "recency",
            PolicyKind::Random => "random",
        }
    }

    fn accumulates(&self) -> bool {
        matches!(self, PolicyKind::H2o | PolicyKind::Vatp)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "longflow" => Ok(PolicyKind::LongFlow),
            "h2o" => Ok(PolicyKind::H2o),
            "vatp" => Ok(PolicyKind::Vatp),
            "recency" => Ok(PolicyKind::Recency),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::Config(format!(
                "unknown policy '{other}' (expected longflow|h2o|vatp|recency|random)"
            ))),
        }
    }
}

/// Policy parameters before they are bound to a cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Most-recently-written slots excluded from eviction. `None` picks the
    /// kind's default: `budget / 2` for h2o/vatp, 0 otherwise.
    pub protect_recent: Option<usize>,
    /// Steps between compactions. `None` picks the kind's default: 1 for
    /// longflow (evict every step), [`BASELINE_INTERVAL`] for the rest.
    pub compress_interval: Option<usize>,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, protect_recent: None, compress_interval: None, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_protect_recent(mut self, w: usize) -> Self {
        self.protect_recent = Some(w);
        self
    }

    pub fn with_interval(mut self, interval: usize) -> Self {
        self.compress_interval = Some(interval);
        self
    }

    pub fn resolved_protect(&self, budget: usize) -> usize {
        self.protect_recent.unwrap_or(match self.kind {
            PolicyKind::H2o | PolicyKind::Vatp => budget / 2,
            _ => 0,
        })
    }

    pub fn resolved_interval(&self) -> usize {
        self.compress_interval.unwrap_or(match self.kind {
            PolicyKind::LongFlow => 1,
            _ => BASELINE_INTERVAL,
        })
    }
}

/// Mutable per-run policy state, bound to one cache.
#[derive(Debug, Clone)]
pub struct PolicyState {
    kind: PolicyKind,
    /// Per-slot accumulated attention mass; present for h2o/vatp only.
    accumulated: Option<Vec<f64>>,
    rng: ChaCha8Rng,
    protect_recent: usize,
}

impl PolicyState {
    /// Binds a policy to a cache of `capacity` slots managing `budget`
    /// logical tokens.
    pub fn new(cfg: &PolicyConfig, budget: usize, capacity: usize) -> Self {
        let accumulated = cfg.kind.accumulates().then(|| vec![0.0; capacity]);
        Self {
            kind: cfg.kind,
            accumulated,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            protect_recent: cfg.resolved_protect(budget),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn protect_recent(&self) -> usize {
        self.protect_recent
    }

    pub fn accumulated(&self) -> Option<&[f64]> {
        self.accumulated.as_deref()
    }

    /// Adds the step's attention weights into the running per-slot scores.
    /// When `overwritten_slot` is given, that slot's history restarts at the
    /// new token's current weight.
    pub fn h2o_accumulate(
        &mut self,
        weights: &ScoreVec<f64>,
        overwritten_slot: Option<usize>,
    ) -> Result<()> {
        let acc = self.accumulated.as_mut().ok_or_else(|| {
            Error::Misuse(format!("h2o_accumulate on policy '{}'", self.kind))
        })?;
        if weights.len() != acc.len() {
            return Err(Error::DimMismatch { expected: acc.len(), got: weights.len() });
        }
        if let Some(slot) = overwritten_slot {
            if slot >= acc.len() {
                return Err(Error::IndexOutOfRange { index: slot, len: acc.len() });
            }
            acc[slot] = 0.0;
        }
        for ((a, &w), &m) in acc.iter_mut().zip(weights.scores()).zip(weights.masked()) {
            if !m {
                *a += w;
            }
        }
        Ok(())
    }

    /// Zeroes the accumulators of slots shed by a bulk compaction so the
    /// tokens that later refill them start fresh.
    pub fn note_evicted(&mut self, slots: &[usize]) {
        if let Some(acc) = self.accumulated.as_mut() {
            for &slot in slots {
                if slot < acc.len() {
                    acc[slot] = 0.0;
                }
            }
        }
    }

    /// Accumulated scores scaled by each valid slot's value L1 norm;
    /// eviction takes the argmin.
    pub fn vatp_score<T: Real>(&self, arena: &KvArena<T>) -> Result<ScoreVec<f64>> {
        if self.kind != PolicyKind::Vatp {
            return Err(Error::Misuse(format!("vatp_score on policy '{}'", self.kind)));
        }
        let acc = self.accumulated.as_ref().expect("vatp policy accumulates");
        let masked: Vec<bool> = arena.valid_mask().iter().map(|&v| !v).collect();
        let scores: Vec<f64> = (0..arena.capacity())
            .map(|slot| {
                if arena.is_valid(slot) {
                    acc[slot] * norms_wide(arena.value(slot)).l1
                } else {
                    0.0
                }
            })
            .collect();
        ScoreVec::new(scores, masked)
    }

    /// Valid slots open to eviction after removing the `protect_recent`
    /// most recently written ones. Ascending slot order.
    fn candidates<T: Real>(&self, arena: &KvArena<T>) -> Result<Vec<usize>> {
        let valid: Vec<usize> = arena.valid_slots().collect();
        let w = self.protect_recent;
        if w == 0 {
            return Ok(valid);
        }
        if w >= valid.len() {
            return Err(Error::NoCandidate);
        }
        let mut stamped: Vec<(u64, usize)> = valid
            .iter()
            .map(|&slot| (arena.log().last_write_stamp(slot), slot))
            .collect();
        // The w largest stamps are protected; keep the rest.
        let cut = stamped.len() - w;
        stamped.select_nth_unstable_by_key(cut - 1, |&(stamp, _)| stamp);
        let mut keep: Vec<usize> = stamped[..cut].iter().map(|&(_, slot)| slot).collect();
        keep.sort_unstable();
        Ok(keep)
    }

    /// Per-step eviction choice over a full cache, given the current step's
    /// fused result. For h2o/vatp this folds the step's weights into the
    /// accumulators first (restarting the slot overwritten this step), so
    /// callers must not also call [`Self::h2o_accumulate`] for the step.
    pub fn select_eviction<T: Real>(
        &mut self,
        step: &AttnStepResult<T>,
        arena: &KvArena<T>,
    ) -> Result<usize> {
        if !arena.is_full() {
            return Err(Error::Protocol("select_eviction before the cache is full".into()));
        }
        if self.kind.accumulates() {
            let overwritten = arena.log().overwrite_at_step(arena.step_counter());
            self.h2o_accumulate(&step.weights, overwritten)?;
        }
        let candidates = self.candidates(arena)?;
        self.pick_one(step, arena, &candidates)
    }

    fn pick_one<T: Real>(
        &mut self,
        step: &AttnStepResult<T>,
        arena: &KvArena<T>,
        candidates: &[usize],
    ) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::NoCandidate);
        }
        let chosen = match self.kind {
            PolicyKind::Random => *candidates
                .choose(&mut self.rng)
                .expect("candidates nonempty"),
            _ => {
                let keyed = self.ranking_scores(step, arena, candidates)?;
                candidates[argmin_slice(&keyed)]
            }
        };
        Ok(chosen)
    }

    /// Scores aligned with `candidates`; smaller means evict sooner.
    fn ranking_scores<T: Real>(
        &self,
        step: &AttnStepResult<T>,
        arena: &KvArena<T>,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        let scores = match self.kind {
            PolicyKind::LongFlow => candidates
                .iter()
                .map(|&s| step.longflow_scores.scores()[s])
                .collect(),
            PolicyKind::H2o => {
                let acc = self.accumulated.as_ref().expect("h2o accumulates");
                candidates.iter().map(|&s| acc[s]).collect()
            }
            PolicyKind::Vatp => {
                let acc = self.accumulated.as_ref().expect("vatp accumulates");
                candidates
                    .iter()
                    .map(|&s| acc[s] * norms_wide(arena.value(s)).l1)
                    .collect()
            }
            PolicyKind::Recency => candidates
                .iter()
                .map(|&s| arena.log().last_write_stamp(s) as f64)
                .collect(),
            PolicyKind::Random => {
                return Err(Error::Misuse("random policy has no ranking scores".into()))
            }
        };
        Ok(scores)
    }

    /// Picks `count` slots to shed in one compaction, worst-ranked first by
    /// slot order. Used by interval-mode baselines; the per-step policy
    /// never compacts in bulk.
    pub fn select_bulk<T: Real>(
        &mut self,
        arena: &KvArena<T>,
        count: usize,
    ) -> Result<Vec<usize>> {
        if self.kind == PolicyKind::LongFlow {
            return Err(Error::Misuse(
                "bulk compaction is not defined for the per-step policy".into(),
            ));
        }
        let candidates = self.candidates(arena)?;
        if candidates.len() < count {
            return Err(Error::NoCandidate);
        }
        let mut chosen: Vec<usize> = match self.kind {
            PolicyKind::Random => {
                let mut pool = candidates;
                pool.shuffle(&mut self.rng);
                pool.truncate(count);
                pool
            }
            PolicyKind::H2o | PolicyKind::Vatp | PolicyKind::Recency => {
                let acc = self.accumulated.as_deref();
                let mut keyed: Vec<(f64, usize)> = candidates
                    .iter()
                    .map(|&s| {
                        let score = match self.kind {
                            PolicyKind::H2o => acc.unwrap()[s],
                            PolicyKind::Vatp => acc.unwrap()[s] * norms_wide(arena.value(s)).l1,
                            PolicyKind::Recency => arena.log().last_write_stamp(s) as f64,
                            _ => unreachable!(),
                        };
                        (score, s)
                    })
                    .collect();
                keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                keyed.into_iter().take(count).map(|(_, s)| s).collect()
            }
            PolicyKind::LongFlow => unreachable!(),
        };
        chosen.sort_unstable();
        Ok(chosen)
    }
}

fn argmin_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// SnapKV-style prefill compression parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillCompressor {
    /// Trailing prompt positions whose queries score the prefix.
    pub observation_window: usize,
    /// Width of the 1-D max pool over token positions; odd.
    pub pool_kernel: usize,
    /// Tokens to keep.
    pub budget: usize,
}

impl PrefillCompressor {
    pub fn new(observation_window: usize, pool_kernel: usize, budget: usize) -> Result<Self> {
        if observation_window < 1 {
            return Err(Error::Config("observation_window must be >= 1".into()));
        }
        if pool_kernel < 1 || pool_kernel.is_multiple_of(2) {
            return Err(Error::Config("pool_kernel must be a positive odd integer".into()));
        }
        if budget < observation_window {
            return Err(Error::Config(format!(
                "budget {budget} smaller than observation window {observation_window}"
            )));
        }
        Ok(Self { observation_window, pool_kernel, budget })
    }
}

/// Scores prefix tokens by their mean attention weight under the trailing
/// observation queries, max-pools over positions, and keeps the top
/// `budget - w` prefix tokens plus the final `w` observation tokens.
/// Returns the kept source indices, ascending, always `budget` of them.
pub fn snapkv_compress<T: Real>(
    keys: &[VecF<T>],
    values: &[VecF<T>],
    obs_queries: &[VecF<T>],
    compressor: &PrefillCompressor,
) -> Result<Vec<usize>> {
    let n = keys.len();
    if values.len() != n {
        return Err(Error::DimMismatch { expected: n, got: values.len() });
    }
    let budget = compressor.budget;
    if n <= budget {
        return Err(Error::CompressionNotNeeded { tokens: n, budget });
    }
    let w = obs_queries.len();
    if w != compressor.observation_window {
        return Err(Error::Config(format!(
            "got {w} observation queries for a window of {}",
            compressor.observation_window
        )));
    }
    if w > n {
        return Err(Error::Config(format!(
            "observation window {w} longer than the {n}-token prefill"
        )));
    }

    // Observation tokens are always retained; when they alone exhaust the
    // budget, the kept set is simply the most recent `budget` tokens.
    if w >= budget {
        return Ok(((n - budget)..n).collect());
    }

    let prefix_len = n - w;
    let d = keys[0].dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // Mean attention weight of each prefix token over the observation
    // queries (softmax over prefix positions, max-subtracted).
    let mut mean_w = vec![0.0f64; prefix_len];
    for q in obs_queries {
        if q.dim() != d {
            return Err(Error::DimMismatch { expected: d, got: q.dim() });
        }
        let scores: Vec<f64> = (0..prefix_len)
            .map(|j| q.dot_wide(&keys[j]).map(|s| s * inv_sqrt_d))
            .collect::<Result<_>>()?;
        let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (acc, e) in mean_w.iter_mut().zip(&exps) {
            *acc += e / (z * w as f64);
        }
    }

    // 1-D max pool of width pool_kernel, centered, over token positions.
    let half = compressor.pool_kernel / 2;
    let pooled: Vec<f64> = (0..prefix_len)
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + half + 1).min(prefix_len);
            mean_w[lo..hi].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        })
        .collect();

    let keep_prefix = budget - w;
    let mut order: Vec<usize> = (0..prefix_len).collect();
    order.sort_by(|&a, &b| pooled[b].partial_cmp(&pooled[a]).unwrap().then(a.cmp(&b)));

    let mut kept: Vec<usize> = order[..keep_prefix].to_vec();
    kept.extend(prefix_len..n);
    kept.sort_unstable();
    debug_assert_eq!(kept.len(), budget);
    Ok(kept)
}
