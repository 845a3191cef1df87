//! End-to-end decode loop: prefill (compressed when over budget), per-step
//! attention + eviction under a chosen policy, and run metrics.
//!
//! Two drive modes share the loop. Per-step mode (compression interval 1)
//! keeps the cache at exactly `budget` slots and overwrites one token per
//! step through the arena protocol. Interval mode sizes the arena at
//! `budget + interval`, lets appends fill the slack, and sheds
//! `interval` tokens in one batch whenever the slack runs out — the
//! accumulated-score baselines default to this with interval 128.
//!
//! A parallel uncompressed cache (prefill included, never evicted) provides
//! the per-step output-perturbation reference. Its growth is why decode
//! length is capped by [`RunOptions::max_steps`].

use rayon::prelude::*;
use serde::Serialize;

use crate::arena::{KvArena, WriteSource};
use crate::attention::{fused_decode_step, BlockConfig};
use crate::error::{Error, Result};
use crate::numerics::VecF;
use crate::oracle::{error_decomposition, eviction_objectives, ErrorReport};
use crate::policies::{snapkv_compress, PolicyConfig, PolicyKind, PolicyState, PrefillCompressor};
use crate::scalar::Real;
use crate::trace::DecodeTrace;

/// Knobs for one decode run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub block: BlockConfig,
    /// Maintain the uncompressed reference cache and report the mean L2
    /// distance between its output and the budgeted cache's output.
    pub track_perturbation: bool,
    /// Compare each eviction choice against the brute-force objective
    /// argmin. Quadratic in the budget per step; off by default.
    pub oracle_agreement: bool,
    /// Collect a per-step [`ErrorReport`] for the evicted token.
    pub collect_error_reports: bool,
    /// Hard cap on executed decode steps.
    pub max_steps: usize,
    /// Observation window for prefill compression.
    pub snapkv_window: usize,
    /// Pooling kernel for prefill compression; positive odd.
    pub snapkv_pool_kernel: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            block: BlockConfig::default(),
            track_perturbation: true,
            oracle_agreement: false,
            collect_error_reports: false,
            max_steps: 32_768,
            snapkv_window: 32,
            snapkv_pool_kernel: 7,
        }
    }
}

/// Outcome of one policy run over one trace.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub policy: String,
    /// Decode steps executed.
    pub steps: usize,
    /// Tokens evicted (per-step overwrites plus batch compactions).
    pub evictions: usize,
    /// Fraction of eviction decisions matching the brute-force objective
    /// argmin; absent when no decision was checked.
    pub agreement_rate: Option<f64>,
    /// Mean 0-based rank of the chosen slot under the objective ordering.
    pub agreement_mean_rank: Option<f64>,
    /// Mean L2 distance to the uncompressed-cache output; absent when the
    /// reference cache is disabled.
    pub mean_output_perturbation: Option<f64>,
    /// Mean cosine similarity of adjacent trace queries; absent for
    /// single-step runs.
    pub mean_adjacent_query_cosine: Option<f64>,
    /// Steps on which the softmax overflow guard engaged.
    pub overflow_fallbacks: usize,
    /// Proxy operation count of the attention pass:
    /// `n (4 d + 4) + d` per step over `n` valid slots.
    pub attention_flops: u64,
    /// Proxy operation count of everything the policy adds on top.
    pub policy_flops: u64,
}

impl RunMetrics {
    /// Policy overhead relative to the attention work itself.
    pub fn policy_overhead_ratio(&self) -> f64 {
        if self.attention_flops == 0 {
            0.0
        } else {
            self.policy_flops as f64 / self.attention_flops as f64
        }
    }
}

/// A run plus whatever per-step diagnostics were requested.
#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub error_reports: Vec<ErrorReport>,
}

fn to_storage<T: Real>(v: &VecF<f64>) -> VecF<T> {
    VecF::from_wide_slice(v.as_slice())
}

/// Uncompressed reference cache: plain row storage plus textbook attention.
struct FullCache<T> {
    keys: Vec<VecF<T>>,
    values: Vec<VecF<T>>,
}

impl<T: Real> FullCache<T> {
    fn output(&self, q: &VecF<T>) -> Vec<f64> {
        let d = q.dim();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = self
            .keys
            .iter()
            .map(|k| q.dot_wide(k).expect("dims match") * inv_sqrt_d)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut out = vec![0.0f64; d];
        for (e, v) in exps.iter().zip(&self.values) {
            let w = e / z;
            for (o, &x) in out.iter_mut().zip(v.as_slice()) {
                *o += w * x.wide();
            }
        }
        out
    }
}

/// Incremental driver for one (trace, policy) run. [`run_decode`] wraps it;
/// stepping manually exposes the arena for invariant checks.
pub struct DecodeRun<'t, T: Real> {
    trace: &'t DecodeTrace,
    arena: KvArena<T>,
    policy: PolicyState,
    kind: PolicyKind,
    interval: usize,
    budget: usize,
    opts: RunOptions,
    reference: Option<FullCache<T>>,
    next_step: usize,
    steps_total: usize,
    evictions: usize,
    overflow_fallbacks: usize,
    perturbation_sum: f64,
    cosine_sum: f64,
    agreement_checked: usize,
    agreement_hits: usize,
    agreement_rank_sum: u64,
    attention_flops: u64,
    policy_flops: u64,
    error_reports: Vec<ErrorReport>,
}

impl<'t, T: Real> DecodeRun<'t, T> {
    pub fn new(
        trace: &'t DecodeTrace,
        policy_cfg: &PolicyConfig,
        budget: usize,
        opts: RunOptions,
    ) -> Result<Self> {
        if budget < 2 {
            return Err(Error::Config(format!("budget must be >= 2, got {budget}")));
        }
        if trace.steps.is_empty() {
            return Err(Error::Config("trace has no decode steps".into()));
        }
        let interval = policy_cfg.resolved_interval();
        if interval < 1 {
            return Err(Error::Config("compression interval must be >= 1".into()));
        }
        if interval > 1 && policy_cfg.kind == PolicyKind::LongFlow {
            return Err(Error::Config(
                "the per-step policy does not support batch compaction intervals".into(),
            ));
        }

        let capacity = if interval > 1 { budget + interval } else { budget };
        let mut arena = KvArena::<T>::allocate(capacity, trace.head_dim)?;

        let keys: Vec<VecF<T>> = trace.prefill.iter().map(|(k, _)| to_storage(k)).collect();
        let values: Vec<VecF<T>> = trace.prefill.iter().map(|(_, v)| to_storage(v)).collect();
        if keys.len() > budget {
            // Over-budget prompt: compress to the budget before decoding.
            // The trace carries no prompt queries, so the trailing prompt
            // keys stand in as the observation queries.
            let window = opts.snapkv_window.min(budget).min(keys.len()).max(1);
            let compressor = PrefillCompressor::new(window, opts.snapkv_pool_kernel, budget)?;
            let obs = &keys[keys.len() - window..];
            let kept = snapkv_compress(&keys, &values, obs, &compressor)?;
            arena.load_prefill(&keys, &values, Some(&kept))?;
        } else {
            arena.load_prefill(&keys, &values, None)?;
        }

        let mut policy = PolicyState::new(policy_cfg, budget, capacity);

        // Prompt already at capacity: the first append needs a decision in
        // place, so score the prompt-only cache with the first query.
        if arena.is_full() {
            let q0 = to_storage::<T>(&trace.steps[0].query);
            let attn = fused_decode_step(&q0, &arena, opts.block)?;
            let chosen = policy.select_eviction(&attn, &arena)?;
            arena.set_eviction(chosen)?;
        }

        let reference = opts.track_perturbation.then(|| FullCache {
            keys: trace.prefill.iter().map(|(k, _)| to_storage(k)).collect(),
            values: trace.prefill.iter().map(|(_, v)| to_storage(v)).collect(),
        });

        let steps_total = trace.steps.len().min(opts.max_steps);
        Ok(Self {
            trace,
            arena,
            policy,
            kind: policy_cfg.kind,
            interval,
            budget,
            opts,
            reference,
            next_step: 0,
            steps_total,
            evictions: 0,
            overflow_fallbacks: 0,
            perturbation_sum: 0.0,
            cosine_sum: 0.0,
            agreement_checked: 0,
            agreement_hits: 0,
            agreement_rank_sum: 0,
            attention_flops: 0,
            policy_flops: 0,
            error_reports: Vec::new(),
        })
    }

    pub fn arena(&self) -> &KvArena<T> {
        &self.arena
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn steps_remaining(&self) -> usize {
        self.steps_total - self.next_step
    }

    /// Executes one decode step. Returns false when the trace (or the step
    /// cap) is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        if self.next_step >= self.steps_total {
            return Ok(false);
        }
        let t = self.next_step;
        let step = &self.trace.steps[t];
        let q = to_storage::<T>(&step.query);
        let k = to_storage::<T>(&step.key);
        let v = to_storage::<T>(&step.value);

        // Interval mode: shed the slack in one batch when it runs out.
        if self.interval > 1 && self.arena.valid_count() == self.arena.capacity() {
            let count = self.arena.valid_count() - self.budget;
            let shed = self.policy.select_bulk(&self.arena, count)?;
            self.arena.invalidate_slots(&shed)?;
            self.policy.note_evicted(&shed);
            self.evictions += shed.len();
            let n = (self.budget + count) as u64;
            self.policy_flops += bulk_selection_flops(self.kind, n, self.trace.head_dim as u64);
        }

        let written = self.arena.append_or_overwrite(&k, &v)?;
        let overwrote = self
            .arena
            .log()
            .records()
            .last()
            .is_some_and(|r| r.slot == written && r.source == WriteSource::Overwrite);
        if overwrote {
            self.evictions += 1;
        }

        let attn = fused_decode_step(&q, &self.arena, self.opts.block)?;
        if attn.overflow_fallback {
            self.overflow_fallbacks += 1;
        }
        let n = self.arena.valid_count() as u64;
        let d = self.trace.head_dim as u64;
        self.attention_flops += n * (4 * d + 4) + d;
        self.policy_flops += per_step_policy_flops(self.kind, n, d);

        // Per-step eviction decision once the cache is full.
        let mut chosen = None;
        if self.interval == 1 && self.arena.is_full() {
            let slot = if self.kind == PolicyKind::LongFlow && self.policy.protect_recent() == 0 {
                attn.evict_slot
            } else {
                self.policy.select_eviction(&attn, &self.arena)?
            };
            self.arena.set_eviction(slot)?;
            chosen = Some(slot);
            self.policy_flops += selection_flops(self.kind, n, d);
        } else if matches!(self.kind, PolicyKind::H2o | PolicyKind::Vatp) {
            // Gap step: keep the running scores current. Appends here land
            // in fresh slots, so no history restart is needed.
            self.policy.h2o_accumulate(&attn.weights, None)?;
        }

        if let Some(reference) = self.reference.as_mut() {
            reference.keys.push(k.clone());
            reference.values.push(v.clone());
            let full = reference.output(&q);
            let dist: f64 = attn
                .output
                .as_slice()
                .iter()
                .zip(&full)
                .map(|(a, b)| {
                    let e = a.wide() - b;
                    e * e
                })
                .sum::<f64>()
                .sqrt();
            self.perturbation_sum += dist;
        }

        if self.opts.oracle_agreement && self.kind == PolicyKind::LongFlow {
            if let Some(slot) = chosen {
                if self.arena.valid_count() >= 2 {
                    let objectives = eviction_objectives(&q, &self.arena)?;
                    let mut best = objectives[0];
                    for &cand in &objectives[1..] {
                        if cand.1 < best.1 {
                            best = cand;
                        }
                    }
                    let chosen_obj = objectives
                        .iter()
                        .find(|&&(s, _)| s == slot)
                        .expect("chosen slot is valid")
                        .1;
                    let rank = objectives
                        .iter()
                        .filter(|&&(s, obj)| obj < chosen_obj || (obj == chosen_obj && s < slot))
                        .count() as u64;
                    self.agreement_checked += 1;
                    if best.0 == slot {
                        self.agreement_hits += 1;
                    }
                    self.agreement_rank_sum += rank;
                }
            }
        }

        if self.opts.collect_error_reports {
            if let Some(slot) = chosen {
                if t + 1 < self.trace.steps.len() && self.arena.valid_count() >= 2 {
                    let q_next = to_storage::<T>(&self.trace.steps[t + 1].query);
                    self.error_reports
                        .push(error_decomposition(&q, &q_next, &self.arena, slot)?);
                }
            }
        }

        if t >= 1 {
            self.cosine_sum += crate::numerics::cosine_similarity(
                &self.trace.steps[t - 1].query,
                &step.query,
            )?;
        }

        self.next_step += 1;
        Ok(true)
    }

    /// Runs to completion and produces the metrics.
    pub fn run(mut self) -> Result<RunOutcome> {
        while self.step()? {}
        Ok(self.finish())
    }

    pub fn finish(self) -> RunOutcome {
        let steps = self.next_step;
        let metrics = RunMetrics {
            policy: self.kind.name().to_string(),
            steps,
            evictions: self.evictions,
            agreement_rate: (self.agreement_checked > 0)
                .then(|| self.agreement_hits as f64 / self.agreement_checked as f64),
            agreement_mean_rank: (self.agreement_checked > 0)
                .then(|| self.agreement_rank_sum as f64 / self.agreement_checked as f64),
            mean_output_perturbation: self
                .reference
                .is_some()
                .then(|| if steps == 0 { 0.0 } else { self.perturbation_sum / steps as f64 }),
            mean_adjacent_query_cosine: (steps >= 2)
                .then(|| self.cosine_sum / (steps - 1) as f64),
            overflow_fallbacks: self.overflow_fallbacks,
            attention_flops: self.attention_flops,
            policy_flops: self.policy_flops,
        };
        RunOutcome { metrics, error_reports: self.error_reports }
    }
}

/// Per-step policy work on top of the attention pass. The importance score
/// reduction reuses the contribution rows, so its only extra arithmetic is
/// the L1 reduce, the normalization, and the argmin.
fn per_step_policy_flops(kind: PolicyKind, n: u64, d: u64) -> u64 {
    match kind {
        PolicyKind::LongFlow => n * d + 2 * n,
        PolicyKind::H2o | PolicyKind::Vatp => n, // accumulate
        PolicyKind::Recency | PolicyKind::Random => 0,
    }
}

/// Extra work of one eviction selection.
fn selection_flops(kind: PolicyKind, n: u64, d: u64) -> u64 {
    match kind {
        PolicyKind::LongFlow => 0, // argmin already counted per step
        PolicyKind::H2o => n,
        PolicyKind::Vatp => n * (d + 1) + n,
        PolicyKind::Recency => n,
        PolicyKind::Random => 1,
    }
}

/// Extra work of one batch compaction.
fn bulk_selection_flops(kind: PolicyKind, n: u64, d: u64) -> u64 {
    let log_n = (64 - n.leading_zeros().min(63)) as u64;
    match kind {
        PolicyKind::LongFlow => 0,
        PolicyKind::H2o => n * log_n,
        PolicyKind::Vatp => n * (d + 1) + n * log_n,
        PolicyKind::Recency => n * log_n,
        PolicyKind::Random => n,
    }
}

/// Runs one policy over the trace at storage precision `T`.
pub fn run_decode<T: Real>(
    trace: &DecodeTrace,
    policy_cfg: &PolicyConfig,
    budget: usize,
    opts: RunOptions,
) -> Result<RunMetrics> {
    Ok(DecodeRun::<T>::new(trace, policy_cfg, budget, opts)?.run()?.metrics)
}

/// Runs each policy on the identical trace; one metrics row per policy in
/// input order. Runs are independent and execute in parallel.
pub fn compare_policies<T: Real>(
    trace: &DecodeTrace,
    policies: &[PolicyConfig],
    budget: usize,
    opts: &RunOptions,
) -> Result<Vec<RunMetrics>> {
    if policies.is_empty() {
        return Err(Error::Config("compare needs at least one policy".into()));
    }
    policies
        .par_iter()
        .map(|cfg| run_decode::<T>(trace, cfg, budget, opts.clone()))
        .collect()
}
