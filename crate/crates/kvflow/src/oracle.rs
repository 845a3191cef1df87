//! Brute-force oracles and bound checkers for the eviction approximation.
//!
//! Everything here recomputes attention from the definition in `f64`,
//! independently of the fused pass it is used to judge:
//!
//! * the exact output change from dropping one token, with the softmax
//!   denominator honestly recomputed over the remaining tokens;
//! * the closed-form remainder `R = -a/(1-a) (o - c)` and its norm bound
//!   `2 V a / (1 - a)` with `V = max_j ||v_j||_2`;
//! * the renormalized-weight identity `w_j / (1 - w_i)`;
//! * the query-drift bound `sqrt(2 (1 - cos)) * max_j ||k_j|| / sqrt(d)` on
//!   the maximum pre-softmax score change;
//! * the triangle decomposition of the total approximation error into a
//!   denominator term and a query-drift term.
//!
//! [`run_verification`] drives all of the above over seeded random
//! instances, including adversarial draws that push the evicted token's
//! attention weight toward 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::KvArena;
use crate::error::{Error, Result};
use crate::numerics::{ScoreVec, VecF};
use crate::scalar::Real;

/// Tolerance for exact algebraic identities evaluated in `f64`.
pub const TOL_IDENTITY: f64 = 1e-9;
/// Slack allowed on inequalities that hold exactly in real arithmetic.
pub const TOL_BOUND: f64 = 1e-9;
/// Tolerance for identities expected to hold to near machine precision.
pub const TOL_EXACT: f64 = 1e-12;

/// Full error decomposition for one (step, token) pair.
///
/// `exact_change`, `contribution`, and `remainder` are evaluated at the
/// next-step query; `drift_error` compares the contribution norm against
/// the current-step one. Invariants: `exact_change == contribution +
/// remainder` within [`TOL_IDENTITY`]; `remainder_norm <= remainder_bound +
/// TOL_BOUND`; `total_error <= denom_error + drift_error + TOL_BOUND`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub token: usize,
    /// Exact output change from evicting the token.
    pub exact_change: VecF<f64>,
    /// Contribution vector `weight * value` of the token.
    pub contribution: VecF<f64>,
    /// Closed-form remainder.
    pub remainder: VecF<f64>,
    pub remainder_norm: f64,
    /// `2 V a / (1 - a)`.
    pub remainder_bound: f64,
    /// `| ||exact_change||^2 - ||contribution||^2 |` at the next step.
    pub denom_error: f64,
    /// `| ||c_next||^2 - ||c_now||^2 |`.
    pub drift_error: f64,
    /// `| ||exact_change||^2 - ||c_now||^2 |`.
    pub total_error: f64,
    /// Score-drift bound for the unit-normalized query pair.
    pub drift_bound: f64,
    /// L1 norm of the token's value vector (the deployed score uses it).
    pub value_l1: f64,
    /// L2 norm of the token's value vector (the bound uses it).
    pub value_l2: f64,
}

/// Raw softmax weights over the valid slots, computed from the definition
/// with a max shift. Returns (weights per slot, valid slot list).
fn raw_weights<T: Real>(q: &VecF<T>, arena: &KvArena<T>, skip: Option<usize>) -> Vec<f64> {
    let d = arena.head_dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut scores = vec![f64::NEG_INFINITY; arena.capacity()];
    let mut max_s = f64::NEG_INFINITY;
    for slot in arena.valid_slots() {
        if Some(slot) == skip {
            continue;
        }
        let mut s = 0.0;
        for (a, b) in q.as_slice().iter().zip(arena.key(slot)) {
            s += a.wide() * b.wide();
        }
        let s = s * inv_sqrt_d;
        scores[slot] = s;
        max_s = max_s.max(s);
    }
    let mut z = 0.0;
    let mut exps = vec![0.0f64; arena.capacity()];
    for slot in arena.valid_slots() {
        if Some(slot) == skip {
            continue;
        }
        let p = (scores[slot] - max_s).exp();
        exps[slot] = p;
        z += p;
    }
    exps.iter_mut().for_each(|p| *p /= z);
    exps
}

fn weighted_value_sum<T: Real>(arena: &KvArena<T>, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; arena.head_dim()];
    for slot in arena.valid_slots() {
        let w = weights[slot];
        if w == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(arena.value(slot)) {
            *o += w * x.wide();
        }
    }
    out
}

fn check_evictable<T: Real>(arena: &KvArena<T>, i: usize) -> Result<()> {
    if i >= arena.capacity() {
        return Err(Error::IndexOutOfRange { index: i, len: arena.capacity() });
    }
    if !arena.is_valid(i) {
        return Err(Error::InvalidSlot(i));
    }
    if arena.valid_count() < 2 {
        return Err(Error::EmptyPostEviction);
    }
    Ok(())
}

/// `o - o_without_i`, with the reduced output's softmax denominator
/// recomputed over the remaining tokens.
pub fn exact_output_change<T: Real>(
    q: &VecF<T>,
    arena: &KvArena<T>,
    i: usize,
) -> Result<VecF<f64>> {
    check_evictable(arena, i)?;
    let full = weighted_value_sum(arena, &raw_weights(q, arena, None));
    let reduced = weighted_value_sum(arena, &raw_weights(q, arena, Some(i)));
    let delta: Vec<f64> = full.iter().zip(&reduced).map(|(a, b)| a - b).collect();
    Ok(VecF::from_wide_slice(&delta))
}

/// Closed-form remainder `-a/(1-a) (o - c)` of the denominator
/// approximation.
pub fn remainder_closed_form(o: &VecF<f64>, c_i: &VecF<f64>, alpha_i: f64) -> Result<VecF<f64>> {
    if !(0.0..1.0).contains(&alpha_i) {
        if alpha_i == 1.0 {
            return Err(Error::Singularity("cannot evict sole mass carrier"));
        }
        return Err(Error::Domain(format!("attention weight {alpha_i} outside [0, 1)")));
    }
    if o.dim() != c_i.dim() {
        return Err(Error::DimMismatch { expected: o.dim(), got: c_i.dim() });
    }
    let factor = -alpha_i / (1.0 - alpha_i);
    let r: Vec<f64> = o
        .as_slice()
        .iter()
        .zip(c_i.as_slice())
        .map(|(a, b)| factor * (a - b))
        .collect();
    Ok(VecF::from_wide_slice(&r))
}

/// Norm bound `2 V a / (1 - a)` on the remainder, with `V` an upper bound
/// on the value L2 norms.
pub fn remainder_bound(alpha_i: f64, v_max: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha_i) {
        return Err(Error::Domain(format!("attention weight {alpha_i} outside [0, 1)")));
    }
    if v_max < 0.0 {
        return Err(Error::Domain("value norm bound must be nonnegative".into()));
    }
    Ok(2.0 * v_max * alpha_i / (1.0 - alpha_i))
}

/// Weights after removing entry `i`: `w_j / (1 - w_i)` for `j != i`, zero
/// and masked at `i`. Equals a softmax recomputed over the reduced score
/// set. The denominator is evaluated as the complementary weight sum,
/// which is the same quantity without the cancellation `1 - w_i` suffers
/// when `w_i` is close to 1.
pub fn renormalized_weights(weights: &ScoreVec<f64>, i: usize) -> Result<ScoreVec<f64>> {
    if i >= weights.len() {
        return Err(Error::IndexOutOfRange { index: i, len: weights.len() });
    }
    let wi = weights.scores()[i];
    if wi >= 1.0 {
        return Err(Error::Singularity("cannot evict sole mass carrier"));
    }
    let remaining: f64 = weights
        .scores()
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &w)| w)
        .sum();
    if remaining <= 0.0 {
        return Err(Error::Singularity("cannot evict sole mass carrier"));
    }
    let mut masked = weights.masked().to_vec();
    let scores: Vec<f64> = weights
        .scores()
        .iter()
        .enumerate()
        .map(|(j, &w)| if j == i { 0.0 } else { w / remaining })
        .collect();
    masked[i] = true;
    ScoreVec::new(scores, masked)
}

/// Both sides of the score-drift inequality for one query pair over the
/// cached keys.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QueryDriftCheck {
    /// `sqrt(2 (1 - cos)) * max_j ||k_j||_2 / sqrt(d)` for the
    /// unit-normalized pair, evaluated as the normalized difference norm so
    /// identical queries give exactly zero.
    pub bound: f64,
    /// Observed `max_j |s'_j - s_j|` under the normalized queries.
    pub actual: f64,
    /// `||q' - q||_2 * max_j ||k_j||_2 / sqrt(d)` on the raw queries, for
    /// traces that are not unit-normalized.
    pub cauchy_schwarz_bound: f64,
    /// Cosine similarity of the raw queries.
    pub cosine: f64,
    /// Whether both inputs already had unit norm (within 1e-6).
    pub inputs_unit_norm: bool,
}

/// Bounds the per-token score change between two queries by their angular
/// distance. Queries are normalized internally; zero queries error.
pub fn query_drift_bound<T: Real>(
    q_t: &VecF<T>,
    q_next: &VecF<T>,
    arena: &KvArena<T>,
) -> Result<QueryDriftCheck> {
    if q_t.dim() != arena.head_dim() || q_next.dim() != arena.head_dim() {
        return Err(Error::DimMismatch { expected: arena.head_dim(), got: q_t.dim() });
    }
    let n_t = q_t.norms().l2;
    let n_next = q_next.norms().l2;
    if n_t == 0.0 || n_next == 0.0 {
        return Err(Error::ZeroVector("zero query has no direction"));
    }
    let inputs_unit_norm = (n_t - 1.0).abs() <= 1e-6 && (n_next - 1.0).abs() <= 1e-6;

    let qa: Vec<f64> = q_t.as_slice().iter().map(|x| x.wide() / n_t).collect();
    let qb: Vec<f64> = q_next.as_slice().iter().map(|x| x.wide() / n_next).collect();
    let diff_norm = qa
        .iter()
        .zip(&qb)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let d = arena.head_dim() as f64;
    let max_key_norm = arena
        .valid_slots()
        .map(|slot| {
            arena.key(slot).iter().map(|x| x.wide() * x.wide()).sum::<f64>().sqrt()
        })
        .fold(0.0f64, f64::max);

    // For unit vectors ||q' - q|| = sqrt(2 (1 - cos)); the difference form
    // is exact at zero drift.
    let bound = diff_norm * max_key_norm / d.sqrt();

    let mut actual = 0.0f64;
    for slot in arena.valid_slots() {
        let mut ds = 0.0;
        for ((a, b), k) in qa.iter().zip(&qb).zip(arena.key(slot)) {
            ds += (b - a) * k.wide();
        }
        actual = actual.max((ds / d.sqrt()).abs());
    }

    let raw_diff = q_t
        .as_slice()
        .iter()
        .zip(q_next.as_slice())
        .map(|(a, b)| {
            let e = a.wide() - b.wide();
            e * e
        })
        .sum::<f64>()
        .sqrt();

    let cosine = crate::numerics::cosine_similarity(q_t, q_next)?;
    debug_assert!(actual <= bound + TOL_BOUND);

    Ok(QueryDriftCheck {
        bound,
        actual,
        cauchy_schwarz_bound: raw_diff * max_key_norm / d.sqrt(),
        cosine,
        inputs_unit_norm,
    })
}

/// Assembles the full [`ErrorReport`] for evicting token `i` between the
/// current and next query.
pub fn error_decomposition<T: Real>(
    q_t: &VecF<T>,
    q_next: &VecF<T>,
    arena: &KvArena<T>,
    i: usize,
) -> Result<ErrorReport> {
    check_evictable(arena, i)?;

    let w_next = raw_weights(q_next, arena, None);
    let w_now = raw_weights(q_t, arena, None);
    let alpha_next = w_next[i];
    let alpha_now = w_now[i];

    let o_next = weighted_value_sum(arena, &w_next);
    let value_wide: Vec<f64> = arena.value(i).iter().map(|x| x.wide()).collect();
    let c_next: Vec<f64> = value_wide.iter().map(|x| alpha_next * x).collect();
    let c_now: Vec<f64> = value_wide.iter().map(|x| alpha_now * x).collect();

    let exact_change = exact_output_change(q_next, arena, i)?;
    let o_next_v = VecF::<f64>::from_wide_slice(&o_next);
    let c_next_v = VecF::<f64>::from_wide_slice(&c_next);
    let remainder = remainder_closed_form(&o_next_v, &c_next_v, alpha_next)?;

    let value_norms = crate::numerics::norms_wide(arena.value(i));
    let v_max = arena
        .valid_slots()
        .map(|slot| crate::numerics::norms_wide(arena.value(slot)).l2)
        .fold(0.0f64, f64::max);

    let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    let change_sq = sq(exact_change.as_slice());
    let c_next_sq = sq(&c_next);
    let c_now_sq = sq(&c_now);

    let drift = query_drift_bound(q_t, q_next, arena)?;

    Ok(ErrorReport {
        token: i,
        remainder_norm: sq(remainder.as_slice()).sqrt(),
        remainder_bound: remainder_bound(alpha_next, v_max)?,
        denom_error: (change_sq - c_next_sq).abs(),
        drift_error: (c_next_sq - c_now_sq).abs(),
        total_error: (change_sq - c_now_sq).abs(),
        drift_bound: drift.bound,
        value_l1: value_norms.l1,
        value_l2: value_norms.l2,
        exact_change,
        contribution: c_next_v,
        remainder,
    })
}

/// Squared-L2 output change for every valid slot, ascending slot order.
pub fn eviction_objectives<T: Real>(q: &VecF<T>, arena: &KvArena<T>) -> Result<Vec<(usize, f64)>> {
    if arena.valid_count() < 2 {
        return Err(Error::EmptyPostEviction);
    }
    arena
        .valid_slots()
        .map(|slot| {
            let delta = exact_output_change(q, arena, slot)?;
            let obj = delta.as_slice().iter().map(|x| x * x).sum::<f64>();
            Ok((slot, obj))
        })
        .collect()
}

/// Slot whose removal changes the current output least (squared L2),
/// lowest index on ties.
pub fn oracle_evict_index<T: Real>(q: &VecF<T>, arena: &KvArena<T>) -> Result<usize> {
    let objectives = eviction_objectives(q, arena)?;
    let mut best = objectives[0];
    for &(slot, obj) in &objectives[1..] {
        if obj < best.1 {
            best = (slot, obj);
        }
    }
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// Seeded verification suite
// ---------------------------------------------------------------------------

/// Self-contained random instance: cache contents, a query pair, and the
/// token under eviction. Serialized verbatim when a check fails so the case
/// can be replayed in isolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyInstance {
    pub head_dim: usize,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub q_t: Vec<f64>,
    pub q_next: Vec<f64>,
    pub token: usize,
}

impl VerifyInstance {
    /// Snapshots an arena's live slots (ascending slot order) together with
    /// a query pair into the serializable instance form.
    pub fn from_arena<T: Real>(
        arena: &KvArena<T>,
        q_t: &VecF<T>,
        q_next: &VecF<T>,
        token: usize,
    ) -> Result<Self> {
        if !arena.is_valid(token) {
            return Err(Error::InvalidSlot(token));
        }
        let mut keys = Vec::with_capacity(arena.valid_count());
        let mut values = Vec::with_capacity(arena.valid_count());
        let mut snapshot_token = 0;
        for (row, slot) in arena.valid_slots().enumerate() {
            keys.push(arena.key(slot).iter().map(|x| x.wide()).collect());
            values.push(arena.value(slot).iter().map(|x| x.wide()).collect());
            if slot == token {
                snapshot_token = row;
            }
        }
        Ok(Self {
            head_dim: arena.head_dim(),
            keys,
            values,
            q_t: q_t.to_wide(),
            q_next: q_next.to_wide(),
            token: snapshot_token,
        })
    }

    pub fn arena(&self) -> Result<KvArena<f64>> {
        let keys: Vec<VecF<f64>> = self
            .keys
            .iter()
            .map(|k| VecF::new(k.clone()))
            .collect::<Result<_>>()?;
        let values: Vec<VecF<f64>> = self
            .values
            .iter()
            .map(|v| VecF::new(v.clone()))
            .collect::<Result<_>>()?;
        let mut arena = KvArena::allocate(self.keys.len().max(2), self.head_dim)?;
        arena.load_prefill(&keys, &values, None)?;
        Ok(arena)
    }
}

/// Outcome of every check on one instance. Gap fields are signed slack:
/// negative or tiny positive values pass, anything above tolerance fails.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceChecks {
    pub report: ErrorReport,
    /// Next-step attention weight of the token under eviction.
    pub alpha_next: f64,
    /// `max_k |exact_change_k - (contribution + remainder)_k|`.
    pub identity_gap: f64,
    /// `remainder_norm - remainder_bound`.
    pub remainder_slack: f64,
    /// `total_error - (denom_error + drift_error)`.
    pub triangle_slack: f64,
    /// `max_j |colsum_j - 2 w_j (1 - w_j)|` over the next-step weights.
    pub colsum_gap: f64,
    /// `max_j colsum_j - 0.5`.
    pub colsum_cap_slack: f64,
    /// `||w_next - w_now||_1 - ||s_next - s_now||_inf`.
    pub lipschitz_slack: f64,
    /// `|alpha_next - alpha_now| - drift_bound` (unit-normalized queries
    /// only; 0 otherwise).
    pub weight_drift_slack: f64,
    /// Observed score drift minus the drift bound.
    pub score_drift_slack: f64,
    /// `max_j |renormalized_j - reduced_softmax_j|`.
    pub renorm_gap: f64,
    pub failure: Option<String>,
}

impl InstanceChecks {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Parameters of the seeded verification sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyParams {
    pub instances: usize,
    pub seed: u64,
    /// Head dimensions sampled round-robin.
    pub dims: Vec<usize>,
    /// Cache sizes drawn uniformly from `2..=max_tokens`.
    pub max_tokens: usize,
    /// Fraction of instances that force the evicted token's next-step
    /// attention weight up to [`Self::adversarial_alpha_max`].
    pub adversarial_fraction: f64,
    pub adversarial_alpha_max: f64,
    /// Query-drift magnitudes cycled across instances.
    pub drifts: Vec<f64>,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            instances: 10_000,
            seed: 0,
            dims: vec![1, 8, 64],
            max_tokens: 128,
            adversarial_fraction: 0.2,
            adversarial_alpha_max: 0.99,
            drifts: vec![0.0, 0.01, 0.1, 0.5],
        }
    }
}

fn unit_normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit-sphere step of size controlled by `drift`; `drift == 0` copies the
/// input bitwise, so zero-drift pairs have exactly zero score change.
pub fn drift_query(rng: &mut ChaCha8Rng, q: &[f64], drift: f64) -> Vec<f64> {
    if drift == 0.0 {
        return q.to_vec();
    }
    loop {
        let g = unit_normal_vec(rng, q.len());
        let mixed: Vec<f64> = q
            .iter()
            .zip(&g)
            .map(|(a, b)| (1.0 - drift) * a + drift * b)
            .collect();
        let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return mixed.iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws one random instance. Index `idx` steers the dimension and drift
/// cycling so a parallel sweep is identical to a sequential one.
pub fn sample_instance(params: &VerifyParams, idx: u64) -> VerifyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let d = params.dims[(idx as usize) % params.dims.len()];
    let drift = params.drifts[(idx as usize / params.dims.len()) % params.drifts.len()];
    let n = rng.random_range(2..=params.max_tokens.max(2));

    let keys: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let values: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    let q_t = unit_normal_vec(&mut rng, d);
    let q_next = drift_query(&mut rng, &q_t, drift);
    let token = rng.random_range(0..n);

    let mut inst = VerifyInstance { head_dim: d, keys, values, q_t, q_next, token };

    // Adversarial draws pin the token's next-step attention weight near a
    // target by pointing its key along the next query with a solved-for
    // scale.
    let adversarial = (idx as f64 / params.instances.max(1) as f64) < params.adversarial_fraction;
    if adversarial && n >= 2 {
        let target: f64 = rng.random_range(0.5..params.adversarial_alpha_max);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let qn = &inst.q_next;
        let qn_sq: f64 = qn.iter().map(|x| x * x).sum();
        let others: f64 = (0..n)
            .filter(|&j| j != inst.token)
            .map(|j| {
                let s: f64 = qn.iter().zip(&inst.keys[j]).map(|(a, b)| a * b).sum();
                (s * inv_sqrt_d).exp()
            })
            .sum();
        // exp(s_i) = target/(1-target) * sum_others  =>  solve the score,
        // then scale the key so q_next . k_i / sqrt(d) hits it.
        let s_i = (target / (1.0 - target) * others).ln();
        let scale = s_i / (qn_sq * inv_sqrt_d);
        inst.keys[inst.token] = qn.iter().map(|x| x * scale).collect();
    }
    inst
}

/// Runs every oracle check on one instance.
pub fn check_instance(inst: &VerifyInstance) -> Result<InstanceChecks> {
    let arena = inst.arena()?;
    let q_t = VecF::new(inst.q_t.clone())?;
    let q_next = VecF::new(inst.q_next.clone())?;

    let report = error_decomposition(&q_t, &q_next, &arena, inst.token)?;

    let identity_gap = report
        .exact_change
        .as_slice()
        .iter()
        .zip(report.contribution.as_slice().iter().zip(report.remainder.as_slice()))
        .map(|(e, (c, r))| (e - (c + r)).abs())
        .fold(0.0f64, f64::max);
    let remainder_slack = report.remainder_norm - report.remainder_bound;
    let triangle_slack = report.total_error - (report.denom_error + report.drift_error);

    // Softmax Jacobian column sums and the Lipschitz pairing, on the
    // instance's two score vectors.
    let w_now = raw_weights(&q_t, &arena, None);
    let w_next = raw_weights(&q_next, &arena, None);
    let masked: Vec<bool> = arena.valid_mask().iter().map(|&v| !v).collect();
    let w_next_sv = ScoreVec::new(w_next.clone(), masked.clone())?;

    let mut colsum_gap = 0.0f64;
    let mut colsum_max = 0.0f64;
    for (j, &wj) in w_next.iter().enumerate() {
        let col = crate::numerics::softmax_jacobian_colsum(&w_next_sv, j)?;
        colsum_gap = colsum_gap.max((col - 2.0 * wj * (1.0 - wj)).abs());
        colsum_max = colsum_max.max(col);
    }

    let inv_sqrt_d = 1.0 / (inst.head_dim as f64).sqrt();
    let score = |q: &[f64], k: &[f64]| -> f64 {
        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d
    };
    let mut linf = 0.0f64;
    for slot in arena.valid_slots() {
        let key: Vec<f64> = arena.key(slot).to_vec();
        linf = linf.max((score(&inst.q_next, &key) - score(&inst.q_t, &key)).abs());
    }
    let l1: f64 = w_now.iter().zip(&w_next).map(|(a, b)| (a - b).abs()).sum();
    let lipschitz_slack = l1 - linf;

    let drift = query_drift_bound(&q_t, &q_next, &arena)?;
    let score_drift_slack = drift.actual - drift.bound;
    // Per-weight drift is bounded by the score-drift bound only for
    // unit-norm inputs, which the sampler produces.
    let weight_drift_slack = if drift.inputs_unit_norm {
        (w_next[inst.token] - w_now[inst.token]).abs() - drift.bound
    } else {
        0.0
    };

    // Renormalization identity against a softmax recomputed over the
    // reduced score set.
    let w_now_sv = ScoreVec::new(w_now.clone(), masked)?;
    let renorm = renormalized_weights(&w_now_sv, inst.token)?;
    let reduced = raw_weights(&q_t, &arena, Some(inst.token));
    let renorm_gap = renorm
        .scores()
        .iter()
        .zip(&reduced)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let mut failure = None;
    let mut fail = |name: &str, value: f64, tol: f64| {
        if value > tol && failure.is_none() {
            failure = Some(format!("{name}: {value:.3e} exceeds {tol:.0e}"));
        }
    };
    fail("identity_gap", identity_gap, TOL_IDENTITY);
    fail("remainder_slack", remainder_slack, TOL_BOUND);
    fail("triangle_slack", triangle_slack, TOL_BOUND);
    fail("colsum_gap", colsum_gap, TOL_EXACT);
    fail("colsum_cap_slack", colsum_max - 0.5, TOL_EXACT);
    fail("lipschitz_slack", lipschitz_slack, TOL_BOUND);
    fail("score_drift_slack", score_drift_slack, TOL_BOUND);
    fail("weight_drift_slack", weight_drift_slack, TOL_BOUND);
    fail("renorm_gap", renorm_gap, TOL_EXACT);

    Ok(InstanceChecks {
        report,
        alpha_next: w_next[inst.token],
        identity_gap,
        remainder_slack,
        triangle_slack,
        colsum_gap,
        colsum_cap_slack: colsum_max - 0.5,
        lipschitz_slack,
        weight_drift_slack,
        score_drift_slack,
        renorm_gap,
        failure,
    })
}

/// Aggregate outcome of a verification sweep.
#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub instances: usize,
    pub violations: usize,
    pub max_identity_gap: f64,
    pub max_remainder_slack: f64,
    pub max_triangle_slack: f64,
    pub max_colsum_gap: f64,
    pub max_lipschitz_slack: f64,
    pub max_score_drift_slack: f64,
    pub max_renorm_gap: f64,
}

/// One failed instance with enough context to replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyFailure {
    pub index: u64,
    pub reason: String,
    pub instance: VerifyInstance,
}

pub struct VerifyOutcome {
    pub summary: VerifySummary,
    pub checks: Vec<InstanceChecks>,
    pub first_failure: Option<VerifyFailure>,
}

/// Runs the verification sweep; instances are independent and checked in
/// parallel, with results identical to a sequential run.
pub fn run_verification(params: &VerifyParams) -> Result<VerifyOutcome> {
    let checks: Vec<(u64, Result<InstanceChecks>)> = (0..params.instances as u64)
        .into_par_iter()
        .map(|idx| (idx, check_instance(&sample_instance(params, idx))))
        .collect();

    let mut out = Vec::with_capacity(checks.len());
    let mut first_failure: Option<VerifyFailure> = None;
    let mut summary = VerifySummary {
        instances: params.instances,
        violations: 0,
        max_identity_gap: 0.0,
        max_remainder_slack: f64::NEG_INFINITY,
        max_triangle_slack: f64::NEG_INFINITY,
        max_colsum_gap: 0.0,
        max_lipschitz_slack: f64::NEG_INFINITY,
        max_score_drift_slack: f64::NEG_INFINITY,
        max_renorm_gap: 0.0,
    };

    for (idx, res) in checks {
        let c = res?;
        summary.max_identity_gap = summary.max_identity_gap.max(c.identity_gap);
        summary.max_remainder_slack = summary.max_remainder_slack.max(c.remainder_slack);
        summary.max_triangle_slack = summary.max_triangle_slack.max(c.triangle_slack);
        summary.max_colsum_gap = summary.max_colsum_gap.max(c.colsum_gap);
        summary.max_lipschitz_slack = summary.max_lipschitz_slack.max(c.lipschitz_slack);
        summary.max_score_drift_slack = summary.max_score_drift_slack.max(c.score_drift_slack);
        summary.max_renorm_gap = summary.max_renorm_gap.max(c.renorm_gap);
        if let Some(reason) = &c.failure {
            summary.violations += 1;
            if first_failure.is_none() {
                first_failure = Some(VerifyFailure {
                    index: idx,
                    reason: reason.clone(),
                    instance: sample_instance(params, idx),
                });
            }
        }
        out.push(c);
    }

    Ok(VerifyOutcome { summary, checks: out, first_failure })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vf(xs: &[f64]) -> VecF<f64> {
        VecF::new(xs.to_vec()).unwrap()
    }

    fn arena_from(keys: &[Vec<f64>], values: &[Vec<f64>]) -> KvArena<f64> {
        let inst = VerifyInstance {
            head_dim: keys[0].len(),
            keys: keys.to_vec(),
            values: values.to_vec(),
            q_t: vec![0.0; keys[0].len()],
            q_next: vec![0.0; keys[0].len()],
            token: 0,
        };
        inst.arena().unwrap()
    }

    /// Two-token instance: q = [1], keys [0, ln 3] give weights
    /// [0.25, 0.75] over values [2, -1]; output -0.25.
    fn two_token() -> (VecF<f64>, KvArena<f64>) {
        let arena = arena_from(
            &[vec![0.0], vec![3.0f64.ln()]],
            &[vec![2.0], vec![-1.0]],
        );
        (vf(&[1.0]), arena)
    }

    #[test]
    fn exact_change_on_two_token_instance() {
        let (q, arena) = two_token();
        // o = -0.25; without token 0 the output renormalizes to -1.
        let delta = exact_output_change(&q, &arena, 0).unwrap();
        assert!((delta.as_slice()[0] - 0.75).abs() < 1e-12);
        let delta1 = exact_output_change(&q, &arena, 1).unwrap();
        assert!((delta1.as_slice()[0] - -2.25).abs() < 1e-12);
    }

    #[test]
    fn exact_change_of_zero_weight_token_is_negligible() {
        let arena = arena_from(
            &[vec![0.0], vec![-1e6]],
            &[vec![2.0], vec![-1.0]],
        );
        let delta = exact_output_change(&vf(&[1.0]), &arena, 1).unwrap();
        assert!(delta.as_slice()[0].abs() < 1e-6);
    }

    #[test]
    fn identical_values_make_every_eviction_free() {
        let arena = arena_from(
            &[vec![0.3], vec![-0.4], vec![1.1]],
            &[vec![5.0], vec![5.0], vec![5.0]],
        );
        for i in 0..3 {
            let delta = exact_output_change(&vf(&[1.0]), &arena, i).unwrap();
            assert!(delta.as_slice()[0].abs() < 1e-12, "token {i}");
        }
    }

    #[test]
    fn evicting_the_only_token_errors() {
        let mut arena = KvArena::allocate(2, 1).unwrap();
        arena
            .load_prefill(&[vf(&[1.0])], &[vf(&[1.0])], None)
            .unwrap();
        assert!(matches!(
            exact_output_change(&vf(&[1.0]), &arena, 0),
            Err(Error::EmptyPostEviction)
        ));
    }

    #[test]
    fn remainder_two_paths_agree() {
        let (q, arena) = two_token();
        // Path 1: closed form -a/(1-a)(o - c) with a=0.25, o=-0.25, c=0.5.
        let o = vf(&[-0.25]);
        let c = vf(&[0.5]);
        let r = remainder_closed_form(&o, &c, 0.25).unwrap();
        assert!((r.as_slice()[0] - 0.25).abs() < 1e-12);
        // Path 2: exact change minus contribution.
        let delta = exact_output_change(&q, &arena, 0).unwrap();
        assert!((delta.as_slice()[0] - c.as_slice()[0] - r.as_slice()[0]).abs() < 1e-12);
    }

    #[test]
    fn remainder_degenerate_cases() {
        let o = vf(&[3.0, -1.0]);
        let c = vf(&[1.0, 1.0]);
        let r0 = remainder_closed_form(&o, &c, 0.0).unwrap();
        assert!(r0.as_slice().iter().all(|&x| x == 0.0));

        let same = remainder_closed_form(&o, &o, 0.7).unwrap();
        assert!(same.as_slice().iter().all(|&x| x == 0.0));

        assert!(matches!(
            remainder_closed_form(&o, &c, 1.0),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn remainder_bound_examples() {
        let b = remainder_bound(0.25, 2.0).unwrap();
        assert!((b - 4.0 / 3.0).abs() < 1e-12);
        assert!(0.25 <= b); // ||R|| = 0.25 on the two-token instance
        assert_eq!(remainder_bound(0.0, 5.0).unwrap(), 0.0);
        assert!((remainder_bound(0.5, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(remainder_bound(1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(remainder_bound(1.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn renormalized_weights_examples() {
        let w = ScoreVec::from_scores(vec![0.25, 0.75]).unwrap();
        let r = renormalized_weights(&w, 0).unwrap();
        assert_eq!(r.scores(), &[0.0, 1.0]);
        assert!(r.is_masked(0));

        let w3 = ScoreVec::from_scores(vec![0.5, 0.25, 0.25]).unwrap();
        let r3 = renormalized_weights(&w3, 0).unwrap();
        assert!((r3.scores()[1] - 0.5).abs() < 1e-15);
        assert!((r3.scores()[2] - 0.5).abs() < 1e-15);
        let sum: f64 = r3.scores().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // Zero-weight removal leaves the others unchanged.
        let wz = ScoreVec::from_scores(vec![0.6, 0.4, 0.0]).unwrap();
        let rz = renormalized_weights(&wz, 2).unwrap();
        assert_eq!(&rz.scores()[..2], &[0.6, 0.4]);

        let sole = ScoreVec::from_scores(vec![1.0, 0.0]).unwrap();
        assert!(matches!(renormalized_weights(&sole, 0), Err(Error::Singularity(_))));
    }

    #[test]
    fn renormalization_matches_reduced_softmax() {
        // [0.5, 0.25, 0.25] arises from scores [ln 2, 0, 0]; dropping the
        // first and re-running softmax over the rest gives [0.5, 0.5].
        let scores = [2.0f64.ln(), 0.0, 0.0];
        let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let z: f64 = exps.iter().sum();
        let w = ScoreVec::from_scores(exps.iter().map(|e| e / z).collect()).unwrap();
        let renorm = renormalized_weights(&w, 0).unwrap();

        let z_red: f64 = exps[1..].iter().sum();
        for (a, e) in renorm.scores()[1..].iter().zip(&exps[1..]) {
            assert!((a - e / z_red).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_bound_identical_queries_is_exactly_zero() {
        let (_, arena) = two_token();
        let q = vf(&[0.6, 0.8]);
        let arena2 = arena_from(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let _ = arena;
        let check = query_drift_bound(&q, &q, &arena2).unwrap();
        assert_eq!(check.bound, 0.0);
        assert_eq!(check.actual, 0.0);
        assert_eq!(check.cosine, 1.0);
    }

    #[test]
    fn drift_bound_hand_instance() {
        // q=[1,0], q'=[0,1], one key [1,0], d=2: bound sqrt(2)/sqrt(2) = 1,
        // actual |dq . k| / sqrt(2) = 1/sqrt(2).
        let arena = arena_from(&[vec![1.0, 0.0], vec![0.0, 0.0]], &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let check =
            query_drift_bound(&vf(&[1.0, 0.0]), &vf(&[0.0, 1.0]), &arena).unwrap();
        assert!((check.bound - 1.0).abs() < 1e-12);
        assert!((check.actual - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(check.actual <= check.bound + TOL_BOUND);
        assert!(check.inputs_unit_norm);
    }

    #[test]
    fn drift_bound_zero_keys_and_zero_query() {
        let arena = arena_from(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![1.0]]);
        let check = query_drift_bound(&vf(&[1.0]), &vf(&[-1.0]), &arena).unwrap();
        assert_eq!(check.bound, 0.0);
        assert_eq!(check.actual, 0.0);

        let z = VecF::from_data(vec![0.0]);
        assert!(matches!(
            query_drift_bound(&z, &vf(&[1.0]), &arena),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn decomposition_with_frozen_query_collapses_drift_term() {
        let (q, arena) = two_token();
        let report = error_decomposition(&q, &q, &arena, 0).unwrap();
        assert_eq!(report.drift_error, 0.0);
        assert_eq!(report.total_error, report.denom_error);
        assert_eq!(report.drift_bound, 0.0);
    }

    #[test]
    fn decomposition_with_zero_weight_token() {
        let arena = arena_from(&[vec![0.0], vec![-1e6]], &[vec![2.0], vec![-1.0]]);
        let q = vf(&[1.0]);
        let report = error_decomposition(&q, &q, &arena, 1).unwrap();
        assert!(report.denom_error < 1e-12);
        assert!(report.contribution.as_slice()[0].abs() < 1e-12);
        assert!(report.total_error < 1e-12);
    }

    #[test]
    fn decomposition_invariants_on_random_instance_vs_test_oracle() {
        // 16 tokens, d = 8, everything recomputed from the definition in
        // the test itself.
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 16;
        let d = 8;
        let keys: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let values: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let q_t = unit_normal_vec(&mut rng, d);
        let q_next = drift_query(&mut rng, &q_t, 0.05);

        let softmax_out = |q: &[f64], skip: Option<usize>| -> (Vec<f64>, Vec<f64>) {
            let inv = 1.0 / (d as f64).sqrt();
            let idx: Vec<usize> = (0..n).filter(|&j| Some(j) != skip).collect();
            let scores: Vec<f64> = idx
                .iter()
                .map(|&j| q.iter().zip(&keys[j]).map(|(a, b)| a * b).sum::<f64>() * inv)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut weights = vec![0.0; n];
            let mut out = vec![0.0; d];
            for (pos, &j) in idx.iter().enumerate() {
                weights[j] = exps[pos] / z;
                for (o, v) in out.iter_mut().zip(&values[j]) {
                    *o += weights[j] * v;
                }
            }
            (weights, out)
        };

        let arena = arena_from(&keys, &values);
        for token in [0usize, 7, 15] {
            let report = error_decomposition(
                &vf(&q_t),
                &vf(&q_next),
                &arena,
                token,
            )
            .unwrap();

            // Test-side oracle for the exact change.
            let (w_full, o_full) = softmax_out(&q_next, None);
            let (_, o_red) = softmax_out(&q_next, Some(token));
            for k in 0..d {
                let expect = o_full[k] - o_red[k];
                assert!((report.exact_change.as_slice()[k] - expect).abs() < 1e-12);
                let rebuilt =
                    report.contribution.as_slice()[k] + report.remainder.as_slice()[k];
                assert!((report.exact_change.as_slice()[k] - rebuilt).abs() < TOL_IDENTITY);
            }
            assert!(report.remainder_norm <= report.remainder_bound + TOL_BOUND);
            assert!(
                report.total_error <= report.denom_error + report.drift_error + TOL_BOUND
            );
            assert!((w_full[token] * values[token].iter().map(|x| x.abs()).sum::<f64>()
                - w_full[token] * report.value_l1)
                .abs()
                < 1e-9);
        }
    }

    #[test]
    fn oracle_agrees_with_importance_on_two_token_instance() {
        let (q, arena) = two_token();
        // Objectives: 0.75^2 for token 0, 2.25^2 for token 1.
        let objectives = eviction_objectives(&q, &arena).unwrap();
        assert!((objectives[0].1 - 0.5625).abs() < 1e-12);
        assert!((objectives[1].1 - 5.0625).abs() < 1e-12);
        assert_eq!(oracle_evict_index(&q, &arena).unwrap(), 0);
    }

    #[test]
    fn oracle_picks_zero_weight_token() {
        let arena = arena_from(
            &[vec![0.0], vec![1.0], vec![-1e6]],
            &[vec![2.0], vec![-1.0], vec![4.0]],
        );
        assert_eq!(oracle_evict_index(&vf(&[1.0]), &arena).unwrap(), 2);
    }

    #[test]
    fn oracle_ties_break_to_lowest_index() {
        let arena = arena_from(
            &[vec![0.5], vec![0.5], vec![0.5]],
            &[vec![1.0], vec![1.0], vec![1.0]],
        );
        assert_eq!(oracle_evict_index(&vf(&[1.0]), &arena).unwrap(), 0);
    }

    #[test]
    fn verification_sweep_small_run_is_clean_and_deterministic() {
        let params = VerifyParams { instances: 300, seed: 7, ..VerifyParams::default() };
        let a = run_verification(&params).unwrap();
        assert_eq!(a.summary.violations, 0, "{:?}", a.first_failure.map(|f| f.reason));
        assert!(a.summary.max_identity_gap <= TOL_IDENTITY);
        assert!(a.summary.max_renorm_gap <= TOL_EXACT);

        let b = run_verification(&params).unwrap();
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&b.summary).unwrap()
        );
    }

    #[test]
    fn arena_snapshot_round_trips_through_the_instance_form() {
        let (q, arena) = two_token();
        let inst = VerifyInstance::from_arena(&arena, &q, &q, 1).unwrap();
        let json = serde_json::to_string(&inst).unwrap();
        let back: VerifyInstance = serde_json::from_str(&json).unwrap();
        let rebuilt = back.arena().unwrap();
        assert_eq!(rebuilt.valid_count(), 2);
        assert_eq!(rebuilt.value(0), arena.value(0));
        assert_eq!(rebuilt.key(1), arena.key(1));
        assert_eq!(back.token, 1);
        check_instance(&back).unwrap();
    }

    #[test]
    fn adversarial_instances_push_alpha_high() {
        let params = VerifyParams { instances: 50, seed: 3, ..VerifyParams::default() };
        // Index 0 falls in the adversarial fraction.
        let inst = sample_instance(&params, 0);
        let arena = inst.arena().unwrap();
        let w = raw_weights(&vf(&inst.q_next), &arena, None);
        assert!(w[inst.token] > 0.45, "alpha = {}", w[inst.token]);
        check_instance(&inst).unwrap();
    }
}
