//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured headroom (run with `--nocapture` to see
//! them). Tolerances are pinned in the constants below and in the oracle
//! module; nothing here is calibrated after the fact.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use kvflow::{
    drift_query, fused_decode_step, oracle_evict_index, query_drift_bound, renormalized_weights,
    run_verification, snapkv_compress, softmax, softmax_jacobian_colsum, BlockConfig, DecodeRun,
    KvArena, PolicyConfig, PolicyKind, PolicyState, PrefillCompressor, RunOptions, ScoreVec,
    VecF, VerifyParams,
};

const TOL_ELEMENTWISE: f64 = 1e-9;
const TOL_BOUND: f64 = 1e-9;
const TOL_EXACT: f64 = 1e-12;

fn report(criterion: &str, detail: &str) {
    println!("ACCEPTANCE {criterion}: PASS ({detail})");
}

fn vf(xs: &[f64]) -> VecF<f64> {
    VecF::new(xs.to_vec()).unwrap()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> VecF<f64> {
    vf(&(0..d).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>())
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn random_full_arena(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (VecF<f64>, KvArena<f64>) {
    let keys: Vec<VecF<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
    let values: Vec<VecF<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
    let mut arena = KvArena::allocate(n.max(2), d).unwrap();
    arena.load_prefill(&keys, &values, None).unwrap();
    (gaussian_vec(rng, d), arena)
}

/// Criteria 2 and 3 share one 10,000-instance sweep.
fn shared_sweep() -> &'static kvflow::VerifyOutcome {
    static SWEEP: OnceLock<kvflow::VerifyOutcome> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let params = VerifyParams { instances: 10_000, seed: 20_240, ..VerifyParams::default() };
        run_verification(&params).expect("verification sweep runs")
    })
}

#[test]
fn criterion_1_fused_reference_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let dims = [1usize, 8, 64];
    let blocks = [
        BlockConfig::new(1).unwrap(),
        BlockConfig::new(16).unwrap(),
        BlockConfig::new(128).unwrap(),
        BlockConfig::full(),
    ];

    let mut max_gap = 0.0f64;
    for i in 0..1000 {
        let d = dims[i % dims.len()];
        let n = rng.random_range(1..=4096);
        let (q, arena) = random_full_arena(&mut rng, n, d);

        let (ref_out, ref_weights) = kvflow::reference_attention(&q, &arena).unwrap();
        // Reference-path importance argmin.
        let mut ref_evict = 0usize;
        let mut best = f64::INFINITY;
        for slot in arena.valid_slots() {
            let l1: f64 = arena.value(slot).iter().map(|x| x.abs()).sum();
            let score = ref_weights.scores()[slot] * l1;
            if score < best {
                best = score;
                ref_evict = slot;
            }
        }

        for block in blocks {
            let fused = fused_decode_step(&q, &arena, block).unwrap();
            for (a, b) in fused.output.as_slice().iter().zip(ref_out.as_slice()) {
                let gap = (a - b).abs();
                max_gap = max_gap.max(gap);
                assert!(gap <= TOL_ELEMENTWISE, "output gap {gap} at n={n} d={d}");
            }
            assert_eq!(fused.evict_slot, ref_evict, "evict mismatch at n={n} d={d}");
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 60 s");
    report(
        "1 fused-reference equivalence",
        &format!("1000 instances, max elementwise gap {max_gap:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_exact_identity() {
    let outcome = shared_sweep();
    assert_eq!(outcome.summary.instances, 10_000);
    assert!(
        outcome.summary.max_identity_gap <= TOL_ELEMENTWISE,
        "identity gap {}",
        outcome.summary.max_identity_gap
    );
    report(
        "2 exact change = contribution + remainder",
        &format!("10000 pairs, max gap {:.2e}", outcome.summary.max_identity_gap),
    );
}

#[test]
fn criterion_3_remainder_bound() {
    let outcome = shared_sweep();
    assert!(
        outcome.summary.max_remainder_slack <= TOL_BOUND,
        "remainder slack {}",
        outcome.summary.max_remainder_slack
    );
    // The sweep must actually contain adversarial near-1 weights.
    let max_alpha = outcome
        .checks
        .iter()
        .map(|c| c.alpha_next)
        .fold(0.0f64, f64::max);
    assert!(max_alpha > 0.95, "adversarial draws too tame: max alpha {max_alpha}");
    report(
        "3 remainder bound",
        &format!(
            "10000 pairs, max slack {:.2e}, max evicted-token weight {:.4}",
            outcome.summary.max_remainder_slack, max_alpha
        ),
    );
}

#[test]
fn criterion_4_softmax_jacobian_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut max_col_gap = 0.0f64;
    let mut max_lipschitz = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=512);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();

        let ws = softmax(&ScoreVec::from_scores(s.clone()).unwrap()).unwrap().weights;
        let wt = softmax(&ScoreVec::from_scores(t.clone()).unwrap()).unwrap().weights;

        // Column-sum identity on a random column of ws.
        let j = rng.random_range(0..n);
        let col = softmax_jacobian_colsum(&ws, j).unwrap();
        let wj = ws.scores()[j];
        let gap = (col - 2.0 * wj * (1.0 - wj)).abs();
        max_col_gap = max_col_gap.max(gap);
        assert!(gap <= TOL_EXACT, "colsum gap {gap} at n={n}");
        assert!(col <= 0.5 + TOL_EXACT, "colsum {col} exceeds 1/2");

        let l1: f64 = ws
            .scores()
            .iter()
            .zip(wt.scores())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let linf = s
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        max_lipschitz = max_lipschitz.max(l1 - linf);
        assert!(l1 <= linf + TOL_BOUND, "l1 {l1} > linf {linf}");
    }
    report(
        "4 softmax Jacobian and Lipschitz",
        &format!(
            "10000 pairs, max colsum gap {max_col_gap:.2e}, max l1-linf slack {max_lipschitz:.2e}"
        ),
    );
}

#[test]
fn criterion_5_query_drift_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let drifts = [0.0, 0.01, 0.1, 0.5];
    let dims = [1usize, 8, 64];
    let mut max_slack = f64::NEG_INFINITY;
    for i in 0..10_000 {
        let drift = drifts[i % drifts.len()];
        let d = dims[(i / drifts.len()) % dims.len()];
        let n = rng.random_range(1..=128);
        let keys: Vec<VecF<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d)).collect();
        let values = keys.clone();
        let mut arena = KvArena::allocate(n.max(2), d).unwrap();
        arena.load_prefill(&keys, &values, None).unwrap();

        let q_t = unit_vec(&mut rng, d);
        let q_next = drift_query(&mut rng, &q_t, drift);
        let check = query_drift_bound(&vf(&q_t), &vf(&q_next), &arena).unwrap();
        max_slack = max_slack.max(check.actual - check.bound);
        assert!(
            check.actual <= check.bound + TOL_BOUND,
            "drift {drift}: actual {} > bound {}",
            check.actual,
            check.bound
        );
        if drift == 0.0 {
            assert_eq!(check.bound, 0.0, "zero drift must give exactly zero bound");
            assert_eq!(check.actual, 0.0, "zero drift must give exactly zero change");
        }
    }
    report(
        "5 query-drift bound",
        &format!("10000 draws over drifts {drifts:?}, max actual-bound slack {max_slack:.2e}"),
    );
}

#[test]
fn criterion_6_renormalization_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut max_gap = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=256);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let weights = softmax(&ScoreVec::from_scores(scores.clone()).unwrap())
            .unwrap()
            .weights;
        let i = rng.random_range(0..n);

        let renorm = renormalized_weights(&weights, i).unwrap();
        // Direct softmax over the reduced raw-score set.
        let mut masked = vec![false; n];
        masked[i] = true;
        let reduced = softmax(&ScoreVec::new(scores, masked).unwrap()).unwrap().weights;

        for (a, b) in renorm.scores().iter().zip(reduced.scores()) {
            let gap = (a - b).abs();
            max_gap = max_gap.max(gap);
            assert!(gap <= TOL_EXACT, "renormalization gap {gap} at n={n}");
        }
    }
    report(
        "6 renormalized weights = reduced softmax",
        &format!("10000 draws, max gap {max_gap:.2e}"),
    );
}

#[test]
fn criterion_7_protocol_conservation() {
    let start = Instant::now();
    let trace = kvflow::generate_trace(64, 512, 16_000, 0.05, 107).unwrap();
    let policy = PolicyConfig::new(PolicyKind::LongFlow);
    let mut run = DecodeRun::<f64>::new(&trace, &policy, 3200, RunOptions::default()).unwrap();

    let mut fill_steps = 0usize;
    let mut steps = 0usize;
    while run.step().unwrap() {
        steps += 1;
        if run.arena().is_full() {
            assert_eq!(run.arena().valid_count(), 3200, "slot count drifted at step {steps}");
        } else {
            fill_steps += 1;
        }
    }
    assert_eq!(steps, 16_000);
    assert_eq!(fill_steps, 3200 - 512 - 1); // the fill-completing step is full

    let arena = run.arena();
    assert_eq!(arena.allocation_count(), 1, "storage must be allocated exactly once");
    assert_eq!(arena.log().overwrite_count(), 16_000 - (3200 - 512));
    // Exactly one overwrite per post-fill step.
    let mut per_step = std::collections::BTreeMap::new();
    for r in arena.log().records() {
        if r.source == kvflow::WriteSource::Overwrite {
            *per_step.entry(r.step).or_insert(0usize) += 1;
        }
    }
    assert!(per_step.values().all(|&c| c == 1));

    let outcome = run.finish();
    assert_eq!(outcome.metrics.evictions, 16_000 - (3200 - 512));

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget 5 min");
    report(
        "7 protocol conservation",
        &format!(
            "prefill 512 decode 16000 budget 3200: one allocation, {} overwrites, {elapsed:.2?}",
            outcome.metrics.evictions
        ),
    );
}

#[test]
fn criterion_8_oracle_agreement() {
    // Reported fraction on a frozen-query trace.
    let trace = kvflow::generate_trace(64, 64, 2000, 0.0, 108).unwrap();
    let opts = RunOptions { oracle_agreement: true, ..RunOptions::default() };
    let policy = PolicyConfig::new(PolicyKind::LongFlow);
    let metrics = kvflow::run_decode::<f64>(&trace, &policy, 256, opts).unwrap();
    let rate = metrics.agreement_rate.expect("agreement measured");
    let rank = metrics.agreement_mean_rank.expect("rank measured");

    // Asserted guarantee: when one token's weight is below 1e-9 and every
    // other exceeds 1e-3, the importance argmin and the objective argmin
    // name the same slot.
    let mut rng = ChaCha8Rng::seed_from_u64(208);
    let mut checked = 0usize;
    for _ in 0..200 {
        let d = 8usize;
        let n = rng.random_range(4..=64);
        let weak = rng.random_range(0..n);
        let q = vf(&unit_vec(&mut rng, d));
        let sqrt_d = (d as f64).sqrt();
        let keys: Vec<VecF<f64>> = (0..n)
            .map(|j| {
                let target = if j == weak { -24.0 } else { rng.random_range(-1.0..1.0) };
                vf(&q.as_slice().iter().map(|x| x * target * sqrt_d).collect::<Vec<_>>())
            })
            .collect();
        let values: Vec<VecF<f64>> = (0..n)
            .map(|_| {
                vf(&(0..d)
                    .map(|_| {
                        let mag: f64 = rng.random_range(0.5..1.5);
                        if rng.random_bool(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect::<Vec<_>>())
            })
            .collect();
        let mut arena = KvArena::allocate(n.max(2), d).unwrap();
        arena.load_prefill(&keys, &values, None).unwrap();

        let step = fused_decode_step(&q, &arena, BlockConfig::full()).unwrap();
        let weights = step.weights.scores();
        assert!(weights[weak] < 1e-9);
        assert!((0..n).filter(|&j| j != weak).all(|j| weights[j] > 1e-3));

        let oracle = oracle_evict_index(&q, &arena).unwrap();
        assert_eq!(step.evict_slot, oracle, "disagreement on a weak-token instance");
        assert_eq!(step.evict_slot, weak);
        checked += 1;
    }
    assert_eq!(checked, 200);

    report(
        "8 oracle agreement",
        &format!(
            "drift-0 trace agreement {rate:.4}, mean oracle rank {rank:.3}; weak-token agreement 200/200"
        ),
    );
}

#[test]
fn criterion_9_baseline_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);

    // VATP over unit-L1 values picks the same slot as H2O.
    for _ in 0..1000 {
        let n = rng.random_range(2..=48);
        let d = rng.random_range(1..=8);
        let keys: Vec<VecF<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d)).collect();
        let values: Vec<VecF<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..d)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x + 0.05 * x.signum()
                    })
                    .collect();
                let l1: f64 = raw.iter().map(|x| x.abs()).sum();
                vf(&raw.iter().map(|x| x / l1).collect::<Vec<_>>())
            })
            .collect();
        let mut arena = KvArena::allocate(n.max(2), d).unwrap();
        arena.load_prefill(&keys, &values, None).unwrap();
        let q = gaussian_vec(&mut rng, d);
        let step = fused_decode_step(&q, &arena, BlockConfig::full()).unwrap();

        let protect = [0usize, 1, n / 4][rng.random_range(0..3)].min(n.saturating_sub(1));
        let mut h2o = PolicyState::new(
            &PolicyConfig::new(PolicyKind::H2o).with_protect_recent(protect),
            n,
            arena.capacity(),
        );
        let mut vatp = PolicyState::new(
            &PolicyConfig::new(PolicyKind::Vatp).with_protect_recent(protect),
            n,
            arena.capacity(),
        );
        for _ in 0..rng.random_range(0..4) {
            let raw: Vec<f64> = (0..arena.capacity())
                .map(|s| if arena.is_valid(s) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            let masked: Vec<bool> = arena.valid_mask().iter().map(|&v| !v).collect();
            let w = ScoreVec::new(raw, masked).unwrap();
            h2o.h2o_accumulate(&w, None).unwrap();
            vatp.h2o_accumulate(&w, None).unwrap();
        }
        assert_eq!(
            h2o.select_eviction(&step, &arena).unwrap(),
            vatp.select_eviction(&step, &arena).unwrap()
        );
    }

    // Prefill compression always returns exactly `budget` indices.
    for _ in 0..1000 {
        let n = rng.random_range(8..=96);
        let budget = rng.random_range(4..n);
        let window = rng.random_range(1..=budget.min(n / 2).max(1));
        let kernel = [1usize, 3, 7][rng.random_range(0..3)];
        let d = rng.random_range(1..=8);
        let keys: Vec<VecF<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d)).collect();
        let values: Vec<VecF<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d)).collect();
        let obs: Vec<VecF<f64>> = keys[n - window..].to_vec();
        let comp = PrefillCompressor::new(window, kernel, budget).unwrap();
        let kept = snapkv_compress(&keys, &values, &obs, &comp).unwrap();
        assert_eq!(kept.len(), budget);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert!((n - window..n).all(|i| kept.contains(&i)) || window >= budget);
    }

    report(
        "9 baseline reductions",
        "1000 unit-L1 VATP-H2O agreements, 1000 compression cardinality checks",
    );
}
