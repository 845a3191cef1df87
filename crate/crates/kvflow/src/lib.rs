//! Budgeted KV-cache attention with fused per-step token eviction.
//!
//! The core loop keeps a fixed-size key/value cache and, at every decode
//! step, computes single-query attention and an importance score for each
//! cached token in one block-wise pass; the lowest-scoring token is
//! overwritten by the next step's token. Competing policies (accumulated
//! attention scores, value-aware variants, recency, random) run behind the
//! same interface, and a brute-force oracle suite checks the approximation
//! identities and error bounds the importance score relies on.
//!
//! Storage precision is generic over [`Real`] (`f32` or `f64`); all
//! accumulations run in `f64`. The `f64` aliases below are the defaults and
//! the precision at which every documented tolerance holds.

pub mod arena;
pub mod attention;
pub mod error;
pub mod numerics;
pub mod oracle;
pub mod policies;
pub mod runner;
pub mod scalar;
pub mod trace;

pub use arena::{KvArena, SlotWriteLog, WriteRecord, WriteSource};
pub use attention::{
    contribution_vectors, decode_step_full, fused_decode_step, reference_attention,
    AttnStepResult, BlockConfig,
};
pub use error::{Error, Result};
pub use numerics::{
    cosine_similarity, softmax, softmax_jacobian_colsum, vector_norms, Norms, ScoreVec, Softmax,
    VecF, OVERFLOW_GUARD,
};
pub use oracle::{
    check_instance, drift_query, error_decomposition, eviction_objectives, exact_output_change,
    oracle_evict_index, query_drift_bound, remainder_bound, remainder_closed_form,
    renormalized_weights, run_verification, sample_instance, ErrorReport, InstanceChecks,
    QueryDriftCheck, VerifyFailure, VerifyInstance, VerifyOutcome, VerifyParams, VerifySummary,
};
pub use policies::{
    snapkv_compress, PolicyConfig, PolicyKind, PolicyState, PrefillCompressor, BASELINE_INTERVAL,
};
pub use runner::{compare_policies, run_decode, DecodeRun, RunMetrics, RunOptions, RunOutcome};
pub use scalar::Real;
pub use trace::{
    generate_trace, generate_trace_scaled, load_trace, save_trace, DecodeStep, DecodeTrace,
    TraceMeta, TRACE_MAGIC, TRACE_VERSION,
};

/// Default storage precision.
pub type Vec64 = VecF<f64>;
/// Reduced storage precision for measuring drift against the `f64` path.
pub type Vec32 = VecF<f32>;
pub type Arena64 = KvArena<f64>;
pub type Arena32 = KvArena<f32>;
