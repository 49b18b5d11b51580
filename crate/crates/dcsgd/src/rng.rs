//! Deterministic random-stream derivation.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from the
//! master seed and a fixed purpose id. Purposes never share a stream, so
//! consuming draws for one purpose (say, trace noise) can never shift the
//! draws seen by another (batch selection). This is what makes degenerate
//! configurations of different algorithms produce bit-identical weight
//! trajectories, and it makes any parallel schedule reproducible: work items
//! own their streams by id, not by arrival order.
//!
//! Stream ids are laid out as `purpose << 56 | step << 24 | item`, which
//! bounds batch indices at 2^24 and step counts at 2^32 — far above anything
//! the trainer accepts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization draws.
pub const PURPOSE_INIT: u64 = 0;
/// Minibatch index selection (one grain per step).
pub const PURPOSE_BATCH: u64 = 1;
/// Projection-subspace vector draws (one grain per step).
pub const PURPOSE_SUBSPACE: u64 = 2;
/// Trace perturbation noise (one grain per step).
pub const PURPOSE_TRACE_NOISE: u64 = 3;
/// Gradient perturbation noise (one grain per step and sample).
pub const PURPOSE_GRAD_NOISE: u64 = 4;
/// Synthetic per-sample gradient noise (one grain per step and sample).
pub const PURPOSE_SYNTH_NOISE: u64 = 5;
/// Dataset generation draws.
pub const PURPOSE_DATA: u64 = 6;

const STEP_BITS: u32 = 32;
const ITEM_BITS: u32 = 24;

/// Stream for a purpose that is consumed sequentially over a whole run.
pub fn child_stream(master_seed: u64, purpose: u64) -> ChaCha8Rng {
    grain_stream(master_seed, purpose, 0, 0)
}

/// Stream for one (step, item) work grain of a purpose.
///
/// # Panics
///
/// Panics if `purpose`, `step`, or `item` exceed their bit-field widths;
/// callers validate sizes long before this becomes reachable.
pub fn grain_stream(master_seed: u64, purpose: u64, step: u64, item: u64) -> ChaCha8Rng {
    assert!(purpose < 1 << (64 - STEP_BITS - ITEM_BITS), "purpose id out of range");
    assert!(step < 1 << STEP_BITS, "step out of range");
    assert!(item < 1 << ITEM_BITS, "item out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(purpose << (STEP_BITS + ITEM_BITS) | step << ITEM_BITS | item);
    rng
}
