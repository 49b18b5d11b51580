//! Differentially private stochastic optimization with discriminative
//! two-threshold clipping.
//!
//! The library implements two training loops over small exactly-differentiable
//! models or a synthetic heavy-tailed quadratic objective:
//!
//! * classic DP-SGD — per-sample clipping at a single threshold followed by
//!   one aggregate Gaussian perturbation of the summed gradient, and
//! * discriminative-clipping DP-SGD — per-sample gradients are scored by
//!   their trace in a fresh heavy-tailed random projection subspace, split
//!   into a small "tail" and a large "body" population by noisy top-p
//!   selection, and clipped with two distinct thresholds before perturbation.
//!
//! Supporting modules provide sub-Weibull(θ, K) sampling and bound
//! evaluation ([`subweibull`]), exact per-sample gradients ([`gradients`]),
//! IDX file ingestion ([`idx`]), subspace construction and trace scoring
//! ([`subspace`]), clipping mechanisms ([`clipping`]), noise calibration and
//! budget accounting ([`privacy`]), and the training loops themselves
//! ([`trainer`]).
//!
//! Every random decision is drawn from a ChaCha8 stream derived from a single
//! master seed (see [`rng`]), so a (seed, config) pair fully determines every
//! artifact the library produces.

pub mod clipping;
pub mod gradients;
pub mod idx;
pub mod privacy;
pub mod rng;
pub mod subspace;
pub mod subweibull;
pub mod trainer;
