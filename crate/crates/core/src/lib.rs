//! Cooperative multi-agent contextual linear bandits with batched
//! elimination, built for deterministic desk-scale simulation.
//!
//! The crate provides:
//!
//! - [`core_math`]: dense PSD matrices, doubly stochastic communication
//!   matrices, agent graphs, and rank-one inverse maintenance.
//! - [`environment`]: the hidden reward model, finite-support context
//!   distribution, regret bookkeeping, and a hard-instance generator.
//! - [`policies`]: G-optimal designs, softmax and mixed-softmax exploration
//!   policies, and the core-identification pipeline that builds them.
//! - [`disbe`]: the server-coordinated batch-elimination runner with exact
//!   communication accounting, quantized and perturbed-statistics variants.
//! - [`decbe`]: the serverless variant exchanging messages over a graph via
//!   Chebyshev-accelerated running consensus.
//! - [`harness`]: seeded sweep orchestration, a synchronous event-triggered
//!   LinUCB baseline, CSV/JSON emission, and static SVG plots.
//!
//! Determinism contract: every random draw comes from a counter-based
//! sub-stream keyed by `(seed, domain, agent, round)`, so repeated runs and
//! different worker counts produce bit-identical outputs.

pub mod core_math;
pub mod decbe;
pub mod disbe;
pub mod environment;
pub mod harness;
pub mod policies;
pub mod stream;
