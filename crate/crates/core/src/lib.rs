//! Deterministic simulator of a multi-path processor frontend together with
//! the measurement channels that the path structure enables.
//!
//! The frontend model delivers micro-ops through three paths: a legacy
//! decoder (MITE), a set-associative micro-op cache (DSB) and a loop buffer
//! (LSD). Which path serves an instruction block depends on cache residency,
//! loop capture state, block alignment and instruction prefixes, and each
//! path has distinct cycle and energy costs. On top of the structural model
//! the crate provides:
//!
//! * [`channel`] — covert-channel senders/receivers that modulate the
//!   delivery path (eviction, misalignment and prefix-stall encodings, with
//!   single-thread and two-thread variants plus an enclave mode),
//! * [`eval`] — edit-distance/error-rate metrics, message generators and
//!   parameter sweeps,
//! * [`spectre`] — a transient-execution disclosure demo that encodes a
//!   5-bit secret chunk in micro-op cache set residency,
//! * [`fingerprint`] — loop-buffer patch detection and application
//!   fingerprinting from the attacker's own IPC trace,
//! * [`config`] — the flat key-value experiment configuration shared by the
//!   CLI and the test harness.
//!
//! Everything is deterministic: all randomness flows from a single root seed
//! (see [`rng`]), and identical configuration yields bit-identical state,
//! counters and CSV output.

pub mod channel;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod frontend;
pub mod rng;
pub mod spectre;

pub use channel::{
    BitMessage, Channel, ChannelParams, ChannelVariant, MessagePattern, Observable, Stealth,
    Threshold,
};
pub use config::ExperimentConfig;
pub use cost::{CostModel, DimensionTag, TraceSample};
pub use error::{Error, Result};
pub use frontend::{
    DeliveryPath, DeliveryRecord, DsbGeometry, Frontend, FrontendConfig, L1iGeometry, LsdGeometry,
    MixBlock,
};
