//! Core logic for a checkpoint-gated LLM jailbreak defense.
//!
//! A gateway forwards every chat request to its target model while a
//! concurrent "shadow" query asks a checker model whether the user prompt
//! contains anything that violates safety policies. Target output is held
//! at a checkpoint until the checker's verdict arrives: benign verdicts
//! release the buffered tokens, harmful verdicts replace them with an
//! explainable refusal that quotes the offending fragment.
//!
//! This crate is the IO-free half of that design:
//!
//! - [`model`]: the chat wire model and gate/policy domain types
//! - [`detector`]: detection prompt construction and verdict parsing
//! - [`gate`]: the checkpoint state machine and its timing arithmetic
//! - [`cache`]: prompt normalization and the LRU+TTL verdict cache
//! - [`refusal`]: refusal-marker matching for adversarial-example mining
//! - [`eval`]: corpus case model and detection-report aggregation
//!
//! Everything here is deterministic and side-effect free; clocks, RNG
//! suffixes, and streams are injected by the hosting crate. The crate is
//! `no_std` (with `alloc`) so the same logic can be embedded in other
//! runtimes unchanged.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cache;
pub mod detector;
pub mod eval;
pub mod gate;
pub mod model;
pub mod refusal;

pub use cache::{CacheStats, VerdictCache};
pub use detector::{DetectionPromptSpec, FirstTokenJudgement, VerdictParser};
pub use gate::{GateAction, GateEvent, GateSession, GateState, LatencyReport};
pub use model::{
    ChatMessage, ChatRequest, DetectionVerdict, FailureMode, GateDecision, GateOutcome,
    JailbreakCategory, PolicyConfig, Role, TokenChunk, VerdictKind,
};
