//! Checkpoint state machine coupling the target stream to the checker.
//!
//! A session starts in `Racing`: target chunks are buffered, never
//! delivered, while the checker works on the same prompt. The verdict
//! resolves the race. Benign releases the buffer and switches to live
//! pass-through; harmful cancels the target and delivers a single
//! refusal chunk built from the quoted fragment. Checker failure or
//! timeout falls back to the configured failure mode.
//!
//! The machine is sans-IO: callers feed it events plus a monotonic
//! timestamp and execute the returned actions. That keeps the gating
//! rules deterministic and testable without a runtime.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::detector::{is_benign_first_token, FirstTokenJudgement, VerdictParser};
use crate::model::{
    DetectionVerdict, FailureMode, GateDecision, GateOutcome, PolicyConfig, TokenChunk,
    FRAGMENT_PLACEHOLDER,
};

/// Fragment substituted into the refusal template when the gate fails
/// closed and no checker verdict exists.
pub const UNAVAILABLE_FRAGMENT: &str = "(checker unavailable)";

/// Where a session is in its lifecycle. The only transitions are
/// `Racing` to each of the other three; a session never leaves a
/// post-racing state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateState {
    /// Checker verdict pending; target output is buffered, not delivered.
    Racing,
    /// Verdict allowed the response; chunks flow through live.
    Released,
    /// Refusal delivered; the target was cancelled. Terminal.
    Refusing,
    /// Target failed before resolution. Terminal.
    Failed,
}

/// Inputs to the state machine. Target and checker events arrive in
/// whatever order the transports produce them.
#[derive(Debug, Clone)]
pub enum GateEvent {
    TargetChunk(TokenChunk),
    TargetComplete,
    TargetFailed { reason: String },
    /// A streamed piece of checker output.
    CheckerChunk(String),
    /// Checker stream finished; the accumulated output is parsed now.
    CheckerComplete,
    CheckerFailed { reason: String },
    CheckerTimeout,
    /// Verdict served from the cache; no checker ran for this session.
    CachedVerdict(DetectionVerdict),
}

/// Effects for the caller to execute, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum GateAction {
    /// Send this chunk to the client.
    Deliver(TokenChunk),
    /// Close the client stream normally.
    EndDelivery,
    /// The target failed after release: the stream ends early and the
    /// caller surfaces an upstream error where the protocol still allows
    /// one.
    AbortDelivery { reason: String },
    /// Best-effort abort of the in-flight target request.
    CancelTarget,
    /// Best-effort abort of the in-flight checker request.
    CancelChecker,
    /// The session resolved; the outcome carries the decision, verdict,
    /// and added delay. Emitted exactly once, before any post-verdict
    /// `Deliver`.
    Resolved(GateOutcome),
    /// The request failed before anything was delivered.
    Fail { reason: String },
}

/// Monotonic timestamps collected over a session's life, all in
/// milliseconds on the caller's clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateTimestamps {
    pub received_ms: f64,
    pub target_first_token_ms: Option<f64>,
    pub checker_first_token_ms: Option<f64>,
    pub resolved_ms: Option<f64>,
}

/// Per-session latency summary derived after resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub decision: GateDecision,
    /// Delay the gate added on top of the target's own speed.
    pub added_delay_ms: f64,
    /// Checker time to verdict, when a verdict exists.
    pub checker_latency_ms: Option<f64>,
    /// Target time to first token relative to receipt, when one arrived.
    pub target_first_token_ms: Option<f64>,
    /// Time from request receipt to resolution.
    pub resolution_ms: f64,
}

/// Added delay for a resolved session.
///
/// Pass-through (and fail-open) responses are delayed only if the verdict
/// landed after the target's first token: `max(0, resolved - first_token)`,
/// and zero when the target had produced nothing yet. Refusals (and
/// fail-closed) take the full time from receipt to resolution, since the
/// client got nothing until then.
pub fn record_timings(
    timestamps: &GateTimestamps,
    decision: GateDecision,
) -> Result<f64, IncompleteSession> {
    let resolved = timestamps.resolved_ms.ok_or(IncompleteSession)?;
    let delay = match decision {
        GateDecision::PassThrough | GateDecision::FailOpen => match timestamps.target_first_token_ms
        {
            Some(first) => (resolved - first).max(0.0),
            None => 0.0,
        },
        GateDecision::Refused | GateDecision::FailClosed => resolved - timestamps.received_ms,
    };
    Ok(delay)
}

/// A latency query on a session that has not resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IncompleteSession;

impl fmt::Display for IncompleteSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("session has not resolved yet")
    }
}

impl core::error::Error for IncompleteSession {}

/// One request's checkpoint.
#[derive(Debug, Clone)]
pub struct GateSession {
    request_id: String,
    policy: PolicyConfig,
    parser: VerdictParser,
    state: GateState,
    buffer: Vec<TokenChunk>,
    /// Everything the target produced while racing. Held for adversarial
    /// example mining on refusal; never delivered on that path.
    quarantine: String,
    checker_text: String,
    /// Early release gave up on this session: the first checker content
    /// could not extend into a benign answer, so only the full parse
    /// decides.
    early_release_off: bool,
    target_done: bool,
    delivery_ended: bool,
    timestamps: GateTimestamps,
    outcome: Option<GateOutcome>,
}

impl GateSession {
    pub fn new(
        request_id: impl Into<String>,
        policy: PolicyConfig,
        parser: VerdictParser,
        now_ms: f64,
    ) -> Self {
        Self {
            request_id: request_id.into(),
            policy,
            parser,
            state: GateState::Racing,
            buffer: Vec::new(),
            quarantine: String::new(),
            checker_text: String::new(),
            early_release_off: false,
            target_done: false,
            delivery_ended: false,
            timestamps: GateTimestamps {
                received_ms: now_ms,
                ..GateTimestamps::default()
            },
            outcome: None,
        }
    }

    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn state(&self) -> GateState {
        self.state
    }

    pub fn timestamps(&self) -> &GateTimestamps {
        &self.timestamps
    }

    /// Target output captured while racing. Meaningful after a refusal,
    /// where it is the response the client never saw.
    pub fn quarantined_output(&self) -> &str {
        &self.quarantine
    }

    pub fn outcome(&self) -> Option<&GateOutcome> {
        self.outcome.as_ref()
    }

    pub fn latency_report(&self) -> Option<LatencyReport> {
        let outcome = self.outcome.as_ref()?;
        let resolved = self.timestamps.resolved_ms?;
        Some(LatencyReport {
            decision: outcome.decision,
            added_delay_ms: outcome.added_delay_ms,
            checker_latency_ms: outcome.verdict.as_ref().map(|v| v.latency_ms),
            target_first_token_ms: self
                .timestamps
                .target_first_token_ms
                .map(|t| t - self.timestamps.received_ms),
            resolution_ms: resolved - self.timestamps.received_ms,
        })
    }

    /// Feeds one event and returns the actions to execute, in order.
    pub fn handle(&mut self, event: GateEvent, now_ms: f64) -> Vec<GateAction> {
        match event {
            GateEvent::TargetChunk(chunk) => self.on_target_chunk(chunk, now_ms),
            GateEvent::TargetComplete => self.on_target_complete(),
            GateEvent::TargetFailed { reason } => self.on_target_failed(reason),
            GateEvent::CheckerChunk(text) => self.on_checker_chunk(text, now_ms),
            GateEvent::CheckerComplete => self.on_checker_complete(now_ms),
            GateEvent::CheckerFailed { .. } | GateEvent::CheckerTimeout => {
                self.on_checker_unavailable(now_ms)
            }
            GateEvent::CachedVerdict(verdict) => self.on_verdict(verdict, now_ms),
        }
    }

    fn on_target_chunk(&mut self, chunk: TokenChunk, now_ms: f64) -> Vec<GateAction> {
        match self.state {
            GateState::Racing => {
                self.timestamps.target_first_token_ms.get_or_insert(now_ms);
                self.quarantine.push_str(&chunk.text);
                self.buffer.push(chunk);
                Vec::new()
            }
            GateState::Released if !self.delivery_ended => {
                self.timestamps.target_first_token_ms.get_or_insert(now_ms);
                alloc::vec![GateAction::Deliver(chunk)]
            }
            // Aborts are best-effort; stragglers after the stream closed
            // are dropped.
            _ => Vec::new(),
        }
    }

    fn on_target_complete(&mut self) -> Vec<GateAction> {
        match self.state {
            GateState::Racing => {
                self.target_done = true;
                Vec::new()
            }
            GateState::Released if !self.delivery_ended => {
                self.delivery_ended = true;
                alloc::vec![GateAction::EndDelivery]
            }
            _ => Vec::new(),
        }
    }

    fn on_target_failed(&mut self, reason: String) -> Vec<GateAction> {
        match self.state {
            GateState::Racing => {
                self.state = GateState::Failed;
                alloc::vec![GateAction::CancelChecker, GateAction::Fail { reason }]
            }
            // The client may already hold part of the stream; it ends
            // early and the caller reports upstream failure where it can.
            GateState::Released if !self.delivery_ended => {
                self.delivery_ended = true;
                alloc::vec![GateAction::AbortDelivery { reason }]
            }
            _ => Vec::new(),
        }
    }

    fn on_checker_chunk(&mut self, text: String, now_ms: f64) -> Vec<GateAction> {
        if self.state != GateState::Racing {
            return Vec::new();
        }
        self.timestamps.checker_first_token_ms.get_or_insert(now_ms);
        self.checker_text.push_str(&text);
        if !self.policy.early_release || self.early_release_off {
            return Vec::new();
        }
        match is_benign_first_token(&self.checker_text) {
            FirstTokenJudgement::Benign => {
                let verdict = DetectionVerdict::benign(
                    &self.checker_text,
                    now_ms - self.timestamps.received_ms,
                );
                let mut actions = alloc::vec![GateAction::CancelChecker];
                actions.extend(self.release(Some(verdict), GateDecision::PassThrough, now_ms));
                actions
            }
            FirstTokenJudgement::NotBenign => {
                self.early_release_off = true;
                Vec::new()
            }
            FirstTokenJudgement::NeedMore => Vec::new(),
        }
    }

    fn on_checker_complete(&mut self, now_ms: f64) -> Vec<GateAction> {
        if self.state != GateState::Racing {
            return Vec::new();
        }
        let latency = now_ms - self.timestamps.received_ms;
        let verdict = self.parser.parse_verdict(&self.checker_text, latency);
        self.on_verdict(verdict, now_ms)
    }

    fn on_verdict(&mut self, verdict: DetectionVerdict, now_ms: f64) -> Vec<GateAction> {
        if self.state != GateState::Racing {
            return Vec::new();
        }
        if verdict.is_harmful() {
            let fragment = verdict.fragment.clone();
            self.refuse(Some(verdict), &fragment, GateDecision::Refused, now_ms)
        } else {
            self.release(Some(verdict), GateDecision::PassThrough, now_ms)
        }
    }

    fn on_checker_unavailable(&mut self, now_ms: f64) -> Vec<GateAction> {
        if self.state != GateState::Racing {
            return Vec::new();
        }
        match self.policy.failure_mode {
            FailureMode::FailClosed => {
                self.refuse(None, UNAVAILABLE_FRAGMENT, GateDecision::FailClosed, now_ms)
            }
            FailureMode::FailOpen => self.release(None, GateDecision::FailOpen, now_ms),
        }
    }

    fn release(
        &mut self,
        verdict: Option<DetectionVerdict>,
        decision: GateDecision,
        now_ms: f64,
    ) -> Vec<GateAction> {
        self.timestamps.resolved_ms = Some(now_ms);
        let added = record_timings(&self.timestamps, decision).expect("resolved above");
        let outcome = match decision {
            GateDecision::PassThrough => {
                GateOutcome::pass_through(verdict.expect("pass-through carries a verdict"), added)
            }
            _ => GateOutcome::fail_open(added),
        };
        self.outcome = Some(outcome.clone());
        let mut actions = alloc::vec![GateAction::Resolved(outcome)];
        actions.extend(self.buffer.drain(..).map(GateAction::Deliver));
        self.state = GateState::Released;
        if self.target_done {
            self.delivery_ended = true;
            actions.push(GateAction::EndDelivery);
        }
        actions
    }

    fn refuse(
        &mut self,
        verdict: Option<DetectionVerdict>,
        fragment: &str,
        decision: GateDecision,
        now_ms: f64,
    ) -> Vec<GateAction> {
        self.timestamps.resolved_ms = Some(now_ms);
        let added = record_timings(&self.timestamps, decision).expect("resolved above");
        let refusal_text = self
            .policy
            .refusal_template
            .replace(FRAGMENT_PLACEHOLDER, fragment);
        let outcome = match decision {
            GateDecision::Refused => GateOutcome::refused(
                verdict.expect("refusal carries a verdict"),
                refusal_text.clone(),
                added,
            ),
            _ => GateOutcome::fail_closed(refusal_text.clone(), added),
        };
        self.outcome = Some(outcome.clone());
        self.state = GateState::Refusing;
        self.delivery_ended = true;
        self.buffer.clear();
        alloc::vec![
            GateAction::CancelTarget,
            GateAction::Resolved(outcome),
            GateAction::Deliver(TokenChunk {
                text: refusal_text,
                index: 0,
                final_chunk: true,
            }),
            GateAction::EndDelivery,
        ]
    }
}
