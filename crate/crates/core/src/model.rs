//! Domain types shared by every stage of the gateway.
//!
//! All types are immutable values after construction and safe to share
//! across concurrent tasks.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Message author role in a chat conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::System => f.write_str("system"),
            Role::User => f.write_str("user"),
            Role::Assistant => f.write_str("assistant"),
        }
    }
}

/// One message in a chat conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// A chat-completion request as it flows through both the target and the
/// checker path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub stream: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Single-user-message request, the shape the detector builds.
    pub fn from_user_prompt(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: alloc::vec![ChatMessage::user(prompt)],
            stream: false,
            max_tokens: None,
        }
    }

    /// The user prompt of the request: all user-role message contents in
    /// order, joined by single newlines. System and assistant messages are
    /// excluded; they belong to the deploying application, not the
    /// attacker surface checked here.
    pub fn user_prompt(&self) -> String {
        let parts: Vec<&str> = self
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect();
        parts.join("\n")
    }

    /// Checks structural invariants: at least one message, at least one of
    /// them user-role, and empty content only on assistant placeholders.
    pub fn validate(&self) -> Result<(), InvalidRequest> {
        if self.messages.is_empty() {
            return Err(InvalidRequest::NoMessages);
        }
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(InvalidRequest::NoUserMessage);
        }
        if let Some(max) = self.max_tokens {
            if max == 0 {
                return Err(InvalidRequest::ZeroMaxTokens);
            }
        }
        Ok(())
    }
}

/// Why a [`ChatRequest`] failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidRequest {
    NoMessages,
    NoUserMessage,
    ZeroMaxTokens,
}

impl fmt::Display for InvalidRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvalidRequest::NoMessages => f.write_str("request has no messages"),
            InvalidRequest::NoUserMessage => f.write_str("request has no user-role message"),
            InvalidRequest::ZeroMaxTokens => f.write_str("max_tokens must be positive"),
        }
    }
}

impl core::error::Error for InvalidRequest {}

/// One fragment of a streamed model response.
///
/// Exactly one chunk per stream carries `final_chunk = true`, and it has
/// the highest index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub text: String,
    pub index: u64,
    #[serde(rename = "final")]
    pub final_chunk: bool,
}

impl TokenChunk {
    pub fn new(text: impl Into<String>, index: u64, final_chunk: bool) -> Self {
        Self {
            text: text.into(),
            index,
            final_chunk,
        }
    }
}

/// What the checker concluded about a user prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Benign,
    Harmful,
}

/// Parsed checker output.
///
/// `fragment` is empty exactly when the verdict is benign; a harmful
/// verdict always carries the non-empty excerpt the checker identified.
/// `raw_checker_output` preserves the checker's reply verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub kind: VerdictKind,
    pub fragment: String,
    pub raw_checker_output: String,
    pub latency_ms: f64,
}

impl DetectionVerdict {
    pub fn benign(raw_checker_output: impl Into<String>, latency_ms: f64) -> Self {
        Self {
            kind: VerdictKind::Benign,
            fragment: String::new(),
            raw_checker_output: raw_checker_output.into(),
            latency_ms,
        }
    }

    /// `fragment` must be non-empty after trimming; the verdict parser
    /// guarantees this for every harmful verdict it produces.
    pub fn harmful(
        fragment: impl Into<String>,
        raw_checker_output: impl Into<String>,
        latency_ms: f64,
    ) -> Self {
        let fragment = fragment.into();
        debug_assert!(!fragment.trim().is_empty());
        Self {
            kind: VerdictKind::Harmful,
            fragment,
            raw_checker_output: raw_checker_output.into(),
            latency_ms,
        }
    }

    pub fn is_harmful(&self) -> bool {
        self.kind == VerdictKind::Harmful
    }
}

/// What the checkpoint decided for one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    PassThrough,
    Refused,
    FailClosed,
    FailOpen,
}

impl fmt::Display for GateDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateDecision::PassThrough => f.write_str("pass_through"),
            GateDecision::Refused => f.write_str("refused"),
            GateDecision::FailClosed => f.write_str("fail_closed"),
            GateDecision::FailOpen => f.write_str("fail_open"),
        }
    }
}

/// Resolution of a gate session.
///
/// A verdict is present exactly for `PassThrough` (benign) and `Refused`
/// (harmful); the failure decisions describe the checker error/timeout
/// path where no verdict was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub decision: GateDecision,
    pub verdict: Option<DetectionVerdict>,
    pub refusal_text: Option<String>,
    pub added_delay_ms: f64,
}

impl GateOutcome {
    pub fn pass_through(verdict: DetectionVerdict, added_delay_ms: f64) -> Self {
        debug_assert_eq!(verdict.kind, VerdictKind::Benign);
        Self {
            decision: GateDecision::PassThrough,
            verdict: Some(verdict),
            refusal_text: None,
            added_delay_ms,
        }
    }

    pub fn refused(
        verdict: DetectionVerdict,
        refusal_text: impl Into<String>,
        added_delay_ms: f64,
    ) -> Self {
        debug_assert_eq!(verdict.kind, VerdictKind::Harmful);
        let refusal_text = refusal_text.into();
        debug_assert!(!refusal_text.is_empty());
        Self {
            decision: GateDecision::Refused,
            verdict: Some(verdict),
            refusal_text: Some(refusal_text),
            added_delay_ms,
        }
    }

    pub fn fail_closed(refusal_text: impl Into<String>, added_delay_ms: f64) -> Self {
        Self {
            decision: GateDecision::FailClosed,
            verdict: None,
            refusal_text: Some(refusal_text.into()),
            added_delay_ms,
        }
    }

    pub fn fail_open(added_delay_ms: f64) -> Self {
        Self {
            decision: GateDecision::FailOpen,
            verdict: None,
            refusal_text: None,
            added_delay_ms,
        }
    }
}

/// What to do when the checker itself fails or times out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Refuse the request; the defense defaults safe.
    FailClosed,
    /// Pass the target response through unchecked.
    FailOpen,
}

/// Fragment placeholder that must appear exactly once in a refusal template.
pub const FRAGMENT_PLACEHOLDER: &str = "{fragment}";

/// Default refusal template: an explainable refusal quoting the fragment
/// the checker identified.
pub const DEFAULT_REFUSAL_TEMPLATE: &str = "I can't assist with that. Your request was declined \
     because it contains content that violates safety policies: \"{fragment}\".";

/// Knobs governing the checkpoint and the verdict cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Budget for the checker verdict before `failure_mode` applies.
    pub checker_timeout_ms: u64,
    pub failure_mode: FailureMode,
    /// Refusal text with a single `{fragment}` placeholder.
    pub refusal_template: String,
    pub cache_enabled: bool,
    pub cache_capacity: usize,
    pub cache_ttl_s: u64,
    /// ASCII token the detection prompt's delimiters are derived from.
    pub delimiter_tag: String,
    /// Release the checkpoint on the checker's first streamed token when
    /// it already reads as a benign answer, instead of waiting for the
    /// complete reply.
    pub early_release: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            checker_timeout_ms: 10_000,
            failure_mode: FailureMode::FailClosed,
            refusal_template: DEFAULT_REFUSAL_TEMPLATE.to_string(),
            cache_enabled: true,
            cache_capacity: 1024,
            cache_ttl_s: 600,
            delimiter_tag: "GUARD".to_string(),
            early_release: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), InvalidPolicy> {
        if self.checker_timeout_ms == 0 {
            return Err(InvalidPolicy::ZeroTimeout);
        }
        if self.refusal_template.matches(FRAGMENT_PLACEHOLDER).count() != 1 {
            return Err(InvalidPolicy::BadRefusalTemplate);
        }
        let tag = &self.delimiter_tag;
        if tag.len() < 4 || tag.len() > 32 || !tag.chars().all(|c| c.is_ascii() && !c.is_whitespace())
        {
            return Err(InvalidPolicy::BadDelimiterTag);
        }
        if self.cache_capacity == 0 {
            return Err(InvalidPolicy::ZeroCacheCapacity);
        }
        if self.cache_ttl_s == 0 {
            return Err(InvalidPolicy::ZeroCacheTtl);
        }
        Ok(())
    }
}

/// Why a [`PolicyConfig`] failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidPolicy {
    ZeroTimeout,
    BadRefusalTemplate,
    BadDelimiterTag,
    ZeroCacheCapacity,
    ZeroCacheTtl,
}

impl fmt::Display for InvalidPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvalidPolicy::ZeroTimeout => f.write_str("checker_timeout_ms must be positive"),
            InvalidPolicy::BadRefusalTemplate => {
                write!(
                    f,
                    "refusal_template must contain the {FRAGMENT_PLACEHOLDER} placeholder exactly once"
                )
            }
            InvalidPolicy::BadDelimiterTag => {
                f.write_str("delimiter_tag must be 4-32 ASCII characters with no whitespace")
            }
            InvalidPolicy::ZeroCacheCapacity => f.write_str("cache_capacity must be positive"),
            InvalidPolicy::ZeroCacheTtl => f.write_str("cache_ttl_s must be positive"),
        }
    }
}

impl core::error::Error for InvalidPolicy {}

/// Attack-category label for a corpus prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JailbreakCategory {
    Gcg,
    TemplateBased,
    Multilingual,
    Normal,
}

impl JailbreakCategory {
    pub const ALL: [JailbreakCategory; 4] = [
        JailbreakCategory::Gcg,
        JailbreakCategory::TemplateBased,
        JailbreakCategory::Multilingual,
        JailbreakCategory::Normal,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            JailbreakCategory::Gcg => "gcg",
            JailbreakCategory::TemplateBased => "template_based",
            JailbreakCategory::Multilingual => "multilingual",
            JailbreakCategory::Normal => "normal",
        }
    }
}

impl fmt::Display for JailbreakCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn user_prompt_single_message() {
        let req = ChatRequest::from_user_prompt("m", "hello");
        assert_eq!(req.user_prompt(), "hello");
    }

    #[test]
    fn user_prompt_filters_roles_and_preserves_order() {
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![
                ChatMessage::system("s"),
                ChatMessage::user("a"),
                ChatMessage::assistant("x"),
                ChatMessage::user("b"),
            ],
            stream: false,
            max_tokens: None,
        };
        assert_eq!(req.user_prompt(), "a\nb");
    }

    #[test]
    fn user_prompt_empty_content() {
        let req = ChatRequest::from_user_prompt("m", "");
        assert_eq!(req.user_prompt(), "");
    }

    #[test]
    fn validate_rejects_requests_without_user_message() {
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::system("s")],
            stream: false,
            max_tokens: None,
        };
        assert_eq!(req.validate(), Err(InvalidRequest::NoUserMessage));

        let empty = ChatRequest {
            model: "m".into(),
            messages: vec![],
            stream: false,
            max_tokens: None,
        };
        assert_eq!(empty.validate(), Err(InvalidRequest::NoMessages));
    }

    #[test]
    fn default_policy_is_valid() {
        assert_eq!(PolicyConfig::default().validate(), Ok(()));
    }

    #[test]
    fn policy_rejects_template_without_placeholder() {
        let p = PolicyConfig {
            refusal_template: "blocked".into(),
            ..PolicyConfig::default()
        };
        assert_eq!(p.validate(), Err(InvalidPolicy::BadRefusalTemplate));
        let p = PolicyConfig {
            refusal_template: "{fragment} and {fragment}".into(),
            ..PolicyConfig::default()
        };
        assert_eq!(p.validate(), Err(InvalidPolicy::BadRefusalTemplate));
    }

    #[test]
    fn policy_rejects_bad_delimiter_tags() {
        for tag in ["abc", "has space", "ünïcode", &"x".repeat(33)] {
            let p = PolicyConfig {
                delimiter_tag: tag.into(),
                ..PolicyConfig::default()
            };
            assert_eq!(p.validate(), Err(InvalidPolicy::BadDelimiterTag), "{tag}");
        }
    }

    #[test]
    fn chat_request_round_trips_through_json() {
        let req = ChatRequest {
            model: "gpt-4".into(),
            messages: vec![ChatMessage::system("be terse"), ChatMessage::user("hi")],
            stream: true,
            max_tokens: Some(64),
        };
        let json = serde_json::to_string(&req).unwrap();
        let back: ChatRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(req, back);
    }
}
