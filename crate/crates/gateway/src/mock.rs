//! Scripted mock backend for tests, offline evaluation, and demos.
//!
//! A script is an ordered rule list matched against the request's user
//! prompt (first match wins) plus a default response. Each rule scripts
//! the response text, token timing, and how the text is split into
//! chunks, which is enough to reproduce fast checkers, slow targets, and
//! stalled upstreams without a network.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use gateway_core::{ChatRequest, TokenChunk};
use regex::Regex;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::backend::{BackendError, ChatBackend, ChunkStream};

/// How a rule matches the request's user prompt.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MockMatcher {
    /// Case-sensitive substring containment.
    Substring(String),
    /// Regular-expression search (not anchored).
    Regex(String),
}

/// How scripted response text is split into stream chunks.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TokenSplit {
    /// One chunk per word, each keeping its trailing whitespace so the
    /// chunks concatenate back to the exact response text.
    #[default]
    Whitespace,
    /// Chunks of exactly this many characters (the last may be shorter).
    FixedNChars(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub matcher: MockMatcher,
    pub response_text: String,
    #[serde(default)]
    pub first_token_delay_ms: u64,
    #[serde(default)]
    pub inter_token_delay_ms: u64,
    #[serde(default)]
    pub token_split: TokenSplit,
}

/// A full mock script: ordered rules plus the fallback response used
/// when no rule matches. The fallback streams as one undelayed chunk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_response: String,
}

#[derive(Debug, thiserror::Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("mock script {path} is not valid JSON: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("rule {index}: invalid regex {pattern:?}: {source}")]
    BadRegex {
        index: usize,
        pattern: String,
        source: regex::Error,
    },
    #[error("rule {index}: fixed_n_chars must be at least 1")]
    ZeroChunkSize { index: usize },
}

impl MockScript {
    pub fn parse(text: &str, origin: &str) -> Result<Self, MockScriptError> {
        serde_json::from_str(text).map_err(|source| MockScriptError::Json {
            path: origin.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Response plan selected for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponsePlan {
    pub text: String,
    pub first_token_delay_ms: u64,
    pub inter_token_delay_ms: u64,
    pub token_split: TokenSplit,
}

enum CompiledMatcher {
    Substring(String),
    Regex(Regex),
}

impl CompiledMatcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            CompiledMatcher::Substring(needle) => prompt.contains(needle),
            CompiledMatcher::Regex(re) => re.is_match(prompt),
        }
    }
}

struct CompiledRule {
    matcher: CompiledMatcher,
    plan: ResponsePlan,
}

/// Backend that answers from a [`MockScript`].
pub struct MockBackend {
    rules: Vec<CompiledRule>,
    default_plan: ResponsePlan,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, MockScriptError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for (index, rule) in script.rules.into_iter().enumerate() {
            if let TokenSplit::FixedNChars(0) = rule.token_split {
                return Err(MockScriptError::ZeroChunkSize { index });
            }
            let matcher = match rule.matcher {
                MockMatcher::Substring(s) => CompiledMatcher::Substring(s),
                MockMatcher::Regex(pattern) => {
                    let re = Regex::new(&pattern).map_err(|source| MockScriptError::BadRegex {
                        index,
                        pattern: pattern.clone(),
                        source,
                    })?;
                    CompiledMatcher::Regex(re)
                }
            };
            rules.push(CompiledRule {
                matcher,
                plan: ResponsePlan {
                    text: rule.response_text,
                    first_token_delay_ms: rule.first_token_delay_ms,
                    inter_token_delay_ms: rule.inter_token_delay_ms,
                    token_split: rule.token_split,
                },
            });
        }
        Ok(Self {
            rules,
            default_plan: ResponsePlan {
                text: script.default_response,
                first_token_delay_ms: 0,
                inter_token_delay_ms: 0,
                token_split: TokenSplit::Whitespace,
            },
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, MockScriptError> {
        Self::new(MockScript::load(path)?)
    }

    /// First matching rule's plan, or the default plan.
    pub fn plan_for(&self, prompt: &str) -> &ResponsePlan {
        self.rules
            .iter()
            .find(|rule| rule.matcher.matches(prompt))
            .map(|rule| &rule.plan)
            .unwrap_or(&self.default_plan)
    }
}

/// Split text into chunks that concatenate back to the input exactly.
pub fn split_tokens(text: &str, split: &TokenSplit) -> Vec<String> {
    match split {
        TokenSplit::Whitespace => split_whitespace_preserving(text),
        TokenSplit::FixedNChars(n) => {
            let chars: Vec<char> = text.chars().collect();
            if chars.is_empty() {
                return vec![String::new()];
            }
            chars
                .chunks(*n)
                .map(|group| group.iter().collect())
                .collect()
        }
    }
}

/// One piece per word, each piece carrying the whitespace that follows
/// it; leading whitespace rides with the first piece. All-whitespace or
/// empty input becomes a single piece.
fn split_whitespace_preserving(text: &str) -> Vec<String> {
    let mut pieces: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut seen_word_in_current = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            current.push(ch);
        } else {
            if seen_word_in_current && current.ends_with(|c: char| c.is_whitespace()) {
                pieces.push(std::mem::take(&mut current));
            }
            current.push(ch);
            seen_word_in_current = true;
        }
    }
    if !current.is_empty() || pieces.is_empty() {
        pieces.push(current);
    }
    pieces
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn chat_stream(&self, request: &ChatRequest) -> Result<ChunkStream, BackendError> {
        let plan = self.plan_for(&request.user_prompt()).clone();
        let pieces = split_tokens(&plan.text, &plan.token_split);
        let (tx, mut rx) = mpsc::channel::<Result<TokenChunk, BackendError>>(16);
        tokio::spawn(async move {
            if plan.first_token_delay_ms > 0 {
                tokio::time::sleep(Duration::from_millis(plan.first_token_delay_ms)).await;
            }
            let last = pieces.len() - 1;
            for (index, piece) in pieces.into_iter().enumerate() {
                if index > 0 && plan.inter_token_delay_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(plan.inter_token_delay_ms)).await;
                }
                let chunk = TokenChunk::new(piece, index as u64, index == last);
                if tx.send(Ok(chunk)).await.is_err() {
                    return;
                }
            }
        });
        Ok(Box::pin(futures::stream::poll_fn(move |cx| {
            rx.poll_recv(cx)
        })))
    }
}

/// Convenience constructor used all over the tests: a backend whose
/// every response is `text`, streamed as a single undelayed chunk.
pub fn fixed_response_backend(text: &str) -> Arc<dyn ChatBackend> {
    Arc::new(
        MockBackend::new(MockScript {
            rules: Vec::new(),
            default_response: text.to_owned(),
        })
        .expect("static script is valid"),
    )
}

/// Wrapper that counts how many requests reach the inner backend. Used
/// to prove cache hits never dispatch a checker call.
pub struct CountingBackend {
    inner: Arc<dyn ChatBackend>,
    calls: std::sync::atomic::AtomicU64,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self {
            inner,
            calls: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatBackend for CountingBackend {
    async fn chat_stream(&self, request: &ChatRequest) -> Result<ChunkStream, BackendError> {
        self.calls
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.chat_stream(request).await
    }

    async fn chat_complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.chat_complete(request).await
    }
}

/// Backend that always fails, for exercising error paths.
pub struct FailingBackend {
    error: BackendError,
}

impl FailingBackend {
    pub fn new(error: BackendError) -> Self {
        Self { error }
    }

    pub fn connection_refused() -> Self {
        Self::new(BackendError::ConnectionFailed {
            message: "connection refused".to_owned(),
            bytes_streamed: false,
        })
    }
}

#[async_trait]
impl ChatBackend for FailingBackend {
    async fn chat_stream(&self, _request: &ChatRequest) -> Result<ChunkStream, BackendError> {
        Err(self.error.clone())
    }
}

/// Drain a chunk stream into (concatenated text, chunks).
pub async fn drain_stream(
    mut stream: ChunkStream,
) -> Result<(String, Vec<TokenChunk>), BackendError> {
    let mut text = String::new();
    let mut chunks = Vec::new();
    while let Some(item) = stream.next().await {
        let chunk = item?;
        text.push_str(&chunk.text);
        chunks.push(chunk);
    }
    Ok((text, chunks))
}
