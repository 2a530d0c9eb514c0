//! OpenAI-compatible HTTP chat backend over reqwest.
//!
//! Credentials come from the environment at call time: the config names
//! an environment variable, never a key. Retries cover connection-level
//! failures only, and only before any response bytes were consumed.

use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use gateway_core::{ChatRequest, TokenChunk};
use tokio::sync::mpsc;

use crate::backend::{BackendError, ChatBackend, ChunkStream};
use crate::sse::{delta_content, ChatCompletion, SseItem, SseParser};

/// Longest upstream error body kept verbatim in a [`BackendError`].
const ERROR_BODY_LIMIT: usize = 2048;

#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    api_key_env: Option<String>,
    model: String,
    timeout_ms: u64,
    max_retries: u32,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(
        base_url: &str,
        api_key_env: Option<String>,
        model: &str,
        request_timeout_ms: u64,
        max_retries: u32,
    ) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(request_timeout_ms))
            .build()
            .expect("reqwest client with static options");
        Self {
            endpoint: endpoint_url(base_url),
            api_key_env,
            model: model.to_owned(),
            timeout_ms: request_timeout_ms,
            max_retries,
            client,
        }
    }

    /// Clone the request, force the stream flag, and substitute the
    /// configured model when the request leaves it empty.
    fn prepare(&self, request: &ChatRequest, stream: bool) -> ChatRequest {
        let mut prepared = request.clone();
        prepared.stream = stream;
        if prepared.model.is_empty() {
            prepared.model = self.model.clone();
        }
        prepared
    }

    /// Read the API key from the configured environment variable, at
    /// call time. `None` means the backend needs no credential.
    fn resolve_api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(value) => Ok(Some(value)),
                Err(_) => Err(BackendError::ConnectionFailed {
                    message: format!("API key environment variable {var} is not set"),
                    bytes_streamed: false,
                }),
            },
        }
    }

    /// POST the request, retrying connection-level failures. Returns the
    /// response with status already verified as success.
    async fn send_checked(
        &self,
        body: &ChatRequest,
        api_key: Option<&str>,
    ) -> Result<reqwest::Response, BackendError> {
        let mut attempt = 0u32;
        loop {
            let mut builder = self.client.post(&self.endpoint).json(body);
            if let Some(key) = api_key {
                builder = builder.bearer_auth(key);
            }
            let result = builder.send().await;
            match result {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return Ok(response);
                    }
                    let body = response.text().await.unwrap_or_default();
                    return Err(BackendError::UpstreamHttp {
                        status: status.as_u16(),
                        body: truncate_chars(&body, ERROR_BODY_LIMIT),
                        bytes_streamed: false,
                    });
                }
                Err(error) => {
                    let mapped = self.map_send_error(error);
                    if mapped.is_retryable() && attempt < self.max_retries {
                        attempt += 1;
                        tokio::time::sleep(backoff(attempt)).await;
                        continue;
                    }
                    return Err(mapped);
                }
            }
        }
    }

    fn map_send_error(&self, error: reqwest::Error) -> BackendError {
        if error.is_timeout() {
            BackendError::Timeout {
                timeout_ms: self.timeout_ms,
                bytes_streamed: false,
            }
        } else {
            BackendError::ConnectionFailed {
                message: error.to_string(),
                bytes_streamed: false,
            }
        }
    }
}

fn endpoint_url(base_url: &str) -> String {
    format!(
        "{}/v1/chat/completions",
        base_url.trim_end_matches('/')
    )
}

fn backoff(attempt: u32) -> Duration {
    Duration::from_millis(25u64.saturating_mul(1 << attempt.min(4)))
}

fn truncate_chars(text: &str, limit: usize) -> String {
    text.chars().take(limit).collect()
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn chat_stream(&self, request: &ChatRequest) -> Result<ChunkStream, BackendError> {
        let api_key = self.resolve_api_key()?;
        let body = self.prepare(request, true);
        let response = self.send_checked(&body, api_key.as_deref()).await?;
        let timeout_ms = self.timeout_ms;

        let (tx, mut rx) = mpsc::channel::<Result<TokenChunk, BackendError>>(32);
        tokio::spawn(async move {
            let mut byte_stream = response.bytes_stream();
            let mut parser = SseParser::new();
            let mut pending: Option<String> = None;
            let mut next_index = 0u64;
            let mut consumed = false;

            // Hold one content delta back so the last real chunk can be
            // flagged final once the terminator arrives.
            'read: loop {
                let Some(item) = byte_stream.next().await else {
                    break 'read;
                };
                let bytes = match item {
                    Ok(bytes) => bytes,
                    Err(error) => {
                        let mapped = if error.is_timeout() {
                            BackendError::Timeout {
                                timeout_ms,
                                bytes_streamed: consumed,
                            }
                        } else {
                            BackendError::ConnectionFailed {
                                message: error.to_string(),
                                bytes_streamed: consumed,
                            }
                        };
                        let _ = tx.send(Err(mapped)).await;
                        return;
                    }
                };
                if !bytes.is_empty() {
                    consumed = true;
                }
                for event in parser.push_bytes(&bytes) {
                    match event {
                        SseItem::Done => break 'read,
                        SseItem::Event(payload) => match delta_content(&payload) {
                            Ok(Some(content)) => {
                                if content.is_empty() {
                                    continue;
                                }
                                if let Some(prev) = pending.replace(content) {
                                    let chunk = TokenChunk::new(prev, next_index, false);
                                    next_index += 1;
                                    if tx.send(Ok(chunk)).await.is_err() {
                                        return;
                                    }
                                }
                            }
                            Ok(None) => {}
                            Err(error) => {
                                let _ = tx
                                    .send(Err(BackendError::Protocol {
                                        message: format!(
                                            "malformed stream event JSON: {error}"
                                        ),
                                        bytes_streamed: consumed,
                                    }))
                                    .await;
                                return;
                            }
                        },
                    }
                }
            }

            let text = pending.take().unwrap_or_default();
            let _ = tx.send(Ok(TokenChunk::new(text, next_index, true))).await;
        });

        Ok(Box::pin(futures::stream::poll_fn(move |cx| {
            rx.poll_recv(cx)
        })))
    }

    async fn chat_complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let api_key = self.resolve_api_key()?;
        let body = self.prepare(request, false);
        let response = self.send_checked(&body, api_key.as_deref()).await?;
        let text = response.text().await.map_err(|error| {
            if error.is_timeout() {
                BackendError::Timeout {
                    timeout_ms: self.timeout_ms,
                    bytes_streamed: true,
                }
            } else {
                BackendError::ConnectionFailed {
                    message: error.to_string(),
                    bytes_streamed: true,
                }
            }
        })?;
        let completion: ChatCompletion =
            serde_json::from_str(&text).map_err(|error| BackendError::Protocol {
                message: format!("malformed completion JSON: {error}"),
                bytes_streamed: true,
            })?;
        match completion.first_content() {
            Some(content) => Ok(content.to_owned()),
            None => Err(BackendError::Protocol {
                message: "completion response carried no choices".to_owned(),
                bytes_streamed: true,
            }),
        }
    }
}
