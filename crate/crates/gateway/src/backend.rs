//! The backend abstraction the driver races: anything that can answer a
//! chat request as a token stream.

use std::pin::Pin;

use async_trait::async_trait;
use futures::{Stream, StreamExt};
use gateway_core::{ChatRequest, TokenChunk};

/// Failure surfaced by a backend call.
///
/// `bytes_streamed` records whether any response bytes had already been
/// consumed when the failure happened. Retries are only safe while it is
/// false; once a stream has started, a failure must surface as-is.
#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    /// The request never produced a usable connection or response.
    #[error("connection failed: {message}")]
    ConnectionFailed { message: String, bytes_streamed: bool },

    /// The configured request timeout elapsed.
    #[error("request timed out after {timeout_ms}ms")]
    Timeout { timeout_ms: u64, bytes_streamed: bool },

    /// The upstream answered with a non-success HTTP status.
    #[error("upstream returned HTTP {status}: {body}")]
    UpstreamHttp {
        status: u16,
        body: String,
        bytes_streamed: bool,
    },

    /// The upstream answered, but the payload did not follow the wire
    /// protocol (malformed SSE framing or response JSON).
    #[error("upstream protocol error: {message}")]
    Protocol { message: String, bytes_streamed: bool },
}

impl BackendError {
    /// True once any response bytes were consumed before the failure.
    pub fn bytes_streamed(&self) -> bool {
        match self {
            BackendError::ConnectionFailed { bytes_streamed, .. }
            | BackendError::Timeout { bytes_streamed, .. }
            | BackendError::UpstreamHttp { bytes_streamed, .. }
            | BackendError::Protocol { bytes_streamed, .. } => *bytes_streamed,
        }
    }

    /// True when a fresh attempt of the same request is safe and useful:
    /// connection-level failures where no response bytes were consumed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::ConnectionFailed {
                bytes_streamed: false,
                ..
            }
        )
    }
}

/// Stream of token chunks from a backend. Indices are strictly increasing
/// from zero and exactly the last yielded chunk carries `final_chunk`.
pub type ChunkStream = Pin<Box<dyn Stream<Item = Result<TokenChunk, BackendError>> + Send>>;

/// A chat completion backend.
///
/// Implementations must uphold the stream contract above and must make
/// `chat_complete` agree with draining `chat_stream`: same text, same
/// error classification.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Issue the request in streaming mode.
    async fn chat_stream(&self, request: &ChatRequest) -> Result<ChunkStream, BackendError>;

    /// Issue the request and return the assembled response text.
    ///
    /// The default implementation drains `chat_stream`, which keeps the
    /// two entry points equivalent by construction.
    async fn chat_complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut stream = self.chat_stream(request).await?;
        let mut text = String::new();
        while let Some(item) = stream.next().await {
            text.push_str(&item?.text);
        }
        Ok(text)
    }
}
