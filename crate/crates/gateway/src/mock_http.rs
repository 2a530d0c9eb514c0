//! Scripted OpenAI-compatible HTTP server.
//!
//! Serves a [`MockScript`] over real HTTP so the reqwest backend can be
//! exercised end to end: request serialization, SSE framing, and
//! non-streaming bodies all cross an actual socket. Output is fully
//! deterministic (fixed ids and timestamps) so tests can compare bytes.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use bytes_stream_channel::channel_body;
use gateway_core::ChatRequest;
use tokio::task::JoinHandle;

use crate::mock::{split_tokens, MockBackend, MockScript, MockScriptError};
use crate::sse::{done_frame, frame, ChatCompletion, ChatCompletionChunk};

/// Fixed response id; determinism matters more than realism here.
const MOCK_ID: &str = "chatcmpl-mock";

struct ServerState {
    backend: MockBackend,
    requests: Mutex<Vec<String>>,
}

/// A running mock server bound to an ephemeral localhost port.
pub struct MockServer {
    pub addr: SocketAddr,
    state: Arc<ServerState>,
    handle: JoinHandle<()>,
}

impl MockServer {
    pub async fn spawn(script: MockScript) -> Result<Self, MockScriptError> {
        let backend = MockBackend::new(script)?;
        let state = Arc::new(ServerState {
            backend,
            requests: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(completions))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind ephemeral localhost port");
        let addr = listener.local_addr().expect("listener has an address");
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self {
            addr,
            state,
            handle,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Raw request bodies received so far, oldest first.
    pub fn received_bodies(&self) -> Vec<String> {
        self.state.requests.lock().expect("requests lock").clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn completions(State(state): State<Arc<ServerState>>, body: String) -> Response {
    state
        .requests
        .lock()
        .expect("requests lock")
        .push(body.clone());

    let request: ChatRequest = match serde_json::from_str(&body) {
        Ok(request) => request,
        Err(_) => {
            return (
                StatusCode::BAD_REQUEST,
                axum::Json(serde_json::json!({"error": {"type": "invalid_request"}})),
            )
                .into_response();
        }
    };

    let plan = state.backend.plan_for(&request.user_prompt()).clone();
    let model = request.model.clone();

    if request.stream {
        let pieces = split_tokens(&plan.text, &plan.token_split);
        let body = channel_body(move |tx| async move {
            if plan.first_token_delay_ms > 0 {
                tokio::time::sleep(Duration::from_millis(plan.first_token_delay_ms)).await;
            }
            for (index, piece) in pieces.into_iter().enumerate() {
                if index > 0 && plan.inter_token_delay_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(plan.inter_token_delay_ms)).await;
                }
                let chunk = ChatCompletionChunk::content_delta(MOCK_ID, 0, &model, &piece);
                let json = serde_json::to_string(&chunk).expect("chunk serializes");
                if tx.send(frame(&json)).await.is_err() {
                    return;
                }
            }
            let finish = ChatCompletionChunk::finish(MOCK_ID, 0, &model);
            let json = serde_json::to_string(&finish).expect("chunk serializes");
            if tx.send(frame(&json)).await.is_err() {
                return;
            }
            let _ = tx.send(done_frame()).await;
        });
        Response::builder()
            .status(StatusCode::OK)
            .header(header::CONTENT_TYPE, "text/event-stream")
            .header(header::CACHE_CONTROL, "no-cache")
            .body(body)
            .expect("static response builds")
    } else {
        if plan.first_token_delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(plan.first_token_delay_ms)).await;
        }
        let completion = ChatCompletion::assistant(MOCK_ID, 0, &model, &plan.text);
        (StatusCode::OK, axum::Json(completion)).into_response()
    }
}

/// Minimal channel-backed streaming body helper.
mod bytes_stream_channel {
    use std::convert::Infallible;
    use std::future::Future;

    use axum::body::{Body, Bytes};
    use tokio::sync::mpsc;

    /// Build a streaming body from a producer task that sends strings.
    pub fn channel_body<F, Fut>(producer: F) -> Body
    where
        F: FnOnce(mpsc::Sender<String>) -> Fut,
        Fut: Future<Output = ()> + Send + 'static,
    {
        let (tx, mut rx) = mpsc::channel::<String>(16);
        tokio::spawn(producer(tx));
        Body::from_stream(futures::stream::poll_fn(move |cx| {
            rx.poll_recv(cx)
                .map(|item| item.map(|s| Ok::<Bytes, Infallible>(Bytes::from(s))))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatBackend;
    use crate::http_backend::HttpBackend;
    use crate::mock::{drain_stream, MockMatcher, MockRule, TokenSplit};

    fn script() -> MockScript {
        MockScript {
            rules: vec![MockRule {
                matcher: MockMatcher::Substring("story".into()),
                response_text: "Once upon a time.".into(),
                first_token_delay_ms: 0,
                inter_token_delay_ms: 0,
                token_split: TokenSplit::Whitespace,
            }],
            default_response: "No".into(),
        }
    }

    #[tokio::test]
    async fn streaming_round_trip_preserves_content_bytes() {
        let server = MockServer::spawn(script()).await.unwrap();
        let backend = HttpBackend::new(&server.base_url(), None, "mock-model", 5000, 0);
        let request = ChatRequest::from_user_prompt("mock-model", "tell me a story");
        let stream = backend.chat_stream(&request).await.unwrap();
        let (text, chunks) = drain_stream(stream).await.unwrap();
        assert_eq!(text, "Once upon a time.");
        assert!(chunks.last().unwrap().final_chunk);
        for (i, chunk) in chunks.iter().enumerate() {
            assert_eq!(chunk.index, i as u64);
        }
    }

    #[tokio::test]
    async fn non_streaming_round_trip_preserves_content() {
        let server = MockServer::spawn(script()).await.unwrap();
        let backend = HttpBackend::new(&server.base_url(), None, "mock-model", 5000, 0);
        let request = ChatRequest::from_user_prompt("mock-model", "unmatched");
        let text = backend.chat_complete(&request).await.unwrap();
        assert_eq!(text, "No");
    }

    #[tokio::test]
    async fn server_records_raw_request_bodies() {
        let server = MockServer::spawn(script()).await.unwrap();
        let backend = HttpBackend::new(&server.base_url(), None, "mock-model", 5000, 0);
        let request = ChatRequest::from_user_prompt("", "hello");
        backend.chat_complete(&request).await.unwrap();
        let bodies = server.received_bodies();
        assert_eq!(bodies.len(), 1);
        let seen: ChatRequest = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(seen.model, "mock-model");
        assert!(!seen.stream);
    }
}
