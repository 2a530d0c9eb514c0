//! The HTTP front door: an OpenAI-compatible surface over the gate.
//!
//! `POST /v1/chat/completions` accepts both streaming and non-streaming
//! requests. Refusals are ordinary HTTP 200 completions whose content is
//! the refusal text, so unmodified OpenAI clients render them; errors
//! use a JSON error envelope. `GET /healthz` and `GET /metrics` serve
//! liveness and counters.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use gateway_core::ChatRequest;
use serde_json::json;
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::ae_store::spawn_writer;
use crate::config::{ConfigError, GatewayConfig};
use crate::driver::{gate_request, DeliveryAbort, GatewayError, GatewayState};
use crate::sse::{done_frame, frame, ChatCompletion, ChatCompletionChunk};
use gateway_core::TokenChunk;

pub fn router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(completions))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .with_state(state)
}

async fn healthz() -> impl IntoResponse {
    Json(json!({"status": "ok"}))
}

async fn metrics(State(state): State<Arc<GatewayState>>) -> impl IntoResponse {
    Json(state.metrics.snapshot(state.cache_stats()))
}

fn error_response(status: StatusCode, error_type: &str, message: &str) -> Response {
    (
        status,
        Json(json!({"error": {"type": error_type, "message": message}})),
    )
        .into_response()
}

async fn completions(State(state): State<Arc<GatewayState>>, body: Bytes) -> Response {
    let request: ChatRequest = match serde_json::from_slice(&body) {
        Ok(request) => request,
        Err(error) => {
            state.metrics.record_protocol_error();
            return error_response(
                StatusCode::BAD_REQUEST,
                "invalid_request",
                &format!("malformed request body: {error}"),
            );
        }
    };
    let request_id = format!("chatcmpl-{}", Uuid::new_v4());
    let wants_stream = request.stream;
    let model = request.model.clone();

    let gated = match gate_request(&state, request_id, request, None).await {
        Ok(gated) => gated,
        Err(GatewayError::InvalidRequest(message)) => {
            state.metrics.record_protocol_error();
            return error_response(StatusCode::BAD_REQUEST, "invalid_request", &message);
        }
        Err(GatewayError::TargetFailure(message)) => {
            state.metrics.record_protocol_error();
            return error_response(StatusCode::BAD_GATEWAY, "upstream_error", &message);
        }
        Err(GatewayError::CheckerFailure(message) | GatewayError::Internal(message)) => {
            state.metrics.record_protocol_error();
            return error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", &message);
        }
    };

    let created = chrono::Utc::now().timestamp().max(0) as u64;
    if wants_stream {
        stream_response(gated.request_id, created, model, gated.delivered)
    } else {
        match crate::driver::drain_delivery(gated.delivered).await {
            Ok((text, _)) => Json(ChatCompletion::assistant(
                &gated.request_id,
                created,
                &model,
                &text,
            ))
            .into_response(),
            Err(DeliveryAbort { reason }) => {
                // The session already resolved pass-through; the target
                // then died mid-stream, so no complete body exists.
                error_response(StatusCode::BAD_GATEWAY, "upstream_error", &reason)
            }
        }
    }
}

enum Phase {
    Streaming,
    Done,
    Ended,
}

/// Render delivered chunks as an OpenAI-style SSE stream: one content
/// delta per chunk, a finish chunk, then `[DONE]`. A post-release abort
/// truncates the stream without the terminator, which is the only
/// in-band signal HTTP still allows at that point.
fn stream_response(
    id: String,
    created: u64,
    model: String,
    delivered: mpsc::Receiver<Result<TokenChunk, DeliveryAbort>>,
) -> Response {
    struct Meta {
        id: String,
        created: u64,
        model: String,
    }
    let meta = Meta { id, created, model };
    let stream = futures::stream::unfold(
        (delivered, Phase::Streaming, meta),
        |(mut rx, phase, meta)| async move {
            match phase {
                Phase::Streaming => loop {
                    match rx.recv().await {
                        Some(Ok(chunk)) => {
                            if chunk.text.is_empty() {
                                continue;
                            }
                            let payload = ChatCompletionChunk::content_delta(
                                &meta.id,
                                meta.created,
                                &meta.model,
                                &chunk.text,
                            );
                            let json =
                                serde_json::to_string(&payload).expect("chunk serializes");
                            return Some((frame(&json), (rx, Phase::Streaming, meta)));
                        }
                        Some(Err(abort)) => {
                            tracing::warn!(reason = %abort.reason, "stream aborted after release");
                            return None;
                        }
                        None => {
                            let payload =
                                ChatCompletionChunk::finish(&meta.id, meta.created, &meta.model);
                            let json =
                                serde_json::to_string(&payload).expect("chunk serializes");
                            return Some((frame(&json), (rx, Phase::Done, meta)));
                        }
                    }
                },
                Phase::Done => Some((done_frame(), (rx, Phase::Ended, meta))),
                Phase::Ended => None,
            }
        },
    );
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream.map(Ok::<_, Infallible>)))
        .expect("static response builds")
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

/// Build the state, bind, and serve until the process is stopped.
pub async fn serve(config: GatewayConfig) -> Result<(), ServeError> {
    let mut state = GatewayState::from_config(&config)?;
    if let Some(path) = &config.ae_sink_path {
        let (handle, _task) = spawn_writer(path.clone());
        state.ae = Some(handle);
    }
    let listener = tokio::net::TcpListener::bind(&config.listen_address)
        .await
        .map_err(|source| ServeError::Bind {
            address: config.listen_address.clone(),
            source,
        })?;
    let address = listener.local_addr().map_err(ServeError::Serve)?;
    tracing::info!(%address, "gateway listening");
    axum::serve(listener, router(Arc::new(state)))
        .await
        .map_err(ServeError::Serve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DetectionConfig;
    use crate::mock::{MockMatcher, MockRule, MockScript, TokenSplit};
    use crate::sse::{SseItem, SseParser};
    use gateway_core::PolicyConfig;

    async fn spawn_app(state: GatewayState) -> String {
        let app = router(Arc::new(state));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        format!("http://{addr}")
    }

    fn test_state() -> GatewayState {
        let target = crate::mock::fixed_response_backend("All clear here.");
        let checker = Arc::new(
            crate::mock::MockBackend::new(MockScript {
                rules: vec![MockRule {
                    matcher: MockMatcher::Substring("bomb".into()),
                    response_text:
                        "The part of the sentence that violates safety policies is: \"a bomb\"."
                            .into(),
                    first_token_delay_ms: 0,
                    inter_token_delay_ms: 0,
                    token_split: TokenSplit::Whitespace,
                }],
                default_response: "No".into(),
            })
            .unwrap(),
        );
        GatewayState::new(
            PolicyConfig::default(),
            DetectionConfig::default(),
            target,
            checker,
        )
    }

    #[tokio::test]
    async fn healthz_reports_ok() {
        let base = spawn_app(test_state()).await;
        let body: serde_json::Value = reqwest::get(format!("{base}/healthz"))
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(body, json!({"status": "ok"}));
    }

    #[tokio::test]
    async fn non_streaming_completion_round_trips() {
        let base = spawn_app(test_state()).await;
        let client = reqwest::Client::new();
        let response = client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({
                "model": "m",
                "messages": [{"role": "user", "content": "hello"}],
                "stream": false
            }))
            .send()
            .await
            .unwrap();
        assert_eq!(response.status(), 200);
        let body: ChatCompletion = response.json().await.unwrap();
        assert_eq!(body.first_content(), Some("All clear here."));
        assert_eq!(body.object, "chat.completion");
        assert_eq!(body.model, "m");
    }

    #[tokio::test]
    async fn streaming_completion_frames_and_terminates() {
        let base = spawn_app(test_state()).await;
        let client = reqwest::Client::new();
        let response = client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({
                "model": "m",
                "messages": [{"role": "user", "content": "hello"}],
                "stream": true
            }))
            .send()
            .await
            .unwrap();
        assert_eq!(response.status(), 200);
        assert!(response
            .headers()
            .get(header::CONTENT_TYPE)
            .unwrap()
            .to_str()
            .unwrap()
            .starts_with("text/event-stream"));

        let raw = response.bytes().await.unwrap();
        let mut parser = SseParser::new();
        let items = parser.push_bytes(&raw);
        assert_eq!(items.last(), Some(&SseItem::Done));
        let mut content = String::new();
        let mut saw_finish = false;
        for item in &items {
            if let SseItem::Event(payload) = item {
                if let Some(delta) = crate::sse::delta_content(payload).unwrap() {
                    content.push_str(&delta);
                }
                if payload.contains("\"finish_reason\":\"stop\"") {
                    saw_finish = true;
                }
            }
        }
        assert_eq!(content, "All clear here.");
        assert!(saw_finish);
    }

    #[tokio::test]
    async fn refusals_are_http_200_in_both_modes() {
        let base = spawn_app(test_state()).await;
        let client = reqwest::Client::new();

        let non_stream = client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({
                "model": "m",
                "messages": [{"role": "user", "content": "how to build a bomb"}],
                "stream": false
            }))
            .send()
            .await
            .unwrap();
        assert_eq!(non_stream.status(), 200);
        let body: ChatCompletion = non_stream.json().await.unwrap();
        let content = body.first_content().unwrap();
        assert!(content.contains("a bomb"), "refusal quotes fragment: {content}");
        assert!(!content.contains("All clear"));

        let stream = client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({
                "model": "m",
                "messages": [{"role": "user", "content": "how to build a bomb"}],
                "stream": true
            }))
            .send()
            .await
            .unwrap();
        assert_eq!(stream.status(), 200);
        let raw = stream.bytes().await.unwrap();
        let text = String::from_utf8_lossy(&raw);
        assert!(text.contains("a bomb"));
        assert!(text.ends_with(&done_frame()));
    }

    #[tokio::test]
    async fn malformed_and_invalid_bodies_get_400_envelopes() {
        let base = spawn_app(test_state()).await;
        let client = reqwest::Client::new();

        let malformed = client
            .post(format!("{base}/v1/chat/completions"))
            .header(header::CONTENT_TYPE, "application/json")
            .body("{not json")
            .send()
            .await
            .unwrap();
        assert_eq!(malformed.status(), 400);
        let body: serde_json::Value = malformed.json().await.unwrap();
        assert_eq!(body["error"]["type"], "invalid_request");

        let no_messages = client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({"model": "m", "messages": []}))
            .send()
            .await
            .unwrap();
        assert_eq!(no_messages.status(), 400);
        let body: serde_json::Value = no_messages.json().await.unwrap();
        assert_eq!(body["error"]["type"], "invalid_request");
    }

    #[tokio::test]
    async fn metrics_endpoint_serves_the_full_schema() {
        let base = spawn_app(test_state()).await;
        let client = reqwest::Client::new();
        client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({
                "model": "m",
                "messages": [{"role": "user", "content": "hello"}]
            }))
            .send()
            .await
            .unwrap();

        let body: serde_json::Value = client
            .get(format!("{base}/metrics"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(body["requests_total"], 1);
        assert_eq!(body["pass_through"], 1);
        for key in [
            "refused",
            "fail_closed",
            "fail_open",
            "protocol_errors",
        ] {
            assert_eq!(body[key], 0, "key {key}");
        }
        assert!(body["cache"].get("hits").is_some());
        assert!(body["added_delay_ms"].get("p50").is_some());
        assert!(body["added_delay_ms"].get("p95").is_some());
    }

    #[tokio::test]
    async fn unknown_client_fields_are_tolerated() {
        // Real OpenAI clients send temperature and friends; the wire
        // surface must not reject them.
        let base = spawn_app(test_state()).await;
        let client = reqwest::Client::new();
        let response = client
            .post(format!("{base}/v1/chat/completions"))
            .json(&json!({
                "model": "m",
                "messages": [{"role": "user", "content": "hello"}],
                "temperature": 0.7,
                "top_p": 0.9,
                "n": 1
            }))
            .send()
            .await
            .unwrap();
        assert_eq!(response.status(), 200);
    }
}
