//! Async driver: races the target and checker backends through a
//! [`GateSession`] and executes the actions it emits.
//!
//! The state machine in the core crate is pure; this module supplies the
//! tasks, channels, and clocks around it. One request becomes a target
//! pump, a checker pump (unless the cache already holds a verdict), a
//! checker deadline, and an event loop that owns the session. The caller
//! gets the resolved outcome plus a receiver of delivered chunks; the
//! loop keeps pumping live chunks after an early release.

use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use gateway_core::cache::{cache_key, CacheStats};
use gateway_core::detector::{build_detection_prompt, DetectionPromptSpec};
use gateway_core::{
    ChatRequest, GateAction, GateDecision, GateEvent, GateSession, JailbreakCategory, PolicyConfig,
    TokenChunk, VerdictParser,
};
use rand::Rng;
use tokio::sync::{mpsc, oneshot};

use crate::ae_store::AeHandle;
use crate::backend::ChatBackend;
use crate::cache::SharedCache;
use crate::clock::Clock;
use crate::config::{BackendConfig, ConfigError, DetectionConfig, GatewayConfig};
use crate::http_backend::HttpBackend;
use crate::metrics::Metrics;
use crate::mock::MockBackend;

/// Request-level failure: the session never resolved, so the client gets
/// an error response instead of a gated stream.
#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("target backend failed: {0}")]
    TargetFailure(String),
    #[error("checker backend failed: {0}")]
    CheckerFailure(String),
    #[error("internal gateway error: {0}")]
    Internal(String),
}

/// Post-release target failure carried in-band on the delivery channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryAbort {
    pub reason: String,
}

/// A resolved request: the gate outcome plus the channel the delivered
/// chunks flow through. For pass-through sessions the channel keeps
/// producing until the target finishes; for refusals it carries exactly
/// the refusal chunk.
pub struct GatedResponse {
    pub request_id: String,
    pub outcome: gateway_core::GateOutcome,
    pub delivered: mpsc::Receiver<Result<TokenChunk, DeliveryAbort>>,
}

impl std::fmt::Debug for GatedResponse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatedResponse")
            .field("request_id", &self.request_id)
            .field("outcome", &self.outcome)
            .finish_non_exhaustive()
    }
}

/// Everything a request needs, shared across the process.
pub struct GatewayState {
    pub policy: PolicyConfig,
    pub detection: DetectionConfig,
    pub parser: VerdictParser,
    pub target: Arc<dyn ChatBackend>,
    pub checker: Arc<dyn ChatBackend>,
    pub cache: Option<Arc<SharedCache>>,
    pub metrics: Arc<Metrics>,
    pub ae: Option<AeHandle>,
    pub clock: Clock,
}

impl GatewayState {
    pub fn new(
        policy: PolicyConfig,
        detection: DetectionConfig,
        target: Arc<dyn ChatBackend>,
        checker: Arc<dyn ChatBackend>,
    ) -> Self {
        let parser = parser_for(&detection);
        let cache = policy
            .cache_enabled
            .then(|| Arc::new(SharedCache::new(policy.cache_capacity, policy.cache_ttl_s)));
        Self {
            policy,
            detection,
            parser,
            target,
            checker,
            cache,
            metrics: Arc::new(Metrics::new()),
            ae: None,
            clock: Clock::new(),
        }
    }

    pub fn from_config(config: &GatewayConfig) -> Result<Self, ConfigError> {
        let target = build_backend(&config.target)?;
        let checker = build_backend(&config.checker)?;
        Ok(Self::new(
            config.policy.clone(),
            config.detection.clone(),
            target,
            checker,
        ))
    }

    pub fn with_ae(mut self, handle: AeHandle) -> Self {
        self.ae = Some(handle);
        self
    }

    pub fn cache_stats(&self) -> CacheStats {
        match &self.cache {
            Some(cache) => cache.stats(self.clock.now_ms_u64()),
            None => CacheStats {
                hits: 0,
                misses: 0,
                evictions: 0,
                live_entries: 0,
            },
        }
    }
}

/// Parser recognizing the configured auxiliary prefixes. The defaults
/// are built into [`VerdictParser`]; only genuine extras are added.
fn parser_for(detection: &DetectionConfig) -> VerdictParser {
    use gateway_core::detector::DEFAULT_AUX_PREFIXES;
    let extras: Vec<String> = detection
        .aux_prefixes
        .iter()
        .filter(|p| !DEFAULT_AUX_PREFIXES.contains(&p.as_str()))
        .cloned()
        .collect();
    VerdictParser::with_extra_prefixes(extras)
}

pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn ChatBackend>, ConfigError> {
    match config {
        BackendConfig::Http {
            base_url,
            model,
            api_key_env,
            request_timeout_ms,
            max_retries,
        } => Ok(Arc::new(HttpBackend::new(
            base_url,
            api_key_env.clone(),
            model,
            *request_timeout_ms,
            *max_retries,
        ))),
        BackendConfig::Mock { script } => {
            let backend = MockBackend::from_file(std::path::Path::new(script)).map_err(|e| {
                ConfigError::Invalid {
                    detail: e.to_string(),
                }
            })?;
            Ok(Arc::new(backend))
        }
    }
}

/// Twelve random alphanumeric characters for the delimiter suffix, fresh
/// per request so a prompt author cannot predict the fence.
fn random_suffix() -> String {
    let mut rng = rand::rng();
    (0..12)
        .map(|_| {
            let n = rng.random_range(0..62u8);
            match n {
                0..=9 => (b'0' + n) as char,
                10..=35 => (b'a' + n - 10) as char,
                _ => (b'A' + n - 36) as char,
            }
        })
        .collect()
}

/// Gate one chat request.
///
/// Consults the verdict cache first; a hit skips the checker entirely.
/// Returns once the session resolves. Delivered chunks (buffered flush,
/// live tail, or the refusal) arrive on the returned channel; a
/// post-release target failure arrives there as an error item.
pub async fn gate_request(
    state: &GatewayState,
    request_id: String,
    request: ChatRequest,
    category: Option<JailbreakCategory>,
) -> Result<GatedResponse, GatewayError> {
    request
        .validate()
        .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
    let prompt = request.user_prompt();
    if prompt.trim().is_empty() {
        return Err(GatewayError::InvalidRequest(
            "user prompt is empty".to_owned(),
        ));
    }

    let clock = state.clock;
    let policy = state.policy.clone();
    let key = cache_key(&prompt);
    let cached = state
        .cache
        .as_ref()
        .and_then(|cache| cache.get(&key, clock.now_ms_u64()));
    let was_cache_hit = cached.is_some();

    let (evt_tx, mut evt_rx) = mpsc::channel::<GateEvent>(64);
    let (out_tx, out_rx) = mpsc::channel::<Result<TokenChunk, DeliveryAbort>>(256);
    let (res_tx, res_rx) = oneshot::channel::<Result<gateway_core::GateOutcome, GatewayError>>();

    let mut session = GateSession::new(
        request_id.clone(),
        policy.clone(),
        state.parser.clone(),
        clock.now_ms(),
    );

    let target_handle = {
        let backend = state.target.clone();
        let evt = evt_tx.clone();
        let request = request.clone();
        tokio::spawn(async move {
            match backend.chat_stream(&request).await {
                Err(error) => {
                    let _ = evt
                        .send(GateEvent::TargetFailed {
                            reason: error.to_string(),
                        })
                        .await;
                }
                Ok(mut stream) => loop {
                    match stream.next().await {
                        Some(Ok(chunk)) => {
                            if evt.send(GateEvent::TargetChunk(chunk)).await.is_err() {
                                return;
                            }
                        }
                        Some(Err(error)) => {
                            let _ = evt
                                .send(GateEvent::TargetFailed {
                                    reason: error.to_string(),
                                })
                                .await;
                            return;
                        }
                        None => {
                            let _ = evt.send(GateEvent::TargetComplete).await;
                            return;
                        }
                    }
                },
            }
        })
    };

    let (checker_handle, deadline_handle) = match cached {
        Some(verdict) => {
            // Cache hit: the verdict event is already in the queue
            // before any target event can race it.
            let _ = evt_tx.send(GateEvent::CachedVerdict(verdict)).await;
            (None, None)
        }
        None => {
            let suffix = random_suffix();
            let spec = DetectionPromptSpec::new(
                state.detection.instruction_text.clone(),
                &policy.delimiter_tag,
                &suffix,
            )
            .map_err(|e| GatewayError::Internal(format!("bad delimiter spec: {e}")))?;
            let detection_request = build_detection_prompt(&prompt, &spec)
                .map_err(|e| GatewayError::Internal(format!("detection prompt: {e}")))?;

            let checker_handle = {
                let backend = state.checker.clone();
                let evt = evt_tx.clone();
                tokio::spawn(async move {
                    match backend.chat_stream(&detection_request).await {
                        Err(error) => {
                            let _ = evt
                                .send(GateEvent::CheckerFailed {
                                    reason: error.to_string(),
                                })
                                .await;
                        }
                        Ok(mut stream) => loop {
                            match stream.next().await {
                                Some(Ok(chunk)) => {
                                    if evt
                                        .send(GateEvent::CheckerChunk(chunk.text))
                                        .await
                                        .is_err()
                                    {
                                        return;
                                    }
                                }
                                Some(Err(error)) => {
                                    let _ = evt
                                        .send(GateEvent::CheckerFailed {
                                            reason: error.to_string(),
                                        })
                                        .await;
                                    return;
                                }
                                None => {
                                    let _ = evt.send(GateEvent::CheckerComplete).await;
                                    return;
                                }
                            }
                        },
                    }
                })
            };
            let deadline_handle = {
                let evt = evt_tx.clone();
                let timeout = Duration::from_millis(policy.checker_timeout_ms);
                tokio::spawn(async move {
                    tokio::time::sleep(timeout).await;
                    let _ = evt.send(GateEvent::CheckerTimeout).await;
                })
            };
            (Some(checker_handle), Some(deadline_handle))
        }
    };
    drop(evt_tx);

    let metrics = state.metrics.clone();
    let cache = state.cache.clone();
    let ae = state.ae.clone();
    tokio::spawn(async move {
        let mut res_tx = Some(res_tx);
        let mut ended = false;
        while let Some(event) = evt_rx.recv().await {
            let now = clock.now_ms();
            for action in session.handle(event, now) {
                match action {
                    GateAction::Deliver(chunk) => {
                        // A closed receiver just means the client went
                        // away; bookkeeping still completes.
                        let _ = out_tx.send(Ok(chunk)).await;
                    }
                    GateAction::EndDelivery => ended = true,
                    GateAction::AbortDelivery { reason } => {
                        let _ = out_tx.send(Err(DeliveryAbort { reason })).await;
                        ended = true;
                    }
                    GateAction::CancelTarget => target_handle.abort(),
                    GateAction::CancelChecker => {
                        if let Some(handle) = &checker_handle {
                            handle.abort();
                        }
                        if let Some(handle) = &deadline_handle {
                            handle.abort();
                        }
                    }
                    GateAction::Resolved(outcome) => {
                        metrics.record_outcome(outcome.decision, outcome.added_delay_ms);
                        if !was_cache_hit {
                            if let (Some(cache), Some(verdict)) = (&cache, &outcome.verdict) {
                                cache.put(key, verdict.clone(), clock.now_ms_u64());
                            }
                        }
                        if outcome.decision == GateDecision::Refused {
                            if let (Some(ae), Some(verdict)) = (&ae, &outcome.verdict) {
                                ae.record(
                                    prompt.clone(),
                                    verdict.fragment.clone(),
                                    session.quarantined_output().to_owned(),
                                );
                            }
                        }
                        tracing::info!(
                            request_id = %session.request_id(),
                            decision = %outcome.decision,
                            category = category.map(|c| c.label()),
                            added_delay_ms = outcome.added_delay_ms,
                            checker_latency_ms = outcome.verdict.as_ref().map(|v| v.latency_ms),
                            cache_hit = was_cache_hit,
                            "gate session resolved"
                        );
                        if let Some(tx) = res_tx.take() {
                            let _ = tx.send(Ok(outcome));
                        }
                    }
                    GateAction::Fail { reason } => {
                        tracing::warn!(
                            request_id = %session.request_id(),
                            %reason,
                            "gate session failed before release"
                        );
                        if let Some(tx) = res_tx.take() {
                            let _ = tx.send(Err(GatewayError::TargetFailure(reason)));
                        }
                        ended = true;
                    }
                }
            }
            if ended && res_tx.is_none() {
                break;
            }
        }
        target_handle.abort();
        if let Some(handle) = checker_handle {
            handle.abort();
        }
        if let Some(handle) = deadline_handle {
            handle.abort();
        }
    });

    match res_rx.await {
        Ok(Ok(outcome)) => Ok(GatedResponse {
            request_id,
            outcome,
            delivered: out_rx,
        }),
        Ok(Err(error)) => Err(error),
        Err(_) => Err(GatewayError::Internal(
            "gate driver terminated unexpectedly".to_owned(),
        )),
    }
}

/// One-shot checker query without the target race: build the detection
/// prompt, ask the checker, parse the verdict. This is the `check` CLI
/// path.
pub async fn check_prompt(
    state: &GatewayState,
    prompt: &str,
) -> Result<gateway_core::DetectionVerdict, GatewayError> {
    if prompt.trim().is_empty() {
        return Err(GatewayError::InvalidRequest(
            "prompt is empty".to_owned(),
        ));
    }
    let suffix = random_suffix();
    let spec = DetectionPromptSpec::new(
        state.detection.instruction_text.clone(),
        &state.policy.delimiter_tag,
        &suffix,
    )
    .map_err(|e| GatewayError::Internal(format!("bad delimiter spec: {e}")))?;
    let request = build_detection_prompt(prompt, &spec)
        .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
    let started = state.clock.now_ms();
    let output = state
        .checker
        .chat_complete(&request)
        .await
        .map_err(|e| GatewayError::CheckerFailure(e.to_string()))?;
    let latency_ms = state.clock.now_ms() - started;
    Ok(state.parser.parse_verdict(&output, latency_ms))
}

/// Drain a delivery channel into (text, chunks), stopping at the end or
/// the first abort.
pub async fn drain_delivery(
    mut delivered: mpsc::Receiver<Result<TokenChunk, DeliveryAbort>>,
) -> Result<(String, Vec<TokenChunk>), DeliveryAbort> {
    let mut text = String::new();
    let mut chunks = Vec::new();
    while let Some(item) = delivered.recv().await {
        let chunk = item?;
        text.push_str(&chunk.text);
        chunks.push(chunk);
    }
    Ok((text, chunks))
}
