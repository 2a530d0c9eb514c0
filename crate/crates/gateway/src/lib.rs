//! HTTP gateway, CLI, and evaluation harness around [`gateway_core`].
//!
//! The core crate owns the pure decision logic (detection prompt assembly,
//! verdict parsing, the race-and-checkpoint state machine, the verdict
//! cache, and eval scoring). This crate supplies everything that touches
//! the outside world: backend clients for OpenAI-compatible chat APIs, a
//! scripted mock backend for tests and offline runs, the async driver that
//! races target and checker streams through a [`gateway_core::GateSession`],
//! the axum HTTP front door, the adversarial-example sink, metrics, config
//! loading, and the `gateway` command-line tool.

pub mod ae_store;
pub mod backend;
pub mod cache;
pub mod clock;
pub mod config;
pub mod driver;
pub mod eval;
pub mod http_backend;
pub mod metrics;
pub mod mock;
pub mod mock_http;
pub mod service;
pub mod sse;

pub use backend::{BackendError, ChatBackend, ChunkStream};
pub use clock::Clock;
pub use config::{BackendConfig, ConfigError, DetectionConfig, GatewayConfig};
pub use driver::{gate_request, DeliveryAbort, GatedResponse, GatewayState};
pub use metrics::Metrics;
pub use mock::{MockBackend, MockScript};
