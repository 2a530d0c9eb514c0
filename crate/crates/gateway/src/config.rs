//! Gateway configuration: strict JSON loading with aggregated
//! missing-field reporting.
//!
//! Secrets never live in the file. A backend config names the
//! environment variable holding its API key; the variable is read when a
//! request is made, not when the config loads, so key rotation needs no
//! restart and `serve` can start before credentials exist.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gateway_core::detector::{DEFAULT_AUX_PREFIXES, DEFAULT_INSTRUCTION};
use gateway_core::{FailureMode, PolicyConfig};
use serde::Deserialize;
use serde_json::Value;

pub const DEFAULT_LISTEN_ADDRESS: &str = "127.0.0.1:8080";
pub const DEFAULT_LOG_LEVEL: &str = "info";
pub const DEFAULT_REQUEST_TIMEOUT_MS: u64 = 120_000;
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Every missing required field, reported together as dotted paths.
    #[error("missing required config fields: {}", fields.join(", "))]
    MissingFields { fields: Vec<String> },
    #[error("config parse error in {origin}: {detail}")]
    Parse { origin: String, detail: String },
    #[error("invalid config value: {detail}")]
    Invalid { detail: String },
}

/// One upstream chat backend.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// OpenAI-compatible HTTP API.
    Http {
        base_url: String,
        model: String,
        /// Name of the environment variable holding the API key;
        /// omitted for backends that need no credential.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        request_timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
    /// Scripted in-process mock, for tests and offline evaluation.
    Mock {
        /// Path to a mock-script JSON file, relative to the config file.
        script: String,
    },
}

fn default_timeout() -> u64 {
    DEFAULT_REQUEST_TIMEOUT_MS
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

/// Detection-prompt overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DetectionOverrides {
    instruction_text: Option<String>,
    aux_prefixes: Option<Vec<String>>,
}

/// Resolved detection settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionConfig {
    pub instruction_text: String,
    /// Extra auxiliary prefixes recognized on top of the built-in set.
    pub aux_prefixes: Vec<String>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            instruction_text: DEFAULT_INSTRUCTION.to_owned(),
            aux_prefixes: DEFAULT_AUX_PREFIXES.iter().map(|p| p.to_string()).collect(),
        }
    }
}

/// Per-field policy overrides; anything omitted keeps the default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PolicyOverrides {
    checker_timeout_ms: Option<u64>,
    failure_mode: Option<FailureMode>,
    refusal_template: Option<String>,
    cache_enabled: Option<bool>,
    cache_capacity: Option<usize>,
    cache_ttl_s: Option<u64>,
    delimiter_tag: Option<String>,
    early_release: Option<bool>,
}

impl PolicyOverrides {
    fn merge(self) -> PolicyConfig {
        let mut policy = PolicyConfig::default();
        if let Some(v) = self.checker_timeout_ms {
            policy.checker_timeout_ms = v;
        }
        if let Some(v) = self.failure_mode {
            policy.failure_mode = v;
        }
        if let Some(v) = self.refusal_template {
            policy.refusal_template = v;
        }
        if let Some(v) = self.cache_enabled {
            policy.cache_enabled = v;
        }
        if let Some(v) = self.cache_capacity {
            policy.cache_capacity = v;
        }
        if let Some(v) = self.cache_ttl_s {
            policy.cache_ttl_s = v;
        }
        if let Some(v) = self.delimiter_tag {
            policy.delimiter_tag = v;
        }
        if let Some(v) = self.early_release {
            policy.early_release = v;
        }
        policy
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    listen_address: Option<String>,
    target: BackendConfig,
    checker: BackendConfig,
    #[serde(default)]
    policy: Option<PolicyOverrides>,
    #[serde(default)]
    detection: Option<DetectionOverrides>,
    #[serde(default)]
    ae_sink_path: Option<String>,
    #[serde(default)]
    log_level: Option<String>,
}

/// Fully resolved gateway configuration: every optional has its default
/// applied and relative paths are anchored at the config file's
/// directory.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen_address: String,
    pub target: BackendConfig,
    pub checker: BackendConfig,
    pub policy: PolicyConfig,
    pub detection: DetectionConfig,
    pub ae_sink_path: Option<PathBuf>,
    pub log_level: String,
}

pub fn load_config(path: &Path) -> Result<GatewayConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text, &path.display().to_string(), path.parent())
}

/// Parse and resolve a config document. `base_dir` anchors relative
/// script and sink paths; `origin` labels parse errors.
pub fn parse_config(
    text: &str,
    origin: &str,
    base_dir: Option<&Path>,
) -> Result<GatewayConfig, ConfigError> {
    // First a structural pass over the raw JSON so that every missing
    // required field (and every unknown key in the enum-shaped backend
    // sections, where serde cannot check) is reported in one round.
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.to_owned(),
        detail: e.to_string(),
    })?;
    structural_check(&value, origin)?;

    let raw: RawConfig = serde_json::from_value(value).map_err(|e| ConfigError::Parse {
        origin: origin.to_owned(),
        detail: e.to_string(),
    })?;

    let policy = raw.policy.unwrap_or_default().merge();
    policy
        .validate()
        .map_err(|e| ConfigError::Invalid {
            detail: e.to_string(),
        })?;

    let mut detection = DetectionConfig::default();
    if let Some(overrides) = raw.detection {
        if let Some(instruction) = overrides.instruction_text {
            if instruction.trim().is_empty() {
                return Err(ConfigError::Invalid {
                    detail: "detection.instruction_text must be non-empty".into(),
                });
            }
            detection.instruction_text = instruction;
        }
        if let Some(prefixes) = overrides.aux_prefixes {
            detection.aux_prefixes.extend(prefixes);
        }
    }

    let target = resolve_backend(raw.target, base_dir, "target")?;
    let checker = resolve_backend(raw.checker, base_dir, "checker")?;

    let ae_sink_path = raw
        .ae_sink_path
        .map(|p| anchor_path(&p, base_dir));

    Ok(GatewayConfig {
        listen_address: raw
            .listen_address
            .unwrap_or_else(|| DEFAULT_LISTEN_ADDRESS.to_owned()),
        target,
        checker,
        policy,
        detection,
        ae_sink_path,
        log_level: raw.log_level.unwrap_or_else(|| DEFAULT_LOG_LEVEL.to_owned()),
    })
}

fn anchor_path(path: &str, base_dir: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(path);
    match base_dir {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

fn resolve_backend(
    backend: BackendConfig,
    base_dir: Option<&Path>,
    section: &str,
) -> Result<BackendConfig, ConfigError> {
    match backend {
        BackendConfig::Http {
            base_url,
            model,
            api_key_env,
            request_timeout_ms,
            max_retries,
        } => {
            if base_url.trim().is_empty() {
                return Err(ConfigError::Invalid {
                    detail: format!("{section}.base_url must be non-empty"),
                });
            }
            if model.trim().is_empty() {
                return Err(ConfigError::Invalid {
                    detail: format!("{section}.model must be non-empty"),
                });
            }
            if request_timeout_ms == 0 {
                return Err(ConfigError::Invalid {
                    detail: format!("{section}.request_timeout_ms must be positive"),
                });
            }
            Ok(BackendConfig::Http {
                base_url,
                model,
                api_key_env,
                request_timeout_ms,
                max_retries,
            })
        }
        BackendConfig::Mock { script } => {
            if script.trim().is_empty() {
                return Err(ConfigError::Invalid {
                    detail: format!("{section}.script must be non-empty"),
                });
            }
            Ok(BackendConfig::Mock {
                script: anchor_path(&script, base_dir).display().to_string(),
            })
        }
    }
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "listen_address",
    "target",
    "checker",
    "policy",
    "detection",
    "ae_sink_path",
    "log_level",
];
const HTTP_BACKEND_KEYS: &[&str] = &[
    "kind",
    "base_url",
    "model",
    "api_key_env",
    "request_timeout_ms",
    "max_retries",
];
const MOCK_BACKEND_KEYS: &[&str] = &["kind", "script"];

/// Collect every missing required field and every unknown backend key in
/// a single pass, before the typed parse.
fn structural_check(value: &Value, origin: &str) -> Result<(), ConfigError> {
    let Some(object) = value.as_object() else {
        return Err(ConfigError::Parse {
            origin: origin.to_owned(),
            detail: "top level must be a JSON object".into(),
        });
    };

    if let Some(unknown) = object.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(ConfigError::Parse {
            origin: origin.to_owned(),
            detail: format!("unknown key `{unknown}` at top level"),
        });
    }

    let mut missing: BTreeSet<String> = BTreeSet::new();
    for section in ["target", "checker"] {
        match object.get(section) {
            None => {
                missing.insert(section.to_owned());
            }
            Some(Value::Object(backend)) => {
                check_backend_section(section, backend, &mut missing, origin)?;
            }
            Some(_) => {
                return Err(ConfigError::Parse {
                    origin: origin.to_owned(),
                    detail: format!("`{section}` must be a JSON object"),
                });
            }
        }
    }
    if !missing.is_empty() {
        return Err(ConfigError::MissingFields {
            fields: missing.into_iter().collect(),
        });
    }
    Ok(())
}

fn check_backend_section(
    section: &str,
    backend: &serde_json::Map<String, Value>,
    missing: &mut BTreeSet<String>,
    origin: &str,
) -> Result<(), ConfigError> {
    let Some(kind) = backend.get("kind") else {
        missing.insert(format!("{section}.kind"));
        return Ok(());
    };
    let allowed: &[&str] = match kind.as_str() {
        Some("http") => {
            for field in ["base_url", "model"] {
                if !backend.contains_key(field) {
                    missing.insert(format!("{section}.{field}"));
                }
            }
            HTTP_BACKEND_KEYS
        }
        Some("mock") => {
            if !backend.contains_key("script") {
                missing.insert(format!("{section}.script"));
            }
            MOCK_BACKEND_KEYS
        }
        _ => {
            return Err(ConfigError::Parse {
                origin: origin.to_owned(),
                detail: format!("`{section}.kind` must be \"http\" or \"mock\""),
            });
        }
    };
    if let Some(unknown) = backend.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ConfigError::Parse {
            origin: origin.to_owned(),
            detail: format!("unknown key `{unknown}` in `{section}`"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "target": {"kind": "http", "base_url": "http://t", "model": "tm"},
            "checker": {"kind": "http", "base_url": "http://c", "model": "cm"}
        }"#
    }

    #[test]
    fn minimal_config_gets_every_default() {
        let config = parse_config(minimal(), "test", None).unwrap();
        assert_eq!(config.listen_address, DEFAULT_LISTEN_ADDRESS);
        assert_eq!(config.log_level, DEFAULT_LOG_LEVEL);
        assert_eq!(config.policy, PolicyConfig::default());
        assert_eq!(config.detection, DetectionConfig::default());
        assert!(config.ae_sink_path.is_none());
        match &config.target {
            BackendConfig::Http {
                request_timeout_ms,
                max_retries,
                api_key_env,
                ..
            } => {
                assert_eq!(*request_timeout_ms, DEFAULT_REQUEST_TIMEOUT_MS);
                assert_eq!(*max_retries, DEFAULT_MAX_RETRIES);
                assert!(api_key_env.is_none());
            }
            other => panic!("unexpected backend {other:?}"),
        }
    }

    #[test]
    fn all_missing_required_fields_are_reported_together() {
        let err = parse_config(r#"{}"#, "test", None).unwrap_err();
        match err {
            ConfigError::MissingFields { fields } => {
                assert_eq!(fields, vec!["checker", "target"]);
            }
            other => panic!("unexpected error {other:?}"),
        }

        let err = parse_config(
            r#"{"target": {"kind": "http"}, "checker": {"kind": "mock"}}"#,
            "test",
            None,
        )
        .unwrap_err();
        match err {
            ConfigError::MissingFields { fields } => {
                assert_eq!(
                    fields,
                    vec!["checker.script", "target.base_url", "target.model"]
                );
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config(
            r#"{"tagret": {"kind": "mock", "script": "s"}}"#,
            "test",
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("tagret"), "{err}");

        let with_extra = r#"{
            "target": {"kind": "http", "base_url": "http://t", "model": "m", "api_key": "inline"},
            "checker": {"kind": "mock", "script": "s"}
        }"#;
        let err = parse_config(with_extra, "test", None).unwrap_err();
        assert!(err.to_string().contains("api_key"), "{err}");

        let bad_policy = r#"{
            "target": {"kind": "mock", "script": "s"},
            "checker": {"kind": "mock", "script": "s"},
            "policy": {"cache_sized": 5}
        }"#;
        let err = parse_config(bad_policy, "test", None).unwrap_err();
        assert!(err.to_string().contains("cache_sized"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line_context() {
        let err = parse_config("{\n  \"target\": oops\n}", "conf.json", None).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("conf.json"));
        assert!(message.contains("line 2"), "{message}");
    }

    #[test]
    fn policy_and_detection_overrides_apply() {
        let text = r#"{
            "target": {"kind": "mock", "script": "t.json"},
            "checker": {"kind": "mock", "script": "c.json"},
            "policy": {"checker_timeout_ms": 50, "failure_mode": "fail_open", "cache_enabled": false},
            "detection": {"instruction_text": "Inspect this.", "aux_prefixes": ["The offending part is"]},
            "ae_sink_path": "ae.jsonl",
            "listen_address": "0.0.0.0:9999",
            "log_level": "debug"
        }"#;
        let config = parse_config(text, "test", Some(Path::new("/etc/gw"))).unwrap();
        assert_eq!(config.policy.checker_timeout_ms, 50);
        assert_eq!(config.policy.failure_mode, FailureMode::FailOpen);
        assert!(!config.policy.cache_enabled);
        assert_eq!(config.policy.cache_capacity, PolicyConfig::default().cache_capacity);
        assert_eq!(config.detection.instruction_text, "Inspect this.");
        assert!(config
            .detection
            .aux_prefixes
            .iter()
            .any(|p| p == "The offending part is"));
        assert!(config
            .detection
            .aux_prefixes
            .iter()
            .any(|p| p == DEFAULT_AUX_PREFIXES[0]));
        assert_eq!(config.listen_address, "0.0.0.0:9999");
        assert_eq!(config.log_level, "debug");
        assert_eq!(config.ae_sink_path.unwrap(), Path::new("/etc/gw/ae.jsonl"));
        match &config.target {
            BackendConfig::Mock { script } => {
                assert_eq!(script, "/etc/gw/t.json");
            }
            other => panic!("unexpected backend {other:?}"),
        }
    }

    #[test]
    fn semantic_validation_rejects_bad_values() {
        let zero_timeout = r#"{
            "target": {"kind": "mock", "script": "t"},
            "checker": {"kind": "mock", "script": "c"},
            "policy": {"checker_timeout_ms": 0}
        }"#;
        assert!(matches!(
            parse_config(zero_timeout, "test", None),
            Err(ConfigError::Invalid { .. })
        ));

        let empty_model = r#"{
            "target": {"kind": "http", "base_url": "http://t", "model": " "},
            "checker": {"kind": "mock", "script": "c"}
        }"#;
        assert!(matches!(
            parse_config(empty_model, "test", None),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn bad_kind_is_a_parse_error() {
        let text = r#"{
            "target": {"kind": "grpc"},
            "checker": {"kind": "mock", "script": "c"}
        }"#;
        let err = parse_config(text, "test", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("target.kind"));
    }

    #[test]
    fn api_keys_come_from_env_names_not_literals() {
        let text = r#"{
            "target": {"kind": "http", "base_url": "http://t", "model": "m", "api_key_env": "TARGET_KEY"},
            "checker": {"kind": "mock", "script": "c"}
        }"#;
        let config = parse_config(text, "test", None).unwrap();
        match &config.target {
            BackendConfig::Http { api_key_env, .. } => {
                assert_eq!(api_key_env.as_deref(), Some("TARGET_KEY"));
            }
            other => panic!("unexpected backend {other:?}"),
        }
    }
}
