//! Adversarial-example sink: an append-only JSONL file of prompts the
//! checker flagged as harmful, annotated with whether the target's
//! quarantined output looked like a refusal.
//!
//! Records flow through a single writer task over an ordered queue, so
//! concurrent sessions never interleave partial lines. Failures here are
//! logged and swallowed; mining must never change what a client sees.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use gateway_core::cache::{cache_key, key_hex};
use gateway_core::refusal::is_refusal_default;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

/// Excerpt budget for the quarantined target output, in characters.
pub const EXCERPT_CHARS: usize = 2000;

/// One mined adversarial example, one JSON object per file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeRecord {
    /// Hex digest of the normalized prompt; the dedupe identity.
    pub prompt_hash: String,
    pub prompt: String,
    /// Violating fragment quoted by the checker.
    pub fragment: String,
    /// First [`EXCERPT_CHARS`] characters of the quarantined target
    /// output.
    pub target_output_excerpt: String,
    /// True when the target's own alignment did not refuse, so the
    /// prompt bypassed the target and only the checker caught it.
    pub bypassed: bool,
    /// RFC 3339 UTC timestamp of the write.
    pub recorded_at: String,
}

/// Synchronous store: dedupe set plus append-only file.
pub struct AeStore {
    path: PathBuf,
    seen: HashSet<String>,
}

impl AeStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            seen: HashSet::new(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append a record for a harmful verdict unless this run already
    /// recorded the same (normalized) prompt. Returns the record when
    /// one was written.
    pub fn record_ae(
        &mut self,
        prompt: &str,
        fragment: &str,
        quarantined_output: &str,
    ) -> std::io::Result<Option<AeRecord>> {
        let prompt_hash = key_hex(&cache_key(prompt));
        if !self.seen.insert(prompt_hash.clone()) {
            return Ok(None);
        }
        let record = AeRecord {
            prompt_hash,
            prompt: prompt.to_owned(),
            fragment: fragment.to_owned(),
            target_output_excerpt: quarantined_output.chars().take(EXCERPT_CHARS).collect(),
            bypassed: !is_refusal_default(quarantined_output),
            recorded_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        file.write_all(line.as_bytes())?;
        Ok(Some(record))
    }
}

/// Read every well-formed record back from a sink file.
pub fn read_records(path: &Path) -> std::io::Result<Vec<AeRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|line| !line.trim().is_empty())
        .filter_map(|line| serde_json::from_str(line).ok())
        .collect())
}

struct AeJob {
    prompt: String,
    fragment: String,
    quarantined_output: String,
}

/// Cheap cloneable handle that enqueues records for the writer task.
#[derive(Clone)]
pub struct AeHandle {
    tx: mpsc::UnboundedSender<AeJob>,
}

impl AeHandle {
    /// Fire-and-forget enqueue. Never blocks, never fails the caller.
    pub fn record(&self, prompt: String, fragment: String, quarantined_output: String) {
        let _ = self.tx.send(AeJob {
            prompt,
            fragment,
            quarantined_output,
        });
    }
}

/// Spawn the single writer task for a sink path. The task drains jobs in
/// order and exits when every handle is dropped.
pub fn spawn_writer(path: impl Into<PathBuf>) -> (AeHandle, JoinHandle<()>) {
    let mut store = AeStore::new(path);
    let (tx, mut rx) = mpsc::unbounded_channel::<AeJob>();
    let handle = tokio::spawn(async move {
        while let Some(job) = rx.recv().await {
            // Writes are tiny appends; doing them inline keeps ordering
            // trivial and the worker-thread stall negligible.
            if let Err(error) =
                store.record_ae(&job.prompt, &job.fragment, &job.quarantined_output)
            {
                tracing::warn!(
                    path = %store.path().display(),
                    %error,
                    "failed to append adversarial example"
                );
            }
        }
    });
    (AeHandle { tx }, handle)
}
