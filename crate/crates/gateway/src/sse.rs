//! Server-sent-events framing and the OpenAI-compatible wire shapes.
//!
//! One incremental parser serves the HTTP backend (reading upstream
//! streams) and the tests (replaying recorded frames). The wire structs
//! are shared by the client side (lenient parse) and the service side
//! (rendering responses to our own clients).

use serde::{Deserialize, Serialize};

/// One parsed item from an SSE byte stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SseItem {
    /// A complete event payload (the joined `data:` lines).
    Event(String),
    /// The literal `[DONE]` terminator used by chat-completion streams.
    Done,
}

/// Incremental SSE parser. Feed it raw bytes as they arrive; it returns
/// every event completed by that feed. Partial lines and partial events
/// are buffered across calls.
#[derive(Debug, Default)]
pub struct SseParser {
    buffer: Vec<u8>,
    data_lines: Vec<String>,
}

impl SseParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> Vec<SseItem> {
        self.buffer.extend_from_slice(bytes);
        let mut items = Vec::new();
        while let Some(newline) = self.buffer.iter().position(|&b| b == b'\n') {
            let raw: Vec<u8> = self.buffer.drain(..=newline).collect();
            let mut line = String::from_utf8_lossy(&raw[..raw.len() - 1]).into_owned();
            if line.ends_with('\r') {
                line.pop();
            }
            if line.is_empty() {
                if let Some(item) = self.dispatch() {
                    items.push(item);
                }
            } else if let Some(payload) = line.strip_prefix("data:") {
                let payload = payload.strip_prefix(' ').unwrap_or(payload);
                self.data_lines.push(payload.to_owned());
            }
            // Other SSE fields (event:, id:, retry:) and comment lines
            // starting with ':' carry nothing we need; skip them.
        }
        items
    }

    /// Flush any event left unterminated when the stream ends.
    pub fn finish(&mut self) -> Option<SseItem> {
        self.dispatch()
    }

    fn dispatch(&mut self) -> Option<SseItem> {
        if self.data_lines.is_empty() {
            return None;
        }
        let payload = self.data_lines.join("\n");
        self.data_lines.clear();
        if payload == "[DONE]" {
            Some(SseItem::Done)
        } else {
            Some(SseItem::Event(payload))
        }
    }
}

/// Render one SSE frame: `data: {payload}` plus the blank separator line.
pub fn frame(payload: &str) -> String {
    format!("data: {payload}\n\n")
}

/// The terminal frame of a chat-completion stream.
pub fn done_frame() -> String {
    frame("[DONE]")
}

// Wire shapes. Serialization order is part of the observable wire format,
// so field order here is deliberate.

/// Delta carried by one streaming chunk.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChunkDelta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StreamChoice {
    pub index: u32,
    #[serde(default)]
    pub delta: ChunkDelta,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

/// One streaming event body (`object` is `chat.completion.chunk`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChatCompletionChunk {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<StreamChoice>,
}

impl ChatCompletionChunk {
    pub fn content_delta(id: &str, created: u64, model: &str, content: &str) -> Self {
        Self {
            id: id.to_owned(),
            object: "chat.completion.chunk".to_owned(),
            created,
            model: model.to_owned(),
            choices: vec![StreamChoice {
                index: 0,
                delta: ChunkDelta {
                    role: None,
                    content: Some(content.to_owned()),
                },
                finish_reason: None,
            }],
        }
    }

    pub fn finish(id: &str, created: u64, model: &str) -> Self {
        Self {
            id: id.to_owned(),
            object: "chat.completion.chunk".to_owned(),
            created,
            model: model.to_owned(),
            choices: vec![StreamChoice {
                index: 0,
                delta: ChunkDelta::default(),
                finish_reason: Some("stop".to_owned()),
            }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MessageBody {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CompletionChoice {
    pub index: u32,
    pub message: MessageBody,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

/// Non-streaming response body (`object` is `chat.completion`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChatCompletion {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<CompletionChoice>,
}

impl ChatCompletion {
    pub fn assistant(id: &str, created: u64, model: &str, content: &str) -> Self {
        Self {
            id: id.to_owned(),
            object: "chat.completion".to_owned(),
            created,
            model: model.to_owned(),
            choices: vec![CompletionChoice {
                index: 0,
                message: MessageBody {
                    role: "assistant".to_owned(),
                    content: content.to_owned(),
                },
                finish_reason: Some("stop".to_owned()),
            }],
        }
    }

    /// Content of the first choice, the only part the gateway consumes.
    pub fn first_content(&self) -> Option<&str> {
        self.choices.first().map(|c| c.message.content.as_str())
    }
}

/// Extract the content delta from one parsed stream event, if any.
pub fn delta_content(event_json: &str) -> Result<Option<String>, serde_json::Error> {
    #[derive(Deserialize)]
    struct InChunk {
        #[serde(default)]
        choices: Vec<InChoice>,
    }
    #[derive(Deserialize)]
    struct InChoice {
        #[serde(default)]
        delta: ChunkDelta,
    }
    let chunk: InChunk = serde_json::from_str(event_json)?;
    Ok(chunk
        .choices
        .into_iter()
        .next()
        .and_then(|choice| choice.delta.content))
}
