//! Scripted, deterministic backend for tests and offline runs.
//!
//! A script is an ordered rule list. Each rule matches the request text
//! (the flat prompt for flat templates, `role: content` lines for
//! structured ones) by substring, or by glob when the pattern contains `*`
//! or `?`. The first matching rule answers; with no match the default reply
//! is used, or the request fails when no default is set.
//!
//! ```json
//! {
//!   "rules": [
//!     {"match": "*One-word reply:*", "reply": "negative"},
//!     {"match": "#torn", "replies": ["positive", "negative"], "delay_ms": 5},
//!     {"match": "overflow", "reply": "The tweet", "finish_reason": "length"},
//!     {"match": "broken", "fail": "transport"}
//!   ],
//!   "default": {"reply": "I am not sure."}
//! }
//! ```
//!
//! `replies` picks entry `seed % len`, so self-consistency paths (which use
//! consecutive seeds) see different answers while staying reproducible.
//! Reported latency is the scripted `delay_ms`, never wall time.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wildmatch::WildMatch;

use crate::inference::{FinishReason, InferenceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Transport,
    Timeout,
    RateLimited,
    BadRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<MockFailure>,
}

impl MockReply {
    pub fn text(reply: impl Into<String>) -> Self {
        MockReply {
            reply: Some(reply.into()),
            replies: Vec::new(),
            finish_reason: None,
            delay_ms: 0,
            fail: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(flatten)]
    pub reply: MockReply,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        MockRule {
            pattern: pattern.into(),
            reply: MockReply::text(reply),
        }
    }

    fn matches(&self, text: &str) -> bool {
        if self.pattern.contains(['*', '?']) {
            WildMatch::new(&self.pattern).matches(text)
        } else {
            text.contains(self.pattern.as_str())
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MockReply>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockAnswer {
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        MockScript {
            rules,
            default: None,
        }
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = Some(MockReply::text(reply));
        self
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| InferenceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
            .map_err(|e| InferenceError::Config(format!("{}: {e}", path.display())))
    }

    /// Picks the scripted answer for `text`; pure apart from the error path.
    pub fn answer(&self, text: &str, seed: u64) -> Result<MockAnswer, InferenceError> {
        let reply = self
            .rules
            .iter()
            .find(|r| r.matches(text))
            .map(|r| &r.reply)
            .or(self.default.as_ref())
            .ok_or(InferenceError::MockNoMatch)?;

        if let Some(fail) = reply.fail {
            return Err(match fail {
                MockFailure::Transport => InferenceError::Transport("scripted transport failure".into()),
                MockFailure::Timeout => InferenceError::Timeout,
                MockFailure::RateLimited => InferenceError::RateLimited,
                MockFailure::BadRequest => InferenceError::Http {
                    status: 400,
                    body: "scripted bad request".into(),
                },
            });
        }

        let content = if reply.replies.is_empty() {
            reply.reply.clone().unwrap_or_default()
        } else {
            let idx = (seed % reply.replies.len() as u64) as usize;
            reply.replies[idx].clone()
        };
        Ok(MockAnswer {
            content,
            finish_reason: reply.finish_reason.unwrap_or(FinishReason::Stop),
            latency: Duration::from_millis(reply.delay_ms),
        })
    }
}
