//! Chat templates: flattening role-tagged messages into the prompt string a
//! raw-completion backend expects.
//!
//! Templates are data. The built-in set can be replaced or extended from a
//! JSON definition file whose string values are used byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChatMessage, Role};

pub const GPT4_CORRECT: &str = "gpt4_correct";
pub const ZEPHYR: &str = "zephyr";
pub const STRUCTURED_API: &str = "structured_api";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("malformed conversation: {0}")]
    Alternation(String),
    #[error("template `{id}`: {reason}")]
    Definition { id: String, reason: String },
    #[error("cannot parse rendered prompt: {0}")]
    Parse(String),
    #[error("reading template file: {0}")]
    Io(#[from] std::io::Error),
    #[error("template file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMarker {
    pub prefix: String,
    pub suffix: String,
}

impl RoleMarker {
    fn new(prefix: &str, suffix: &str) -> Self {
        RoleMarker {
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// Flatten into a single prompt string.
    #[default]
    Flat,
    /// Forward messages to a message-native API untouched.
    Structured,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub template_id: String,
    #[serde(default)]
    pub kind: TemplateKind,
    #[serde(default)]
    pub begin_token: String,
    #[serde(default)]
    pub roles: BTreeMap<Role, RoleMarker>,
    #[serde(default)]
    pub assistant_cue: String,
}

impl ChatTemplate {
    /// `<s>GPT4 Correct System: …<|end_of_turn|>GPT4 Correct User: …<|end_of_turn|>GPT4 Correct Assistant:`
    pub fn gpt4_correct() -> Self {
        let eot = "<|end_of_turn|>";
        ChatTemplate {
            template_id: GPT4_CORRECT.into(),
            kind: TemplateKind::Flat,
            begin_token: "<s>".into(),
            roles: BTreeMap::from([
                (Role::System, RoleMarker::new("GPT4 Correct System: ", eot)),
                (Role::User, RoleMarker::new("GPT4 Correct User: ", eot)),
                (Role::Assistant, RoleMarker::new("GPT4 Correct Assistant: ", eot)),
            ]),
            assistant_cue: "GPT4 Correct Assistant:".into(),
        }
    }

    /// `<|system|>\n…</s>\n<|user|>\n…</s>\n<|assistant|>\n`
    pub fn zephyr() -> Self {
        ChatTemplate {
            template_id: ZEPHYR.into(),
            kind: TemplateKind::Flat,
            begin_token: String::new(),
            roles: BTreeMap::from([
                (Role::System, RoleMarker::new("<|system|>\n", "</s>\n")),
                (Role::User, RoleMarker::new("<|user|>\n", "</s>\n")),
                (Role::Assistant, RoleMarker::new("<|assistant|>\n", "</s>\n")),
            ]),
            assistant_cue: "<|assistant|>\n".into(),
        }
    }

    pub fn structured_api() -> Self {
        ChatTemplate {
            template_id: STRUCTURED_API.into(),
            kind: TemplateKind::Structured,
            begin_token: String::new(),
            roles: BTreeMap::new(),
            assistant_cue: String::new(),
        }
    }

    fn check(&self) -> Result<(), TemplateError> {
        let fail = |reason: &str| TemplateError::Definition {
            id: self.template_id.clone(),
            reason: reason.to_string(),
        };
        if self.template_id.trim().is_empty() {
            return Err(fail("empty template id"));
        }
        if self.kind == TemplateKind::Structured {
            return Ok(());
        }
        for role in [Role::System, Role::User, Role::Assistant] {
            let marker = self
                .roles
                .get(&role)
                .ok_or_else(|| fail(&format!("missing markers for role {role}")))?;
            if marker.prefix.is_empty() || marker.suffix.is_empty() {
                return Err(fail(&format!("empty prefix or suffix for role {role}")));
            }
        }
        if self.assistant_cue.is_empty() {
            return Err(fail("empty assistant cue"));
        }
        Ok(())
    }

    fn marker(&self, role: Role) -> &RoleMarker {
        &self.roles[&role]
    }
}

/// Result of rendering: a flat prompt, or the untouched message list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rendered {
    Flat(String),
    Messages(Vec<ChatMessage>),
}

impl Rendered {
    pub fn as_flat(&self) -> Option<&str> {
        match self {
            Rendered::Flat(s) => Some(s),
            Rendered::Messages(_) => None,
        }
    }
}

/// Checks the conversation shape every template requires: at most one
/// system message, only in first position, then strictly alternating
/// user/assistant turns that start and end with a user turn.
pub fn check_alternation(messages: &[ChatMessage]) -> Result<(), TemplateError> {
    let body = match messages.first() {
        Some(m) if m.role == Role::System => &messages[1..],
        _ => messages,
    };
    if body.is_empty() {
        return Err(TemplateError::Alternation("no user message".into()));
    }
    for (i, msg) in body.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if msg.role != expected {
            return Err(TemplateError::Alternation(format!(
                "turn {i} after the system message is {}, expected {expected}",
                msg.role
            )));
        }
    }
    if body.len() % 2 == 0 {
        return Err(TemplateError::Alternation(
            "conversation must end with a user message".into(),
        ));
    }
    Ok(())
}

pub fn render_with(template: &ChatTemplate, messages: &[ChatMessage]) -> Result<Rendered, TemplateError> {
    check_alternation(messages)?;
    match template.kind {
        TemplateKind::Structured => Ok(Rendered::Messages(messages.to_vec())),
        TemplateKind::Flat => {
            let mut out = template.begin_token.clone();
            for msg in messages {
                let marker = template.marker(msg.role);
                out.push_str(&marker.prefix);
                out.push_str(&msg.content);
                out.push_str(&marker.suffix);
            }
            out.push_str(&template.assistant_cue);
            Ok(Rendered::Flat(out))
        }
    }
}

/// Recovers the message list from a flat rendering. Exact inverse of
/// [`render_with`] for contents that contain no marker substrings.
pub fn parse_rendered(template: &ChatTemplate, rendered: &str) -> Result<Vec<ChatMessage>, TemplateError> {
    if template.kind == TemplateKind::Structured {
        return Err(TemplateError::Parse("structured templates have no flat form".into()));
    }
    let mut rest = rendered
        .strip_prefix(template.begin_token.as_str())
        .ok_or_else(|| TemplateError::Parse("missing begin token".into()))?;
    let mut messages = Vec::new();
    loop {
        if rest == template.assistant_cue {
            return Ok(messages);
        }
        let (role, after_prefix) = [Role::System, Role::User, Role::Assistant]
            .into_iter()
            .find_map(|role| {
                rest.strip_prefix(template.marker(role).prefix.as_str())
                    .map(|r| (role, r))
            })
            .ok_or_else(|| TemplateError::Parse(format!("no role marker at `{}`", preview(rest))))?;
        let suffix = &template.marker(role).suffix;
        let end = after_prefix
            .find(suffix.as_str())
            .ok_or_else(|| TemplateError::Parse(format!("unterminated {role} turn")))?;
        messages.push(ChatMessage::new(role, &after_prefix[..end]));
        rest = &after_prefix[end + suffix.len()..];
    }
}

fn preview(s: &str) -> String {
    s.chars().take(24).collect()
}

/// Template lookup table, keyed by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, ChatTemplate>,
}

#[derive(Deserialize)]
struct TemplateFile {
    templates: Vec<ChatTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let mut reg = TemplateRegistry {
            templates: BTreeMap::new(),
        };
        for t in [
            ChatTemplate::gpt4_correct(),
            ChatTemplate::zephyr(),
            ChatTemplate::structured_api(),
        ] {
            reg.templates.insert(t.template_id.clone(), t);
        }
        reg
    }

    /// Adds or replaces a template.
    pub fn insert(&mut self, template: ChatTemplate) -> Result<(), TemplateError> {
        template.check()?;
        self.templates.insert(template.template_id.clone(), template);
        Ok(())
    }

    /// Merges definitions from a JSON document `{"templates": [...]}` over
    /// the current set.
    pub fn load_json(&mut self, json: &str) -> Result<(), TemplateError> {
        let file: TemplateFile = serde_json::from_str(json)?;
        for t in file.templates {
            self.insert(t)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), TemplateError> {
        let json = std::fs::read_to_string(path)?;
        self.load_json(&json)
    }

    pub fn get(&self, template_id: &str) -> Result<&ChatTemplate, TemplateError> {
        self.templates
            .get(template_id)
            .ok_or_else(|| TemplateError::UnknownTemplate(template_id.to_string()))
    }

    pub fn contains(&self, template_id: &str) -> bool {
        self.templates.contains_key(template_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, template_id: &str, messages: &[ChatMessage]) -> Result<Rendered, TemplateError> {
        render_with(self.get(template_id)?, messages)
    }
}
