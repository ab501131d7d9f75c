//! Domain types shared by every other module.
//!
//! Types that carry invariants keep their fields private and can only be
//! built through checked constructors (or checked deserialization), so a
//! value in hand is always a valid one.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("label schema must contain at least one label")]
    EmptySchema,
    #[error("label must not be empty or whitespace")]
    EmptyLabel,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("synonym `{alias}` maps to unknown label `{target}`")]
    DanglingSynonym { alias: String, target: String },
    #[error("synonym `{0}` shadows a canonical label with a different meaning")]
    ConflictingSynonym(String),
    #[error("item id must not be empty")]
    EmptyId,
    #[error("item `{0}` has empty text")]
    EmptyText(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("temperature {0} outside [0, 1]")]
    Temperature(f64),
    #[error("max_tokens must be at least 1")]
    MaxTokens,
    #[error("invalid endpoint `{0}`")]
    Endpoint(String),
    #[error("inconsistent annotation record: {0}")]
    Record(String),
}

/// Ordered set of canonical labels plus an alias table.
///
/// Labels and aliases are lowercased and trimmed at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct LabelSchema {
    labels: Vec<String>,
    synonyms: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    synonyms: BTreeMap<String, String>,
}

impl TryFrom<RawSchema> for LabelSchema {
    type Error = ModelError;

    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        LabelSchema::new(raw.labels, raw.synonyms)
    }
}

impl From<LabelSchema> for RawSchema {
    fn from(schema: LabelSchema) -> Self {
        RawSchema {
            labels: schema.labels,
            synonyms: schema.synonyms,
        }
    }
}

impl LabelSchema {
    pub fn new<L, S>(labels: L, synonyms: S) -> Result<Self, ModelError>
    where
        L: IntoIterator,
        L::Item: AsRef<str>,
        S: IntoIterator<Item = (String, String)>,
    {
        let mut canonical: Vec<String> = Vec::new();
        for label in labels {
            let label = label.as_ref().trim().to_lowercase();
            if label.is_empty() {
                return Err(ModelError::EmptyLabel);
            }
            if canonical.contains(&label) {
                return Err(ModelError::DuplicateLabel(label));
            }
            canonical.push(label);
        }
        if canonical.is_empty() {
            return Err(ModelError::EmptySchema);
        }

        let mut table = BTreeMap::new();
        for (alias, target) in synonyms {
            let alias = alias.trim().to_lowercase();
            let target = target.trim().to_lowercase();
            if alias.is_empty() {
                return Err(ModelError::EmptyLabel);
            }
            if !canonical.contains(&target) {
                return Err(ModelError::DanglingSynonym { alias, target });
            }
            if canonical.contains(&alias) && alias != target {
                return Err(ModelError::ConflictingSynonym(alias));
            }
            if alias != target {
                table.insert(alias, target);
            }
        }

        Ok(LabelSchema {
            labels: canonical,
            synonyms: table,
        })
    }

    /// Schema without aliases.
    pub fn from_labels<L>(labels: L) -> Result<Self, ModelError>
    where
        L: IntoIterator,
        L::Item: AsRef<str>,
    {
        Self::new(labels, std::iter::empty())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn synonyms(&self) -> &BTreeMap<String, String> {
        &self.synonyms
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Position of a canonical label in schema order.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    /// Maps a label or alias (any case, surrounding whitespace ignored) to its
    /// canonical form.
    pub fn canonicalize(&self, word: &str) -> Option<&str> {
        let key = word.trim().to_lowercase();
        if let Some(idx) = self.index_of(&key) {
            return Some(&self.labels[idx]);
        }
        self.synonyms
            .get(&key)
            .and_then(|target| self.index_of(target))
            .map(|idx| self.labels[idx].as_str())
    }

    /// Returns a copy with extra aliases merged in.
    pub fn with_synonyms<S>(&self, extra: S) -> Result<Self, ModelError>
    where
        S: IntoIterator<Item = (String, String)>,
    {
        let merged = self
            .synonyms
            .clone()
            .into_iter()
            .chain(extra)
            .collect::<Vec<_>>();
        LabelSchema::new(self.labels.iter(), merged)
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabeledText {
    id: String,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
}

impl LabeledText {
    /// Builds an item, mapping `gold` (label or alias) onto its canonical form.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        gold: Option<&str>,
        schema: &LabelSchema,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let text = text.into();
        if id.trim().is_empty() {
            return Err(ModelError::EmptyId);
        }
        if text.trim().is_empty() {
            return Err(ModelError::EmptyText(id));
        }
        let gold = match gold {
            Some(g) => Some(
                schema
                    .canonicalize(g)
                    .ok_or_else(|| ModelError::UnknownLabel(g.to_string()))?
                    .to_string(),
            ),
            None => None,
        };
        Ok(LabeledText { id, text, gold })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn gold(&self) -> Option<&str> {
        self.gold.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    OneShot,
    FewShot,
    ChainOfThought,
    SelfConsistency,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::OneShot => "one_shot",
            Strategy::FewShot => "few_shot",
            Strategy::ChainOfThought => "chain_of_thought",
            Strategy::SelfConsistency => "self_consistency",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the target text sits relative to the question in a user turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrder {
    #[default]
    TextThenQuestion,
    QuestionThenText,
}

/// A worked example: context plus its completion, optionally with the
/// reasoning that leads to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl Demonstration {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Demonstration {
            text: text.into(),
            label: label.into(),
            reasoning: None,
        }
    }

    pub fn with_reasoning(mut self, reasoning: impl Into<String>) -> Self {
        self.reasoning = Some(reasoning.into());
        self
    }
}

/// Declarative description of one prompt: strategy, texts and examples.
///
/// This is plain data as loaded from a prompt-set file; run
/// [`validate_plan`] before use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub name: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_strategy: Option<Strategy>,
    pub system_prompt: String,
    pub question: String,
    /// First-phase question for chain-of-thought plans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_question: Option<String>,
    /// Overrides `question` as the chain-of-thought phase-2 message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_question: Option<String>,
    /// Inserted between text and question, e.g. `--- End of essay.`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<String>,
    #[serde(default)]
    pub order: QuestionOrder,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<u32>,
}

impl PromptPlan {
    pub fn new(name: impl Into<String>, strategy: Strategy) -> Self {
        PromptPlan {
            name: name.into(),
            strategy,
            base_strategy: None,
            system_prompt: String::new(),
            question: String::new(),
            reasoning_question: None,
            classification_question: None,
            delimiter: None,
            order: QuestionOrder::default(),
            demonstrations: Vec::new(),
            paths: None,
        }
    }

    /// The strategy that shapes the messages; self-consistency delegates to
    /// its base.
    pub fn message_strategy(&self) -> Option<Strategy> {
        match self.strategy {
            Strategy::SelfConsistency => self.base_strategy,
            s => Some(s),
        }
    }

    /// Number of sampling paths (1 unless self-consistency).
    pub fn path_count(&self) -> u32 {
        match self.strategy {
            Strategy::SelfConsistency => self.paths.unwrap_or(1),
            _ => 1,
        }
    }

    pub fn phase_two_question(&self) -> &str {
        self.classification_question
            .as_deref()
            .unwrap_or(&self.question)
    }
}

/// One broken invariant of a [`PromptPlan`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanViolation {
    pub field: &'static str,
    pub message: String,
}

impl PlanViolation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        PlanViolation {
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every plan invariant and reports all violations at once.
pub fn validate_plan(plan: &PromptPlan, schema: &LabelSchema) -> Result<(), Vec<PlanViolation>> {
    let mut out = Vec::new();

    if plan.name.trim().is_empty() {
        out.push(PlanViolation::new("name", "plan name must not be empty"));
    }
    if plan.question.trim().is_empty() {
        out.push(PlanViolation::new("question", "question must not be empty"));
    }

    let shape = match plan.strategy {
        Strategy::SelfConsistency => {
            match plan.paths {
                Some(p) if p >= 2 => {}
                Some(p) => out.push(PlanViolation::new(
                    "paths",
                    format!("self_consistency requires at least 2 paths, got {p}"),
                )),
                None => out.push(PlanViolation::new(
                    "paths",
                    "self_consistency requires a path count",
                )),
            }
            match plan.base_strategy {
                None => {
                    out.push(PlanViolation::new(
                        "base_strategy",
                        "self_consistency requires a base strategy",
                    ));
                    None
                }
                Some(Strategy::SelfConsistency) => {
                    out.push(PlanViolation::new(
                        "base_strategy",
                        "self_consistency cannot be its own base strategy",
                    ));
                    None
                }
                Some(base) => Some(base),
            }
        }
        other => {
            if plan.base_strategy.is_some() {
                out.push(PlanViolation::new(
                    "base_strategy",
                    format!("base_strategy is only valid for self_consistency, not {other}"),
                ));
            }
            if plan.paths.is_some_and(|p| p != 1) {
                out.push(PlanViolation::new(
                    "paths",
                    format!("paths is only valid for self_consistency, not {other}"),
                ));
            }
            Some(other)
        }
    };

    let demos = plan.demonstrations.len();
    match shape {
        Some(Strategy::ZeroShot) if demos != 0 => out.push(PlanViolation::new(
            "demonstrations",
            format!("zero_shot requires 0 demonstrations, got {demos}"),
        )),
        Some(Strategy::OneShot) if demos != 1 => out.push(PlanViolation::new(
            "demonstrations",
            format!("one_shot requires exactly 1 demonstration, got {demos}"),
        )),
        Some(Strategy::FewShot) if demos < 2 => out.push(PlanViolation::new(
            "demonstrations",
            format!("few_shot requires at least 2 demonstrations, got {demos}"),
        )),
        Some(Strategy::ChainOfThought) => {
            if plan
                .reasoning_question
                .as_deref()
                .is_none_or(|q| q.trim().is_empty())
            {
                out.push(PlanViolation::new(
                    "reasoning_question",
                    "chain_of_thought requires a reasoning question",
                ));
            }
            for (i, demo) in plan.demonstrations.iter().enumerate() {
                if demo.reasoning.as_deref().is_none_or(|r| r.trim().is_empty()) {
                    out.push(PlanViolation::new(
                        "demonstrations",
                        format!("chain_of_thought demonstration {i} has no reasoning"),
                    ));
                }
            }
        }
        _ => {}
    }
    if shape != Some(Strategy::ChainOfThought) {
        if plan.reasoning_question.is_some() {
            out.push(PlanViolation::new(
                "reasoning_question",
                "reasoning_question is only valid for chain_of_thought",
            ));
        }
        if plan.classification_question.is_some() {
            out.push(PlanViolation::new(
                "classification_question",
                "classification_question is only valid for chain_of_thought",
            ));
        }
    }

    for (i, demo) in plan.demonstrations.iter().enumerate() {
        if demo.text.trim().is_empty() {
            out.push(PlanViolation::new(
                "demonstrations",
                format!("demonstration {i} has empty text"),
            ));
        }
        if !schema.contains(&demo.label) {
            out.push(PlanViolation::new(
                "demonstrations",
                format!("demonstration {i} has unknown label `{}`", demo.label),
            ));
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Decoding settings sent with every request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeneration", into = "RawGeneration")]
pub struct GenerationConfig {
    temperature: f64,
    seed: u64,
    max_tokens: u32,
    reasoning_max_tokens: u32,
    timeout: Duration,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MAX_TOKENS: u32 = 16;
pub const DEFAULT_REASONING_MAX_TOKENS: u32 = 256;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Serialize, Deserialize)]
struct RawGeneration {
    #[serde(default = "default_temperature")]
    temperature: f64,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_max_tokens")]
    max_tokens: u32,
    #[serde(default = "default_reasoning_max_tokens")]
    reasoning_max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    timeout_secs: f64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}
fn default_reasoning_max_tokens() -> u32 {
    DEFAULT_REASONING_MAX_TOKENS
}
fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

impl TryFrom<RawGeneration> for GenerationConfig {
    type Error = ModelError;

    fn try_from(raw: RawGeneration) -> Result<Self, Self::Error> {
        let timeout = Duration::try_from_secs_f64(raw.timeout_secs).unwrap_or(DEFAULT_TIMEOUT);
        GenerationConfig::new(raw.temperature, raw.seed)?
            .with_max_tokens(raw.max_tokens)?
            .with_reasoning_max_tokens(raw.reasoning_max_tokens)
            .map(|g| g.with_timeout(timeout))
    }
}

impl From<GenerationConfig> for RawGeneration {
    fn from(g: GenerationConfig) -> Self {
        RawGeneration {
            temperature: g.temperature,
            seed: g.seed,
            max_tokens: g.max_tokens,
            reasoning_max_tokens: g.reasoning_max_tokens,
            timeout_secs: g.timeout.as_secs_f64(),
        }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: DEFAULT_TEMPERATURE,
            seed: DEFAULT_SEED,
            max_tokens: DEFAULT_MAX_TOKENS,
            reasoning_max_tokens: DEFAULT_REASONING_MAX_TOKENS,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl GenerationConfig {
    pub fn new(temperature: f64, seed: u64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&temperature) {
            return Err(ModelError::Temperature(temperature));
        }
        Ok(GenerationConfig {
            temperature,
            seed,
            ..Default::default()
        })
    }

    pub fn with_temperature(self, temperature: f64) -> Result<Self, ModelError> {
        let checked = GenerationConfig::new(temperature, self.seed)?;
        Ok(GenerationConfig {
            temperature: checked.temperature,
            ..self
        })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        GenerationConfig { seed, ..self }
    }

    pub fn with_max_tokens(self, max_tokens: u32) -> Result<Self, ModelError> {
        if max_tokens == 0 {
            return Err(ModelError::MaxTokens);
        }
        Ok(GenerationConfig { max_tokens, ..self })
    }

    pub fn with_reasoning_max_tokens(self, reasoning_max_tokens: u32) -> Result<Self, ModelError> {
        if reasoning_max_tokens == 0 {
            return Err(ModelError::MaxTokens);
        }
        Ok(GenerationConfig {
            reasoning_max_tokens,
            ..self
        })
    }

    pub fn with_timeout(self, timeout: Duration) -> Self {
        GenerationConfig { timeout, ..self }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    pub fn reasoning_max_tokens(&self) -> u32 {
        self.reasoning_max_tokens
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}

/// Where requests for a model go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Http(url::Url),
    /// Scripted in-process backend, `mock:<script-id>`.
    Mock(String),
}

impl std::str::FromStr for Endpoint {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(id) = s.strip_prefix("mock:") {
            if id.is_empty() {
                return Err(ModelError::Endpoint(s.to_string()));
            }
            return Ok(Endpoint::Mock(id.to_string()));
        }
        url::Url::parse(s)
            .ok()
            .filter(|u| matches!(u.scheme(), "http" | "https"))
            .map(Endpoint::Http)
            .ok_or_else(|| ModelError::Endpoint(s.to_string()))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Http(url) => write!(f, "{url}"),
            Endpoint::Mock(id) => write!(f, "mock:{id}"),
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A model under test: name sent on the wire, chat template and endpoint.
///
/// `template_id` is checked against the template registry when the client
/// executes a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_name: String,
    pub template_id: String,
    pub endpoint: Endpoint,
    #[serde(default)]
    pub generation: GenerationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    Ok,
    TieBroken,
    Unparsed,
}

impl AnnotationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationStatus::Ok => "ok",
            AnnotationStatus::TieBroken => "tie_broken",
            AnnotationStatus::Unparsed => "unparsed",
        }
    }
}

/// Per-item outcome of one (prompt, model) cell, one JSONL line on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct AnnotationRecord {
    item_id: String,
    prompt: String,
    model: String,
    seed: u64,
    predicted: Option<String>,
    status: AnnotationStatus,
    votes: BTreeMap<String, u32>,
    raw_replies: Vec<String>,
    reasoning: Vec<String>,
    errors: Vec<String>,
    flags: Vec<String>,
    transcript_digest: String,
    latency_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    item_id: String,
    prompt: String,
    model: String,
    seed: u64,
    predicted: Option<String>,
    status: AnnotationStatus,
    votes: BTreeMap<String, u32>,
    raw_replies: Vec<String>,
    #[serde(default)]
    reasoning: Vec<String>,
    #[serde(default)]
    errors: Vec<String>,
    #[serde(default)]
    flags: Vec<String>,
    transcript_digest: String,
    latency_ms: u64,
}

impl TryFrom<RawRecord> for AnnotationRecord {
    type Error = ModelError;

    fn try_from(r: RawRecord) -> Result<Self, Self::Error> {
        let record = AnnotationRecord {
            item_id: r.item_id,
            prompt: r.prompt,
            model: r.model,
            seed: r.seed,
            predicted: r.predicted,
            status: r.status,
            votes: r.votes,
            raw_replies: r.raw_replies,
            reasoning: r.reasoning,
            errors: r.errors,
            flags: r.flags,
            transcript_digest: r.transcript_digest,
            latency_ms: r.latency_ms,
        };
        record.check()?;
        Ok(record)
    }
}

impl From<AnnotationRecord> for RawRecord {
    fn from(r: AnnotationRecord) -> Self {
        RawRecord {
            item_id: r.item_id,
            prompt: r.prompt,
            model: r.model,
            seed: r.seed,
            predicted: r.predicted,
            status: r.status,
            votes: r.votes,
            raw_replies: r.raw_replies,
            reasoning: r.reasoning,
            errors: r.errors,
            flags: r.flags,
            transcript_digest: r.transcript_digest,
            latency_ms: r.latency_ms,
        }
    }
}

/// Fields of an [`AnnotationRecord`] before the consistency check.
#[derive(Debug, Clone, Default)]
pub struct RecordParts {
    pub item_id: String,
    pub prompt: String,
    pub model: String,
    pub seed: u64,
    pub predicted: Option<String>,
    pub status: Option<AnnotationStatus>,
    pub votes: BTreeMap<String, u32>,
    pub raw_replies: Vec<String>,
    pub reasoning: Vec<String>,
    pub errors: Vec<String>,
    pub flags: Vec<String>,
    pub transcript_digest: String,
    pub latency_ms: u64,
}

impl AnnotationRecord {
    pub fn new(parts: RecordParts) -> Result<Self, ModelError> {
        RawRecord {
            item_id: parts.item_id,
            prompt: parts.prompt,
            model: parts.model,
            seed: parts.seed,
            predicted: parts.predicted,
            status: parts
                .status
                .ok_or_else(|| ModelError::Record("missing status".into()))?,
            votes: parts.votes,
            raw_replies: parts.raw_replies,
            reasoning: parts.reasoning,
            errors: parts.errors,
            flags: parts.flags,
            transcript_digest: parts.transcript_digest,
            latency_ms: parts.latency_ms,
        }
        .try_into()
    }

    fn check(&self) -> Result<(), ModelError> {
        match (self.status, &self.predicted) {
            (AnnotationStatus::Unparsed, Some(_)) => {
                return Err(ModelError::Record("unparsed record carries a label".into()))
            }
            (AnnotationStatus::Ok | AnnotationStatus::TieBroken, None) => {
                return Err(ModelError::Record("parsed record lacks a label".into()))
            }
            _ => {}
        }
        let cast: u64 = self.votes.values().map(|&v| u64::from(v)).sum();
        if cast > self.raw_replies.len() as u64 {
            return Err(ModelError::Record(format!(
                "{cast} votes from {} replies",
                self.raw_replies.len()
            )));
        }
        Ok(())
    }

    pub fn item_id(&self) -> &str {
        &self.item_id
    }
    pub fn prompt(&self) -> &str {
        &self.prompt
    }
    pub fn model(&self) -> &str {
        &self.model
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn predicted(&self) -> Option<&str> {
        self.predicted.as_deref()
    }
    pub fn status(&self) -> AnnotationStatus {
        self.status
    }
    pub fn votes(&self) -> &BTreeMap<String, u32> {
        &self.votes
    }
    pub fn raw_replies(&self) -> &[String] {
        &self.raw_replies
    }
    pub fn reasoning(&self) -> &[String] {
        &self.reasoning
    }
    pub fn errors(&self) -> &[String] {
        &self.errors
    }
    pub fn flags(&self) -> &[String] {
        &self.flags
    }
    pub fn transcript_digest(&self) -> &str {
        &self.transcript_digest
    }
    pub fn latency_ms(&self) -> u64 {
        self.latency_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentiment() -> LabelSchema {
        LabelSchema::from_labels(["negative", "neutral", "positive"]).unwrap()
    }

    fn yes_no() -> LabelSchema {
        LabelSchema::from_labels(["yes", "no"]).unwrap()
    }

    #[test]
    fn schema_lowercases_and_rejects_bad_input() {
        let s = LabelSchema::new(
            ["Positive", " NEGATIVE "],
            [("Pos".to_string(), "positive".to_string())],
        )
        .unwrap();
        assert_eq!(s.labels(), ["positive", "negative"]);
        assert_eq!(s.canonicalize("POS"), Some("positive"));
        assert_eq!(s.canonicalize("negative"), Some("negative"));
        assert_eq!(s.canonicalize("maybe"), None);

        assert_eq!(
            LabelSchema::from_labels(Vec::<String>::new()),
            Err(ModelError::EmptySchema)
        );
        assert_eq!(
            LabelSchema::from_labels(["a", "A"]),
            Err(ModelError::DuplicateLabel("a".into()))
        );
        assert_eq!(LabelSchema::from_labels(["  "]), Err(ModelError::EmptyLabel));
        assert!(matches!(
            LabelSchema::new(["yes"], [("y".to_string(), "maybe".to_string())]),
            Err(ModelError::DanglingSynonym { .. })
        ));
    }

    #[test]
    fn schema_deserialization_is_checked() {
        let err = serde_json::from_str::<LabelSchema>(r#"{"labels": ["a", "a"]}"#);
        assert!(err.is_err());
        let ok: LabelSchema =
            serde_json::from_str(r#"{"labels": ["Yes", "no"], "synonyms": {"nope": "no"}}"#)
                .unwrap();
        assert_eq!(ok.canonicalize("nope"), Some("no"));
    }

    #[test]
    fn labeled_text_invariants() {
        let s = yes_no();
        let item = LabeledText::new("e1", "I will row.", Some("YES"), &s).unwrap();
        assert_eq!(item.gold(), Some("yes"));
        assert_eq!(
            LabeledText::new("e2", "   ", None, &s),
            Err(ModelError::EmptyText("e2".into()))
        );
        assert_eq!(
            LabeledText::new("e3", "text", Some("maybe"), &s),
            Err(ModelError::UnknownLabel("maybe".into()))
        );
    }

    #[test]
    fn zero_shot_with_demo_is_rejected() {
        let mut plan = PromptPlan::new("z", Strategy::ZeroShot);
        plan.question = "Q?".into();
        plan.demonstrations.push(Demonstration::new("t", "positive"));
        let errs = validate_plan(&plan, &sentiment()).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0]
            .message
            .contains("zero_shot requires 0 demonstrations"));
    }

    #[test]
    fn self_consistency_with_five_paths_is_valid() {
        let mut plan = PromptPlan::new("sc", Strategy::SelfConsistency);
        plan.question = "Q?".into();
        plan.base_strategy = Some(Strategy::FewShot);
        plan.paths = Some(5);
        plan.demonstrations = vec![
            Demonstration::new("a", "positive"),
            Demonstration::new("b", "negative"),
            Demonstration::new("c", "neutral"),
        ];
        assert_eq!(validate_plan(&plan, &sentiment()), Ok(()));
    }

    #[test]
    fn one_shot_unknown_label() {
        let mut plan = PromptPlan::new("o", Strategy::OneShot);
        plan.question = "Q?".into();
        plan.demonstrations.push(Demonstration::new("t", "maybe"));
        let errs = validate_plan(&plan, &yes_no()).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.contains("unknown label"));
    }

    #[test]
    fn validation_reports_every_violation() {
        let mut plan = PromptPlan::new("", Strategy::SelfConsistency);
        plan.paths = Some(1);
        plan.demonstrations.push(Demonstration::new("", "maybe"));
        let errs = validate_plan(&plan, &yes_no()).unwrap_err();
        let fields: Vec<_> = errs.iter().map(|v| v.field).collect();
        for expected in ["name", "question", "paths", "base_strategy", "demonstrations"] {
            assert!(fields.contains(&expected), "missing {expected}: {errs:?}");
        }
    }

    #[test]
    fn cot_demos_need_reasoning() {
        let mut plan = PromptPlan::new("c", Strategy::ChainOfThought);
        plan.question = "Final?".into();
        plan.reasoning_question = Some("Think:".into());
        plan.demonstrations = vec![
            Demonstration::new("a", "yes").with_reasoning("because"),
            Demonstration::new("b", "no"),
        ];
        let errs = validate_plan(&plan, &yes_no()).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.contains("demonstration 1 has no reasoning"));
    }

    #[test]
    fn generation_config_bounds() {
        assert!(GenerationConfig::new(0.2, 1).is_ok());
        assert!(GenerationConfig::new(0.0, 1).is_ok());
        assert!(GenerationConfig::new(1.0, 1).is_ok());
        assert_eq!(
            GenerationConfig::new(1.5, 1),
            Err(ModelError::Temperature(1.5))
        );
        assert!(GenerationConfig::new(-0.1, 1).is_err());
        assert!(GenerationConfig::new(f64::NAN, 1).is_err());
        assert_eq!(
            GenerationConfig::default().with_max_tokens(0),
            Err(ModelError::MaxTokens)
        );
        let bad = serde_json::from_str::<GenerationConfig>(r#"{"temperature": 1.2}"#);
        assert!(bad.is_err());
        let g: GenerationConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(g.temperature(), 0.2);
        assert_eq!(g.max_tokens(), 16);
        assert_eq!(g.reasoning_max_tokens(), 256);
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "mock:tweets".parse::<Endpoint>(),
            Ok(Endpoint::Mock("tweets".into()))
        );
        assert!(matches!(
            "http://localhost:8080/v1/chat/completions".parse::<Endpoint>(),
            Ok(Endpoint::Http(_))
        ));
        assert!("mock:".parse::<Endpoint>().is_err());
        assert!("ftp://x".parse::<Endpoint>().is_err());
    }

    #[test]
    fn record_status_label_consistency() {
        let parts = RecordParts {
            item_id: "1".into(),
            status: Some(AnnotationStatus::Unparsed),
            predicted: Some("yes".into()),
            raw_replies: vec!["yes".into()],
            ..Default::default()
        };
        assert!(AnnotationRecord::new(parts.clone()).is_err());

        let ok = AnnotationRecord::new(RecordParts {
            status: Some(AnnotationStatus::Ok),
            votes: [("yes".to_string(), 1)].into(),
            ..parts.clone()
        })
        .unwrap();
        let line = serde_json::to_string(&ok).unwrap();
        let back: AnnotationRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, ok);

        let too_many_votes = RecordParts {
            status: Some(AnnotationStatus::Ok),
            votes: [("yes".to_string(), 2)].into(),
            ..parts
        };
        assert!(AnnotationRecord::new(too_many_votes).is_err());
    }
}
