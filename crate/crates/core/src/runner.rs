//! Prompt × model grid: per-item annotation, JSONL record files, per-cell
//! reports, summaries and crash resume.
//!
//! Output layout under the grid's output directory:
//!
//! ```text
//! records/<prompt>__<model>.jsonl   one AnnotationRecord per corpus item
//! reports/<prompt>__<model>.json    ClassificationReport
//! reports/<prompt>__<model>.txt     same report as an aligned table
//! summary.csv                       one row per cell, failed cells included
//! best_per_prompt.csv / .txt        best model per prompt by kappa
//! run_manifest.json                 timestamps, hostname, wall times
//! ```
//!
//! Everything except the manifest is a pure function of the spec, corpus
//! and backend replies.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Format};
use crate::inference::{sha256_hex, FinishReason, InferenceClient, InferenceError, SeedMode};
use crate::metrics::{classification_report, fmt2, ClassificationReport, MetricsError, UnparsedPolicy};
use crate::mock::MockScript;
use crate::model::{
    validate_plan, AnnotationRecord, AnnotationStatus, ChatMessage, LabelSchema,
    LabeledText, ModelError, ModelProfile, PromptPlan, RecordParts,
};
use crate::normalize::{majority_vote, normalize, ParseOutcome, ParseReason};
use crate::prompt::build_messages;
use crate::template::{TemplateError, TemplateRegistry};

/// Appended after an unparseable reply when reparse retries are enabled.
pub const REPARSE_NUDGE: &str = "One-word reply:";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid grid spec: {0}")]
    Spec(String),
    /// Records and corpus do not line up.
    #[error("records do not match the corpus: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] InferenceError),
}

impl RunnerError {
    /// Process exit code: 3 for backend failures, 2 for bad input data.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Backend(_) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| RunnerError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// A task's label schema and its ordered prompt catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub task: String,
    pub schema: LabelSchema,
    pub prompts: Vec<PromptPlan>,
}

impl PromptSet {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let set: PromptSet = read_json(path)?;
        set.validate()?;
        Ok(set)
    }

    /// Unique prompt names and every plan valid against the schema.
    pub fn validate(&self) -> Result<(), RunnerError> {
        let mut seen = HashSet::new();
        for plan in &self.prompts {
            if !seen.insert(plan.name.as_str()) {
                return Err(RunnerError::Spec(format!("duplicate prompt name `{}`", plan.name)));
            }
            validate_plan(plan, &self.schema).map_err(|violations| {
                let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                RunnerError::Spec(format!("prompt `{}`: {}", plan.name, list.join("; ")))
            })?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&PromptPlan> {
        self.prompts.iter().find(|p| p.name == name)
    }
}

/// Per-run knobs shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Cap on concurrent backend requests; also bounds items in flight.
    pub max_inflight: usize,
    /// Reuse the base seed on every self-consistency path.
    pub identical_seeds: bool,
    /// Re-queries with [`REPARSE_NUDGE`] after an unparseable reply.
    pub reparse_retry: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_inflight: crate::inference::DEFAULT_MAX_INFLIGHT,
            identical_seeds: false,
            reparse_retry: 0,
        }
    }
}

impl RunOptions {
    pub fn seed_mode(&self) -> SeedMode {
        if self.identical_seeds {
            SeedMode::Identical
        } else {
            SeedMode::Offset
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    corpus: PathBuf,
    #[serde(default)]
    corpus_format: Option<Format>,
    prompt_set: PathBuf,
    /// Subset of prompt names to run, in this order.
    #[serde(default)]
    prompts: Option<Vec<String>>,
    models: Vec<ModelProfile>,
    #[serde(default)]
    unparsed_policy: UnparsedPolicy,
    output_dir: PathBuf,
    #[serde(default)]
    base_seed: Option<u64>,
    #[serde(default)]
    run: RunOptions,
    #[serde(default)]
    templates: Option<PathBuf>,
    #[serde(default)]
    mock_scripts: BTreeMap<String, PathBuf>,
}

/// A fully resolved grid: every path absolute or relative to the working
/// directory, prompts and models in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub corpus_path: PathBuf,
    pub corpus_format: Format,
    pub schema: LabelSchema,
    pub prompts: Vec<PromptPlan>,
    pub models: Vec<ModelProfile>,
    pub unparsed_policy: UnparsedPolicy,
    pub output_dir: PathBuf,
    /// Overrides every model's seed when set.
    pub base_seed: Option<u64>,
    pub options: RunOptions,
    pub templates: Option<PathBuf>,
    pub mock_scripts: BTreeMap<String, PathBuf>,
}

impl GridSpec {
    /// Reads a grid file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let file: GridFile = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let set = PromptSet::load(&resolve(&file.prompt_set))?;
        let prompts = match &file.prompts {
            None => set.prompts.clone(),
            Some(names) => names
                .iter()
                .map(|n| {
                    set.get(n)
                        .cloned()
                        .ok_or_else(|| RunnerError::Spec(format!("unknown prompt `{n}`")))
                })
                .collect::<Result<_, _>>()?,
        };
        let corpus_path = resolve(&file.corpus);
        let corpus_format = match file.corpus_format {
            Some(f) => f,
            None => Format::from_path(&corpus_path)?,
        };
        let spec = GridSpec {
            corpus_path,
            corpus_format,
            schema: set.schema,
            prompts,
            models: file.models,
            unparsed_policy: file.unparsed_policy,
            output_dir: resolve(&file.output_dir),
            base_seed: file.base_seed,
            options: file.run,
            templates: file.templates.as_deref().map(resolve),
            mock_scripts: file
                .mock_scripts
                .iter()
                .map(|(id, p)| (id.clone(), resolve(p)))
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.prompts.is_empty() || self.models.is_empty() {
            return Err(RunnerError::Spec("grid needs at least one prompt and one model".into()));
        }
        let mut names = HashSet::new();
        for plan in &self.prompts {
            if !names.insert(plan.name.as_str()) {
                return Err(RunnerError::Spec(format!("duplicate prompt name `{}`", plan.name)));
            }
            validate_plan(plan, &self.schema).map_err(|v| {
                RunnerError::Spec(format!("prompt `{}`: {}", plan.name, v[0]))
            })?;
        }
        let mut models = HashSet::new();
        for m in &self.models {
            if !models.insert(m.model_name.as_str()) {
                return Err(RunnerError::Spec(format!("duplicate model name `{}`", m.model_name)));
            }
        }
        let mut stems = HashSet::new();
        for p in &self.prompts {
            for m in &self.models {
                if !stems.insert(cell_stem(&p.name, &m.model_name)) {
                    return Err(RunnerError::Spec(format!(
                        "cell ({}, {}) collides with another cell's file name",
                        p.name, m.model_name
                    )));
                }
            }
        }
        if self.options.max_inflight == 0 {
            return Err(RunnerError::Spec("max_inflight must be at least 1".into()));
        }
        Ok(())
    }

    /// Model profiles as they are run (base seed applied).
    pub fn profiles(&self) -> Vec<ModelProfile> {
        self.models
            .iter()
            .map(|m| {
                let mut m = m.clone();
                if let Some(seed) = self.base_seed {
                    m.generation = m.generation.with_seed(seed);
                }
                m
            })
            .collect()
    }

    pub fn load_corpus(&self) -> Result<Vec<LabeledText>, RunnerError> {
        Ok(corpus::ingest(&self.corpus_path, self.corpus_format, &self.schema)?)
    }

    /// Client with the spec's templates, mock scripts and in-flight cap.
    pub fn build_client(&self, api_key_env: &str) -> Result<InferenceClient, RunnerError> {
        let mut templates = TemplateRegistry::builtin();
        if let Some(path) = &self.templates {
            templates.load_file(path)?;
        }
        for m in &self.models {
            templates.get(&m.template_id)?;
        }
        let mut builder = InferenceClient::builder()
            .templates(templates)
            .max_inflight(self.options.max_inflight)
            .api_key_from_env(api_key_env);
        for (id, path) in &self.mock_scripts {
            builder = builder.mock(id.clone(), MockScript::load(path)?);
        }
        Ok(builder.build()?)
    }
}

/// File stem for a cell; characters outside `[A-Za-z0-9._-]` become `_`.
pub fn cell_stem(prompt: &str, model: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
            .collect()
    };
    format!("{}__{}", clean(prompt), clean(model))
}

/// Annotates one item: runs every path, parses, votes and assembles the
/// record. Only errors that would recur for every item are returned; the
/// rest are recorded on the item, which is then unparsed if no path
/// produced a label.
pub async fn annotate_item(
    client: &InferenceClient,
    plan: &PromptPlan,
    profile: &ModelProfile,
    schema: &LabelSchema,
    options: &RunOptions,
    item: &LabeledText,
) -> Result<AnnotationRecord, InferenceError> {
    let script = build_messages(plan, item.text()).map_err(|e| InferenceError::Config(e.to_string()))?;
    let outcomes = client
        .run_paths(profile, &script, plan.path_count(), options.seed_mode())
        .await;

    let mut digests = Vec::new();
    let mut replies = Vec::new();
    let mut reasoning = Vec::new();
    let mut errors = Vec::new();
    let mut flags = BTreeSet::new();
    let mut parsed = Vec::with_capacity(outcomes.len());
    let mut latency = Duration::ZERO;

    for (i, out) in outcomes.into_iter().enumerate() {
        digests.extend(out.request_digests.iter().cloned());
        if let Some(r) = &out.reasoning {
            reasoning.push(r.clone());
        }
        if out.empty_reasoning {
            flags.insert("empty_reasoning");
        }
        if let Some(e) = out.error {
            if e.is_fatal() {
                return Err(e);
            }
            if matches!(e, InferenceError::ReasoningTruncated) {
                flags.insert("reasoning_truncated");
            }
            errors.push(format!("path {i}: {e}"));
            parsed.push(ParseOutcome::no_reply());
            continue;
        }

        latency += out.result.latency;
        if out.result.finish_reason == FinishReason::Length {
            flags.insert("truncated");
        }
        let mut last = out.result.content;
        let mut outcome = normalize(&last, schema);
        replies.push(last.clone());

        let mut convo = out.final_messages;
        for _ in 0..options.reparse_retry {
            if outcome.label.is_some() {
                break;
            }
            flags.insert("reparse_retry");
            convo.push(ChatMessage::assistant(last.as_str()));
            convo.push(ChatMessage::user(REPARSE_NUDGE));
            match client
                .complete_with(profile, &convo, out.seed, profile.generation.max_tokens())
                .await
            {
                Ok(res) => {
                    digests.push(res.request_digest);
                    latency += res.latency;
                    outcome = normalize(&res.content, schema);
                    replies.push(res.content.clone());
                    last = res.content;
                }
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => {
                    errors.push(format!("path {i} reparse: {e}"));
                    break;
                }
            }
        }
        if outcome.reason == ParseReason::Ambiguous {
            flags.insert("ambiguous");
        }
        parsed.push(outcome);
    }

    let vote = majority_vote(&parsed, schema);
    let digest_input = serde_json::to_vec(&(&digests, &reasoning, &replies))
        .map_err(|e| InferenceError::Config(e.to_string()))?;
    AnnotationRecord::new(RecordParts {
        item_id: item.id().to_string(),
        prompt: plan.name.clone(),
        model: profile.model_name.clone(),
        seed: profile.generation.seed(),
        predicted: vote.label,
        status: Some(vote.status),
        votes: vote.votes,
        raw_replies: replies,
        reasoning,
        errors,
        flags: flags.into_iter().map(str::to_string).collect(),
        transcript_digest: sha256_hex(&digest_input),
        latency_ms: latency.as_millis() as u64,
    })
    .map_err(|e| InferenceError::Config(e.to_string()))
}

/// Reads a record file strictly; any malformed line is an error.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunnerError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Longest prefix of an existing record file that matches the cell: one
/// well-formed, newline-terminated record per corpus item in corpus order,
/// with matching prompt, model and seed and a well-formed transcript digest.
/// Anything after the first mismatch (a torn final line after a crash, a
/// stale run) is discarded.
pub fn resumable_prefix(
    path: &Path,
    corpus: &[LabeledText],
    plan: &PromptPlan,
    profile: &ModelProfile,
) -> Result<(Vec<AnnotationRecord>, usize), RunnerError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    let mut kept = 0;
    let mut rest = &bytes[..];
    while let Some(end) = rest.iter().position(|&b| b == b'\n') {
        let line = &rest[..end];
        let Some(item) = corpus.get(records.len()) else { break };
        let Ok(record) = serde_json::from_slice::<AnnotationRecord>(line) else { break };
        let matches = record.item_id() == item.id()
            && record.prompt() == plan.name
            && record.model() == profile.model_name
            && record.seed() == profile.generation.seed()
            && is_digest(record.transcript_digest());
        if !matches {
            break;
        }
        records.push(record);
        kept += end + 1;
        rest = &rest[end + 1..];
    }
    Ok((records, kept))
}

// Items with identical text share a digest, so uniqueness is not required;
// corpus order of item ids already rules out duplicated lines.
fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

/// Result of annotating every item of one (prompt, model) cell.
#[derive(Debug)]
pub struct CellRun {
    pub records: Vec<AnnotationRecord>,
    /// Items taken from an earlier, interrupted run.
    pub resumed: usize,
}

/// Annotates the corpus for one cell, appending records to `record_path`
/// in corpus order and resuming from any valid prefix already there.
pub async fn run_cell(
    client: &InferenceClient,
    plan: &PromptPlan,
    profile: &ModelProfile,
    schema: &LabelSchema,
    corpus: &[LabeledText],
    record_path: &Path,
    options: &RunOptions,
) -> Result<CellRun, RunnerError> {
    if let Some(dir) = record_path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let (mut records, kept) = resumable_prefix(record_path, corpus, plan, profile)?;
    let resumed = records.len();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(record_path)
        .map_err(io_err(record_path))?;
    file.set_len(kept as u64).map_err(io_err(record_path))?;
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(record_path)
        .map_err(io_err(record_path))?;
    if resumed > 0 {
        tracing::info!(cell = %cell_stem(&plan.name, &profile.model_name), resumed, "resuming");
    }

    let mut pending = futures::stream::iter(&corpus[resumed..])
        .map(|item| annotate_item(client, plan, profile, schema, options, item))
        .buffered(options.max_inflight.max(1));
    while let Some(result) = pending.next().await {
        let record = result?;
        let mut line = serde_json::to_string(&record).map_err(|source| RunnerError::Json {
            path: record_path.to_path_buf(),
            source,
        })?;
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(record_path))?;
        records.push(record);
    }
    file.flush().map_err(io_err(record_path))?;
    Ok(CellRun { records, resumed })
}

/// Scores records against the corpus gold labels, joining on item id.
pub fn evaluate(
    records: &[AnnotationRecord],
    corpus: &[LabeledText],
    schema: &LabelSchema,
    policy: UnparsedPolicy,
) -> Result<ClassificationReport, RunnerError> {
    let mut by_id: BTreeMap<&str, &AnnotationRecord> = BTreeMap::new();
    for r in records {
        if by_id.insert(r.item_id(), r).is_some() {
            return Err(RunnerError::Mismatch(format!("duplicate record for item `{}`", r.item_id())));
        }
    }
    let mut gold = Vec::with_capacity(corpus.len());
    let mut predicted = Vec::with_capacity(corpus.len());
    for item in corpus {
        let g = item
            .gold()
            .ok_or_else(|| CorpusError::MissingGold(item.id().to_string()))?;
        let r = by_id
            .remove(item.id())
            .ok_or_else(|| RunnerError::Mismatch(format!("no record for item `{}`", item.id())))?;
        gold.push(g);
        predicted.push(r.predicted());
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(RunnerError::Mismatch(format!("record for unknown item `{extra}`")));
    }
    Ok(classification_report(&gold, &predicted, schema, policy)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusCounts {
    pub ok: usize,
    pub tie_broken: usize,
    pub unparsed: usize,
}

impl StatusCounts {
    pub fn of(records: &[AnnotationRecord]) -> Self {
        let count = |s| records.iter().filter(|r| r.status() == s).count();
        StatusCounts {
            ok: count(AnnotationStatus::Ok),
            tie_broken: count(AnnotationStatus::TieBroken),
            unparsed: count(AnnotationStatus::Unparsed),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCellResult {
    pub prompt: String,
    pub model: String,
    /// Absent when the cell failed.
    pub report: Option<ClassificationReport>,
    pub record_path: PathBuf,
    #[serde(skip)]
    pub wall_time: Duration,
    pub statuses: Option<StatusCounts>,
    pub resumed: usize,
    pub error: Option<String>,
    /// Error category of a failed cell (`backend` or `data`).
    pub error_kind: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestRow {
    pub prompt: String,
    pub model: String,
    pub kappa: f64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
}

/// Best model per prompt: highest kappa, then accuracy, then earliest in
/// model order. Prompts appear in first-seen order; failed cells are skipped.
pub fn best_per_prompt(results: &[GridCellResult]) -> Vec<BestRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut best: BTreeMap<&str, (&GridCellResult, &ClassificationReport)> = BTreeMap::new();
    for cell in results {
        let Some(report) = &cell.report else { continue };
        if !order.contains(&cell.prompt.as_str()) {
            order.push(&cell.prompt);
        }
        let better = match best.get(cell.prompt.as_str()) {
            None => true,
            Some((_, cur)) => {
                report.kappa > cur.kappa || (report.kappa == cur.kappa && report.accuracy > cur.accuracy)
            }
        };
        if better {
            best.insert(&cell.prompt, (cell, report));
        }
    }
    order
        .into_iter()
        .map(|p| {
            let (cell, r) = best[p];
            BestRow {
                prompt: cell.prompt.clone(),
                model: cell.model.clone(),
                kappa: r.kappa,
                accuracy: r.accuracy,
                weighted_f1: r.weighted_f1,
                macro_f1: r.macro_f1,
            }
        })
        .collect()
}

pub fn best_csv(rows: &[BestRow]) -> Result<String, RunnerError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["prompt", "model", "kappa", "accuracy", "weighted_f1", "macro_f1"])?;
    for r in rows {
        w.write_record([
            r.prompt.clone(),
            r.model.clone(),
            format!("{:.4}", r.kappa),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.weighted_f1),
            format!("{:.4}", r.macro_f1),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn best_text(rows: &[BestRow]) -> String {
    let pw = rows.iter().map(|r| r.prompt.len()).max().unwrap_or(0).max(6);
    let mw = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(10);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:pw$}  {:mw$}  {:>5}  {:>8}  {:>11}  {:>8}",
        "Prompt", "Best model", "Kappa", "Accuracy", "Weighted F1", "Macro F1"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:pw$}  {:mw$}  {:>5}  {:>8}  {:>11}  {:>8}",
            r.prompt,
            r.model,
            fmt2(r.kappa),
            fmt2(r.accuracy),
            fmt2(r.weighted_f1),
            fmt2(r.macro_f1)
        );
    }
    out
}

pub fn summary_csv(results: &[GridCellResult]) -> Result<String, RunnerError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "prompt",
        "model",
        "status",
        "n",
        "accuracy",
        "macro_precision",
        "macro_recall",
        "macro_f1",
        "weighted_f1",
        "kappa",
        "kappa_band",
        "ok",
        "tie_broken",
        "unparsed",
        "error",
    ])?;
    for c in results {
        let mut row = vec![c.prompt.clone(), c.model.clone()];
        match &c.report {
            Some(r) => {
                row.push("ok".into());
                row.push(r.n.to_string());
                for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1, r.weighted_f1, r.kappa] {
                    row.push(format!("{v:.4}"));
                }
                row.push(r.kappa_band.to_string());
            }
            None => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 8));
            }
        }
        match &c.statuses {
            Some(s) => row.extend([s.ok, s.tie_broken, s.unparsed].map(|n| n.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 3)),
        }
        row.push(c.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunnerError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

pub fn write_report(dir: &Path, stem: &str, report: &ClassificationReport) -> Result<(), RunnerError> {
    let json = serde_json::to_string_pretty(report).map_err(|source| RunnerError::Json {
        path: dir.join(format!("{stem}.json")),
        source,
    })?;
    write_file(&dir.join(format!("{stem}.json")), &(json + "\n"))?;
    write_file(&dir.join(format!("{stem}.txt")), &report.to_text())
}

#[derive(Debug)]
pub struct GridRun {
    pub cells: Vec<GridCellResult>,
    pub best: Vec<BestRow>,
}

impl GridRun {
    pub fn failed(&self) -> impl Iterator<Item = &GridCellResult> {
        self.cells.iter().filter(|c| c.report.is_none())
    }
}

/// Runs every cell in declared order (prompts outer, models inner) and
/// writes records, reports and summaries. Cell failures are recorded and
/// the grid moves on; setup and I/O failures abort.
pub async fn run_grid(spec: &GridSpec, client: &InferenceClient) -> Result<GridRun, RunnerError> {
    spec.validate()?;
    let started = SystemTime::now();
    let corpus = spec.load_corpus()?;
    if let Some(item) = corpus.iter().find(|i| i.gold().is_none()) {
        return Err(CorpusError::MissingGold(item.id().to_string()).into());
    }
    let profiles = spec.profiles();
    let records_dir = spec.output_dir.join("records");
    let reports_dir = spec.output_dir.join("reports");

    let mut cells = Vec::new();
    for plan in &spec.prompts {
        for profile in &profiles {
            let stem = cell_stem(&plan.name, &profile.model_name);
            let record_path = records_dir.join(format!("{stem}.jsonl"));
            let clock = Instant::now();
            tracing::info!(prompt = %plan.name, model = %profile.model_name, "cell start");
            let outcome = run_cell(client, plan, profile, &spec.schema, &corpus, &record_path, &spec.options)
                .await
                .and_then(|run| {
                    let report = evaluate(&run.records, &corpus, &spec.schema, spec.unparsed_policy)?;
                    Ok((run, report))
                });
            let mut cell = GridCellResult {
                prompt: plan.name.clone(),
                model: profile.model_name.clone(),
                report: None,
                record_path,
                wall_time: Duration::ZERO,
                statuses: None,
                resumed: 0,
                error: None,
                error_kind: None,
            };
            match outcome {
                Ok((run, report)) => {
                    write_report(&reports_dir, &stem, &report)?;
                    cell.statuses = Some(StatusCounts::of(&run.records));
                    cell.resumed = run.resumed;
                    cell.report = Some(report);
                }
                Err(e @ (RunnerError::Io { .. } | RunnerError::Json { .. })) => return Err(e),
                Err(e) => {
                    tracing::warn!(prompt = %plan.name, model = %profile.model_name, "cell failed: {e}");
                    cell.error_kind = Some(if e.exit_code() == 3 { "backend" } else { "data" });
                    cell.error = Some(e.to_string());
                }
            }
            cell.wall_time = clock.elapsed();
            cells.push(cell);
        }
    }

    let best = write_summaries(&spec.output_dir, &cells)?;
    write_manifest(&spec.output_dir.join("run_manifest.json"), started, &cells)?;
    Ok(GridRun { cells, best })
}

/// Writes `summary.csv`, `best_per_prompt.{csv,txt}` and `kappa_matrix.csv`.
pub fn write_summaries(dir: &Path, cells: &[GridCellResult]) -> Result<Vec<BestRow>, RunnerError> {
    let best = best_per_prompt(cells);
    write_file(&dir.join("summary.csv"), &summary_csv(cells)?)?;
    write_file(&dir.join("best_per_prompt.csv"), &best_csv(&best)?)?;
    write_file(&dir.join("best_per_prompt.txt"), &best_text(&best))?;
    write_file(&dir.join("kappa_matrix.csv"), &kappa_matrix_csv(cells)?)?;
    Ok(best)
}

/// Prompt rows by model columns of kappa; blank where a cell failed.
pub fn kappa_matrix_csv(cells: &[GridCellResult]) -> Result<String, RunnerError> {
    let mut prompts: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for c in cells {
        if !prompts.contains(&c.prompt.as_str()) {
            prompts.push(&c.prompt);
        }
        if !models.contains(&c.model.as_str()) {
            models.push(&c.model);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("prompt").chain(models.iter().copied()))?;
    for p in &prompts {
        let mut row = vec![p.to_string()];
        for m in &models {
            let kappa = cells
                .iter()
                .find(|c| c.prompt == *p && c.model == *m)
                .and_then(|c| c.report.as_ref())
                .map(|r| format!("{:.4}", r.kappa));
            row.push(kappa.unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Re-scores the record files of a finished (or partial) grid without
/// querying any backend. Missing or incomplete record files mark the cell
/// as failed.
pub fn collect_cells(spec: &GridSpec) -> Result<Vec<GridCellResult>, RunnerError> {
    let corpus = spec.load_corpus()?;
    let mut cells = Vec::new();
    for plan in &spec.prompts {
        for profile in &spec.profiles() {
            let stem = cell_stem(&plan.name, &profile.model_name);
            let record_path = spec.output_dir.join("records").join(format!("{stem}.jsonl"));
            let outcome = read_records(&record_path).and_then(|records| {
                let report = evaluate(&records, &corpus, &spec.schema, spec.unparsed_policy)?;
                Ok((records, report))
            });
            let mut cell = GridCellResult {
                prompt: plan.name.clone(),
                model: profile.model_name.clone(),
                report: None,
                record_path,
                wall_time: Duration::ZERO,
                statuses: None,
                resumed: 0,
                error: None,
                error_kind: None,
            };
            match outcome {
                Ok((records, report)) => {
                    cell.statuses = Some(StatusCounts::of(&records));
                    cell.report = Some(report);
                }
                Err(e) => {
                    cell.error_kind = Some("data");
                    cell.error = Some(e.to_string());
                }
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

fn unix_secs(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .or_else(|| std::env::var("COMPUTERNAME").ok())
        .unwrap_or_else(|| "unknown".into())
}

/// The only non-deterministic artifact: when and where the run happened.
fn write_manifest(path: &Path, started: SystemTime, cells: &[GridCellResult]) -> Result<(), RunnerError> {
    let manifest = serde_json::json!({
        "started_unix": unix_secs(started),
        "finished_unix": unix_secs(SystemTime::now()),
        "hostname": hostname(),
        "version": env!("CARGO_PKG_VERSION"),
        "cells": cells.iter().map(|c| serde_json::json!({
            "prompt": c.prompt,
            "model": c.model,
            "wall_time_secs": c.wall_time.as_secs_f64(),
            "resumed_items": c.resumed,
            "failed": c.report.is_none(),
        })).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| RunnerError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, &(text + "\n"))
}
