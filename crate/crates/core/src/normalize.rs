//! Raw reply → canonical label, and multi-path vote aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnnotationStatus, LabelSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseReason {
    Exact,
    Synonym,
    UniqueMention,
    None,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub label: Option<String>,
    /// Byte range in the lowercased reply.
    pub matched_span: Option<(usize, usize)>,
    pub reason: ParseReason,
}

impl ParseOutcome {
    fn miss(reason: ParseReason) -> Self {
        ParseOutcome {
            label: None,
            matched_span: None,
            reason,
        }
    }

    /// Outcome for a path that produced no reply at all.
    pub fn no_reply() -> Self {
        Self::miss(ParseReason::None)
    }
}

const OPENERS: &[char] = &['"', '\'', '`', '[', '(', '{', '<', '*'];
const CLOSERS: &[char] = &[
    '"', '\'', '`', ']', ')', '}', '>', '*', '.', ',', ';', ':', '!', '?',
];

/// Strips wrapping quotes/brackets and trailing punctuation, returning the
/// byte offset of the remaining core within `s`.
fn strip_wrapping(s: &str) -> (usize, &str) {
    let mut start = 0;
    let mut core = s;
    loop {
        let trimmed_start = core.trim_start_matches(|c: char| c.is_whitespace() || OPENERS.contains(&c));
        start += core.len() - trimmed_start.len();
        let trimmed = trimmed_start.trim_end_matches(|c: char| c.is_whitespace() || CLOSERS.contains(&c));
        if trimmed.len() == core.len() {
            return (start, trimmed);
        }
        core = trimmed;
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Occurrences of `term` in `haystack` that sit on word boundaries.
fn word_matches<'a>(haystack: &'a str, term: &'a str) -> impl Iterator<Item = (usize, usize)> + 'a {
    haystack.match_indices(term).filter_map(move |(start, m)| {
        let end = start + m.len();
        let before_ok = haystack[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !is_word_char(c));
        (before_ok && after_ok).then_some((start, end))
    })
}

/// Maps a raw reply onto a label of `schema`.
///
/// After lowercasing and stripping wrapping punctuation, a reply that *is* a
/// label (or alias) matches exactly. Otherwise labels and aliases mentioned
/// as whole words are collected: one distinct label is a unique mention,
/// several are ambiguous, none is a miss.
pub fn normalize(raw: &str, schema: &LabelSchema) -> ParseOutcome {
    let lower = raw.to_lowercase();
    let (offset, core) = strip_wrapping(&lower);

    if !core.is_empty() {
        if schema.contains(core) {
            return ParseOutcome {
                label: Some(core.to_string()),
                matched_span: Some((offset, offset + core.len())),
                reason: ParseReason::Exact,
            };
        }
        if let Some(label) = schema.canonicalize(core) {
            return ParseOutcome {
                label: Some(label.to_string()),
                matched_span: Some((offset, offset + core.len())),
                reason: ParseReason::Synonym,
            };
        }
    }

    let terms = schema
        .labels()
        .iter()
        .map(|l| (l.as_str(), l.as_str()))
        .chain(schema.synonyms().iter().map(|(a, c)| (a.as_str(), c.as_str())));

    // label -> earliest span
    let mut mentioned: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (term, label) in terms {
        if let Some(span) = word_matches(&lower, term).next() {
            mentioned
                .entry(label)
                .and_modify(|s| {
                    if span.0 < s.0 {
                        *s = span
                    }
                })
                .or_insert(span);
        }
    }

    match mentioned.len() {
        0 => ParseOutcome::miss(ParseReason::None),
        1 => {
            let (label, span) = mentioned.into_iter().next().expect("one entry");
            ParseOutcome {
                label: Some(label.to_string()),
                matched_span: Some(span),
                reason: ParseReason::UniqueMention,
            }
        }
        _ => ParseOutcome::miss(ParseReason::Ambiguous),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoteResult {
    pub label: Option<String>,
    /// Only labels that received at least one vote.
    pub votes: BTreeMap<String, u32>,
    pub status: AnnotationStatus,
}

/// Plurality vote over parsed paths. Unlabeled outcomes abstain; a tie for
/// first place goes to the tied label that comes first in schema order.
pub fn majority_vote(outcomes: &[ParseOutcome], schema: &LabelSchema) -> VoteResult {
    let mut counts = vec![0u32; schema.len()];
    for label in outcomes.iter().filter_map(|o| o.label.as_deref()) {
        if let Some(i) = schema.index_of(label) {
            counts[i] += 1;
        }
    }
    let votes: BTreeMap<String, u32> = schema
        .labels()
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(l, &c)| (l.clone(), c))
        .collect();

    let top = counts.iter().copied().max().unwrap_or(0);
    if top == 0 {
        return VoteResult {
            label: None,
            votes,
            status: AnnotationStatus::Unparsed,
        };
    }
    let leaders: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == top).collect();
    let status = if leaders.len() == 1 {
        AnnotationStatus::Ok
    } else {
        AnnotationStatus::TieBroken
    };
    VoteResult {
        label: Some(schema.labels()[leaders[0]].clone()),
        votes,
        status,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynonymError {
    #[error("line {line}: expected `label: alias, alias`")]
    Syntax { line: usize },
}

/// Parses a synonym table: one `canonical: alias, alias` mapping per line;
/// blank lines and `#` comments are ignored.
pub fn parse_synonym_table(text: &str) -> Result<Vec<(String, String)>, SynonymError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, aliases) = line
            .split_once(':')
            .ok_or(SynonymError::Syntax { line: i + 1 })?;
        let label = label.trim();
        if label.is_empty() {
            return Err(SynonymError::Syntax { line: i + 1 });
        }
        for alias in aliases.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            out.push((alias.to_string(), label.to_string()));
        }
    }
    Ok(out)
}
