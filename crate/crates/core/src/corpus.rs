//! Corpus files (CSV or JSONL with `id`, `text`, optional `gold`) and label
//! distribution summaries.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LabelSchema, LabeledText, ModelError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first})")]
    Duplicate { id: String, line: u64, first: u64 },
    #[error("cannot infer corpus format from `{0}`; use .csv or .jsonl")]
    UnknownFormat(PathBuf),
    #[error("item `{0}` has no gold label")]
    MissingGold(String),
    #[error("corpus is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Ok(Format::Csv),
            Some(e) if e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("ndjson") => {
                Ok(Format::Jsonl)
            }
            _ => Err(CorpusError::UnknownFormat(path.to_path_buf())),
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

pub fn ingest(path: &Path, format: Format, schema: &LabelSchema) -> Result<Vec<LabeledText>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(file, format, schema)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    format: Format,
    schema: &LabelSchema,
) -> Result<Vec<LabeledText>, CorpusError> {
    let rows = match format {
        Format::Csv => csv_rows(reader)?,
        Format::Jsonl => jsonl_rows(reader)?,
    };
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut corpus = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if let Some(&first) = seen.get(&row.id) {
            return Err(CorpusError::Duplicate {
                id: row.id,
                line,
                first,
            });
        }
        let gold = row.gold.as_deref().filter(|g| !g.trim().is_empty());
        let item = LabeledText::new(row.id.as_str(), row.text, gold, schema).map_err(|e| {
            CorpusError::Row {
                line,
                message: match e {
                    ModelError::UnknownLabel(l) => format!("unknown gold label `{l}`"),
                    other => other.to_string(),
                },
            }
        })?;
        seen.insert(row.id, line);
        corpus.push(item);
    }
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(corpus)
}

struct Row {
    id: String,
    text: String,
    gold: Option<String>,
}

fn csv_rows<R: Read>(reader: R) -> Result<Vec<(u64, Row)>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Row {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let missing = |name: &str| CorpusError::Row {
        line: 1,
        message: format!("missing `{name}` column"),
    };
    let id_col = col("id").ok_or_else(|| missing("id"))?;
    let text_col = col("text").ok_or_else(|| missing("text"))?;
    let gold_col = col("gold");

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CorpusError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((
            line,
            Row {
                id: record[id_col].trim().to_string(),
                text: record[text_col].to_string(),
                gold: gold_col.map(|c| record[c].to_string()),
            },
        ));
    }
    Ok(rows)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    id: serde_json::Value,
    text: String,
    #[serde(default)]
    gold: Option<String>,
}

fn jsonl_rows<R: Read>(mut reader: R) -> Result<Vec<(u64, Row)>, CorpusError> {
    let mut buf = String::new();
    reader
        .read_to_string(&mut buf)
        .map_err(|e| CorpusError::Row {
            line: 0,
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (idx, raw) in buf.lines().enumerate() {
        let line = idx as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(raw).map_err(|e| CorpusError::Row {
            line,
            message: e.to_string(),
        })?;
        let id = match row.id {
            serde_json::Value::String(s) => s.trim().to_string(),
            serde_json::Value::Number(n) => n.to_string(),
            other => {
                return Err(CorpusError::Row {
                    line,
                    message: format!("id must be a string or number, got {other}"),
                })
            }
        };
        rows.push((
            line,
            Row {
                id,
                text: row.text,
                gold: row.gold,
            },
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelShare {
    pub label: String,
    pub count: u64,
    /// Percentage in hundredths (3420 = 34.20%).
    pub hundredths: u64,
}

impl LabelShare {
    pub fn percent(&self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Distribution {
    pub rows: Vec<LabelShare>,
    pub total: u64,
}

/// Per-label counts and percentages in schema order, skipping labels with no
/// items. Percentages are apportioned by largest remainder so the column
/// sums to exactly 100.00.
pub fn label_distribution(corpus: &[LabeledText], schema: &LabelSchema) -> Result<Distribution, CorpusError> {
    let mut counts = vec![0u64; schema.len()];
    for item in corpus {
        let gold = item
            .gold()
            .ok_or_else(|| CorpusError::MissingGold(item.id().to_string()))?;
        let i = schema.index_of(gold).ok_or_else(|| CorpusError::Row {
            line: 0,
            message: format!("unknown gold label `{gold}`"),
        })?;
        counts[i] += 1;
    }
    let total = corpus.len() as u64;
    if total == 0 {
        return Err(CorpusError::Empty);
    }

    const WHOLE: u64 = 10_000;
    let mut shares: Vec<u64> = counts.iter().map(|c| c * WHOLE / total).collect();
    let mut leftover = WHOLE - shares.iter().sum::<u64>();
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    // stable sort keeps schema order among equal remainders
    by_remainder.sort_by_key(|&i| std::cmp::Reverse(counts[i] * WHOLE % total));
    for i in by_remainder {
        if leftover == 0 {
            break;
        }
        if counts[i] > 0 {
            shares[i] += 1;
            leftover -= 1;
        }
    }

    let rows = schema
        .labels()
        .iter()
        .zip(counts.iter().zip(shares))
        .filter(|(_, (c, _))| **c > 0)
        .map(|(label, (&count, hundredths))| LabelShare {
            label: label.clone(),
            count,
            hundredths,
        })
        .collect();
    Ok(Distribution { rows, total })
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max("Label".len());
        writeln!(f, "{:width$}  Count", "Label")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:width$}  {} ({}.{:02}%)",
                row.label,
                row.count,
                row.hundredths / 100,
                row.hundredths % 100
            )?;
        }
        write!(f, "{:width$}  {} (100.00%)", "Total", self.total)
    }
}
