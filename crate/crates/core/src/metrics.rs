//! Agreement and classification metrics against gold labels.
//!
//! Everything is computed at full precision; two-decimal rounding (half-up)
//! happens only when reports are displayed or compared.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LabelSchema;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold has {gold} items but predictions have {predicted}")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("unknown gold label `{0}`")]
    UnknownGold(String),
    #[error("unknown predicted label `{0}`")]
    UnknownPrediction(String),
    #[error("count matrix must be {k}x{k}")]
    Shape { k: usize },
    #[error("no scored items")]
    Empty,
    #[error("kappa {0} outside [-1, 1]")]
    KappaRange(f64),
}

/// How replies that yielded no label are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparsedPolicy {
    /// Count as a wrong prediction against the gold class.
    #[default]
    AsWrong,
    /// Drop the item from scoring.
    Exclude,
}

impl UnparsedPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            UnparsedPolicy::AsWrong => "as_wrong",
            UnparsedPolicy::Exclude => "exclude",
        }
    }
}

impl fmt::Display for UnparsedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for UnparsedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_wrong" | "as-wrong" => Ok(UnparsedPolicy::AsWrong),
            "exclude" => Ok(UnparsedPolicy::Exclude),
            other => Err(format!("unknown unparsed policy `{other}`")),
        }
    }
}

/// Rows are gold labels, columns predicted labels, both in schema order.
///
/// Under [`UnparsedPolicy::AsWrong`] unlabeled predictions land in an extra
/// per-row "unparsed" column that matches no gold class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
    unparsed_by_gold: Vec<u64>,
    /// Items dropped under [`UnparsedPolicy::Exclude`].
    unparsed_count: u64,
    policy: UnparsedPolicy,
}

impl ConfusionMatrix {
    /// Matrix from raw counts, no unparsed items.
    pub fn from_counts(schema: &LabelSchema, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = schema.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::Shape { k });
        }
        Ok(ConfusionMatrix {
            labels: schema.labels().to_vec(),
            counts,
            unparsed_by_gold: vec![0; k],
            unparsed_count: 0,
            policy: UnparsedPolicy::AsWrong,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn unparsed_by_gold(&self) -> &[u64] {
        &self.unparsed_by_gold
    }

    pub fn unparsed_count(&self) -> u64 {
        self.unparsed_count
    }

    pub fn policy(&self) -> UnparsedPolicy {
        self.policy
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Items that enter the metrics (excluded items do not).
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsed_by_gold.iter().sum::<u64>()
    }

    /// Gold support of class `i`, unparsed predictions included.
    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() + self.unparsed_by_gold[i]
    }

    pub fn col_total(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn agreements(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }
}

/// Tallies gold/predicted pairs. `None` predictions are handled per `policy`.
pub fn confusion<G, P>(
    gold: &[G],
    predicted: &[Option<P>],
    schema: &LabelSchema,
    policy: UnparsedPolicy,
) -> Result<ConfusionMatrix, MetricsError>
where
    G: AsRef<str>,
    P: AsRef<str>,
{
    if gold.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            predicted: predicted.len(),
        });
    }
    let k = schema.len();
    let mut cm = ConfusionMatrix::from_counts(schema, vec![vec![0; k]; k])?;
    cm.policy = policy;
    for (g, p) in gold.iter().zip(predicted) {
        let row = schema
            .index_of(g.as_ref())
            .ok_or_else(|| MetricsError::UnknownGold(g.as_ref().to_string()))?;
        match p {
            Some(p) => {
                let col = schema
                    .index_of(p.as_ref())
                    .ok_or_else(|| MetricsError::UnknownPrediction(p.as_ref().to_string()))?;
                cm.counts[row][col] += 1;
            }
            None => match policy {
                UnparsedPolicy::AsWrong => cm.unparsed_by_gold[row] += 1,
                UnparsedPolicy::Exclude => cm.unparsed_count += 1,
            },
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub true_positives: u64,
    /// No predictions for this class; precision reported as 0.
    #[serde(default)]
    pub precision_undefined: bool,
    /// No gold items of this class; recall reported as 0.
    #[serde(default)]
    pub recall_undefined: bool,
}

impl ClassScores {
    /// Scores given directly, e.g. to re-aggregate published per-class values.
    pub fn from_values(label: impl Into<String>, precision: f64, recall: f64, f1: f64, support: u64) -> Self {
        ClassScores {
            label: label.into(),
            precision,
            recall,
            f1,
            support,
            true_positives: 0,
            precision_undefined: false,
            recall_undefined: false,
        }
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.k())
        .map(|c| {
            let tp = cm.counts[c][c];
            let support = cm.row_total(c);
            let (precision, precision_undefined) = ratio(tp, cm.col_total(c));
            let (recall, recall_undefined) = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                label: cm.labels[c].clone(),
                precision,
                recall,
                f1,
                support,
                true_positives: tp,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Averages across classes: unweighted means, support-weighted F1, and
/// accuracy as true positives over total support.
pub fn aggregate(per_class: &[ClassScores]) -> Result<Aggregate, MetricsError> {
    let n: u64 = per_class.iter().map(|c| c.support).sum();
    if n == 0 || per_class.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let tp: u64 = per_class.iter().map(|c| c.true_positives).sum();
    Ok(Aggregate {
        accuracy: tp as f64 / n as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        weighted_f1: per_class
            .iter()
            .map(|c| c.f1 * c.support as f64)
            .sum::<f64>()
            / n as f64,
    })
}

/// Cohen's kappa, `(p_o - p_e) / (1 - p_e)`.
///
/// Evaluated as `(n·agree - Σ row·col) / (n² - Σ row·col)` in exact integer
/// arithmetic, so `p_o = p_e` gives exactly 0 and perfect agreement exactly 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = i128::from(cm.total());
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let agree = i128::from(cm.agreements());
    let chance: i128 = (0..cm.k())
        .map(|c| i128::from(cm.row_total(c)) * i128::from(cm.col_total(c)))
        .sum();
    let num = n * agree - chance;
    let den = n * n - chance;
    if den == 0 {
        // p_e = 1: only perfect agreement is possible
        return Ok(if agree == n { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaBand {
    Poor,
    Fair,
    Moderate,
    Good,
    VeryGood,
}

impl KappaBand {
    pub fn as_str(self) -> &'static str {
        match self {
            KappaBand::Poor => "poor",
            KappaBand::Fair => "fair",
            KappaBand::Moderate => "moderate",
            KappaBand::Good => "good",
            KappaBand::VeryGood => "very good",
        }
    }
}

impl fmt::Display for KappaBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Band boundaries belong to the upper band: 0.8 is "very good", 0.6
/// "good", 0.4 "moderate", 0.2 "fair".
pub fn interpret_kappa(kappa: f64) -> Result<KappaBand, MetricsError> {
    if !(-1.0..=1.0).contains(&kappa) {
        return Err(MetricsError::KappaRange(kappa));
    }
    Ok(match kappa {
        k if k >= 0.8 => KappaBand::VeryGood,
        k if k >= 0.6 => KappaBand::Good,
        k if k >= 0.4 => KappaBand::Moderate,
        k if k >= 0.2 => KappaBand::Fair,
        _ => KappaBand::Poor,
    })
}

/// Half-up rounding to `decimals` places; a tiny epsilon absorbs binary
/// representation error (0.705 → 0.71).
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (x * scale + 0.5 + 1e-9).floor() / scale
}

pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round_half_up(x, 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassScores>,
    pub accuracy: f64,
    /// "Overall" precision: unweighted mean over classes.
    pub macro_precision: f64,
    /// "Overall" recall: unweighted mean over classes.
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub kappa: f64,
    pub kappa_band: KappaBand,
    /// Scored items; equals the sum of supports.
    pub n: u64,
    pub unparsed_policy: UnparsedPolicy,
    /// Items without a label, scored as wrong or excluded per the policy.
    pub unparsed: u64,
    pub zero_division: bool,
}

impl ClassificationReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let per_class = precision_recall_f1(cm);
        let agg = aggregate(&per_class)?;
        let kappa = cohen_kappa(cm)?;
        let zero_division = per_class
            .iter()
            .any(|c| c.precision_undefined || c.recall_undefined);
        Ok(ClassificationReport {
            accuracy: agg.accuracy,
            macro_precision: agg.macro_precision,
            macro_recall: agg.macro_recall,
            macro_f1: agg.macro_f1,
            weighted_f1: agg.weighted_f1,
            kappa_band: interpret_kappa(kappa)?,
            kappa,
            n: cm.total(),
            unparsed_policy: cm.policy(),
            unparsed: cm.unparsed_count() + cm.unparsed_by_gold().iter().sum::<u64>(),
            zero_division,
            per_class,
        })
    }

    /// Plain-text table laid out like a classic classification report.
    pub fn to_text(&self) -> String {
        const HEAD: usize = 24;
        let widths: Vec<usize> = self
            .per_class
            .iter()
            .map(|c| c.label.len().max(6) + 2)
            .collect();
        let overall_w = 9;
        let blank: usize = widths.iter().sum();

        let mut out = String::new();
        let _ = write!(out, "{:HEAD$}", "");
        for (c, w) in self.per_class.iter().zip(&widths) {
            let _ = write!(out, "{:>w$}", c.label);
        }
        let _ = writeln!(out, "{:>overall_w$}", "Overall");

        let mark = |v: f64, undefined: bool| {
            if undefined {
                format!("{}*", fmt2(v))
            } else {
                fmt2(v)
            }
        };
        type Cell = fn(&ClassScores) -> (f64, bool);
        let rows: [(&str, Cell, f64); 3] = [
            ("Precision", |c| (c.precision, c.precision_undefined), self.macro_precision),
            ("Recall", |c| (c.recall, c.recall_undefined), self.macro_recall),
            ("F1-Score", |c| (c.f1, false), self.macro_f1),
        ];
        for (name, cell, overall) in rows.iter() {
            let _ = write!(out, "{name:HEAD$}");
            for (c, w) in self.per_class.iter().zip(&widths) {
                let (v, undefined) = cell(c);
                let _ = write!(out, "{:>w$}", mark(v, undefined));
            }
            let _ = writeln!(out, "{:>overall_w$}", fmt2(*overall));
        }
        let _ = write!(out, "{:HEAD$}", "N");
        for (c, w) in self.per_class.iter().zip(&widths) {
            let _ = write!(out, "{:>w$}", c.support);
        }
        let _ = writeln!(out, "{:>overall_w$}", self.n);

        for (name, value) in [
            ("Macro Average F1-Score", self.macro_f1),
            ("Weighted Avg F1-Score", self.weighted_f1),
            ("Accuracy", self.accuracy),
            ("Kappa", self.kappa),
        ] {
            let _ = write!(out, "{name:HEAD$}{:blank$}{:>overall_w$}", "", fmt2(value));
            if name == "Kappa" {
                let _ = write!(out, " ({})", self.kappa_band);
            }
            out.push('\n');
        }
        let _ = match self.unparsed_policy {
            UnparsedPolicy::AsWrong => writeln!(
                out,
                "Unparsed policy: as_wrong ({} unparsed replies scored as errors)",
                self.unparsed
            ),
            UnparsedPolicy::Exclude => writeln!(
                out,
                "Unparsed policy: exclude ({} unparsed items dropped)",
                self.unparsed
            ),
        };
        if self.zero_division {
            out.push_str("* undefined (zero denominator), reported as 0\n");
        }
        out
    }
}

/// Confusion matrix and full report in one step.
pub fn classification_report<G, P>(
    gold: &[G],
    predicted: &[Option<P>],
    schema: &LabelSchema,
    policy: UnparsedPolicy,
) -> Result<ClassificationReport, MetricsError>
where
    G: AsRef<str>,
    P: AsRef<str>,
{
    ClassificationReport::from_confusion(&confusion(gold, predicted, schema, policy)?)
}
