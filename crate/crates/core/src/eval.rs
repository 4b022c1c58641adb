//! Score model predictions against reference responses and render
//! per-model reports as markdown, CSV or JSON.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DialogueSample;
use crate::retrieval::render_context;
use crate::reward::{bertscore, dialogue_quality, DialogueRanker, RewardError, TokenEmbedder};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions reference unknown sample ids: {}", .0.join(", "))]
    UnknownSampleIds(Vec<String>),
    #[error("sample `{0}` has no reference response")]
    MissingReference(String),
    #[error("scoring failure: {0}")]
    Reward(#[from] RewardError),
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// One model output for one corpus sample. The wire format uses the short
/// field names `id`, `response` and `model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub sample_id: String,
    #[serde(rename = "response")]
    pub response_text: String,
    #[serde(rename = "model")]
    pub model_name: String,
}

/// Parse predictions from JSON lines or a JSON array.
pub fn parse_predictions<R: Read>(mut source: R) -> Result<Vec<Prediction>, EvalError> {
    let mut buf = String::new();
    source.read_to_string(&mut buf)?;
    if buf.trim_start().starts_with('[') {
        Ok(serde_json::from_str(&buf)?)
    } else {
        buf.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(EvalError::from))
            .collect()
    }
}

/// Serialize predictions as JSON lines.
pub fn serialize_predictions(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleScore {
    pub sample_id: String,
    pub model_name: String,
    pub bertscore_f1: f64,
    pub dialogue_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_name: String,
    pub mean_bertscore_f1: f64,
    pub mean_dialogue_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub split_name: String,
    pub embedder_id: String,
    pub ranker_id: String,
    /// Caveat carried on every report: scores depend on the configured
    /// embedder and ranker and are not comparable across configurations.
    pub note: String,
}

/// Per-model means plus the full per-sample score table they were computed
/// from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub per_sample: Vec<PerSampleScore>,
    pub metadata: ReportMetadata,
}

/// Score every prediction against its corpus sample: similarity F1 against
/// the reference response and ranker quality against the context. Report
/// rows are per-model arithmetic means, sorted by model name.
pub fn evaluate<E: TokenEmbedder, R: DialogueRanker>(
    predictions: &[Prediction],
    corpus: &[DialogueSample],
    embedder: &E,
    ranker: &R,
    split_name: &str,
) -> Result<EvalReport, EvalError> {
    let index: BTreeMap<&str, &DialogueSample> =
        corpus.iter().map(|s| (s.id.as_str(), s)).collect();

    let unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !index.contains_key(p.sample_id.as_str()))
        .map(|p| p.sample_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownSampleIds(unknown));
    }

    let mut per_sample = Vec::with_capacity(predictions.len());
    for p in predictions {
        let sample = index[p.sample_id.as_str()];
        let reference = sample
            .response
            .as_ref()
            .ok_or_else(|| EvalError::MissingReference(sample.id.clone()))?;
        let scores = bertscore(&p.response_text, &reference.text, embedder)?;
        let quality = dialogue_quality(&render_context(sample), &p.response_text, ranker)?;
        per_sample.push(PerSampleScore {
            sample_id: p.sample_id.clone(),
            model_name: p.model_name.clone(),
            bertscore_f1: scores.f1,
            dialogue_quality: quality,
        });
    }
    per_sample.sort_by(|a, b| {
        (&a.model_name, &a.sample_id).cmp(&(&b.model_name, &b.sample_id))
    });

    let mut grouped: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for s in &per_sample {
        let entry = grouped.entry(s.model_name.as_str()).or_insert((0.0, 0.0, 0));
        entry.0 += s.bertscore_f1;
        entry.1 += s.dialogue_quality;
        entry.2 += 1;
    }
    let rows = grouped
        .into_iter()
        .map(|(model, (b, d, n))| ReportRow {
            model_name: model.to_owned(),
            mean_bertscore_f1: b / n as f64,
            mean_dialogue_quality: d / n as f64,
        })
        .collect();

    Ok(EvalReport {
        rows,
        per_sample,
        metadata: ReportMetadata {
            split_name: split_name.to_owned(),
            embedder_id: embedder.model_id().to_owned(),
            ranker_id: ranker.model_id().to_owned(),
            note: "scores depend on the configured embedder and ranker; not comparable \
                   across configurations"
                .to_owned(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

/// Render the report. Column order is Model, BERTScore, DialogRPT; the
/// rendering is deterministic.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = String::from("| Model | BERTScore | DialogRPT |\n|---|---|---|\n");
            for row in &report.rows {
                out.push_str(&format!(
                    "| {} | {:.2} | {:.2} |\n",
                    row.model_name, row.mean_bertscore_f1, row.mean_dialogue_quality
                ));
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("model,bertscore,dialogrpt\n");
            for row in &report.rows {
                out.push_str(&format!(
                    "\"{}\",{},{}\n",
                    row.model_name, row.mean_bertscore_f1, row.mean_dialogue_quality
                ));
            }
            out
        }
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes")
        }
    }
}

/// Parse a JSON report back (inverse of [`emit_report`] with
/// [`ReportFormat::Json`]).
pub fn parse_report_json(text: &str) -> Result<EvalReport, EvalError> {
    Ok(serde_json::from_str(text)?)
}

/// Parse summary rows back from CSV (inverse of the CSV emission).
pub fn parse_rows_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix('"')
            .ok_or_else(|| EvalError::Malformed(format!("unquoted model field: {line}")))?;
        let close = rest
            .find('"')
            .ok_or_else(|| EvalError::Malformed(format!("unterminated quote: {line}")))?;
        let model_name = rest[..close].to_owned();
        let nums: Vec<&str> = rest[close + 1..].trim_start_matches(',').split(',').collect();
        if nums.len() != 2 {
            return Err(EvalError::Malformed(format!("expected two scores: {line}")));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| EvalError::Malformed(format!("bad number {s}: {e}")))
        };
        rows.push(ReportRow {
            model_name,
            mean_bertscore_f1: parse(nums[0])?,
            mean_dialogue_quality: parse(nums[1])?,
        });
    }
    Ok(rows)
}
