//! Dialogue corpus parsing, validation, statistics and chunk extraction.
//!
//! Samples follow a ConvoKit-style JSON layout: `id`, `utterances`
//! (each with `text` and `speaker`) and, for training data, a final
//! teacher `response`.

use std::collections::HashSet;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One dialogue turn: who spoke and what they said.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self { speaker: speaker.into(), text: text.into() }
    }
}

/// One training/test unit: dialogue context plus an optional reference
/// teacher response (absent for test samples).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: String,
    #[serde(rename = "utterances")]
    pub context: Vec<Utterance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<Utterance>,
}

/// Aggregate corpus statistics: sample count, mean turns per sample and
/// mean tokens per turn. The reference response counts as a turn when present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_samples: usize,
    pub avg_turns: f64,
    pub avg_tokens_per_turn: f64,
}

/// Deterministic text-to-token mapping. `tokenize("")` must be empty.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Inverse-ish of [`Tokenizer::tokenize`]; used when truncated token
    /// sequences have to be rendered back to text.
    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

/// Default tokenizer: split on unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }
}

/// Character-level tokenizer, used by the tiny trainable backends.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.chars().map(|c| c.to_string()).collect()
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.concat()
    }
}

/// Predicate deciding whether a speaker label denotes the teacher role.
/// Labels are matched case-insensitively; default label set is `{"teacher"}`.
#[derive(Debug, Clone)]
pub struct TeacherMatcher {
    labels: Vec<String>,
}

impl Default for TeacherMatcher {
    fn default() -> Self {
        Self { labels: vec!["teacher".to_owned()] }
    }
}

impl TeacherMatcher {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        Self { labels: labels.into_iter().map(|s| s.into().to_lowercase()).collect() }
    }

    pub fn is_teacher(&self, speaker: &str) -> bool {
        let s = speaker.trim().to_lowercase();
        self.labels.iter().any(|l| *l == s)
    }
}

/// Whether parsed records must carry a reference response (`Train`) or
/// must not (`Test`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Train,
    Test,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {index}: missing field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error("duplicate sample id `{id}`")]
    DuplicateId { id: String },
    #[error("corpus is empty")]
    Empty,
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
struct RawUtterance {
    text: Option<String>,
    speaker: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawSample {
    id: Option<String>,
    utterances: Option<Vec<RawUtterance>>,
    response: Option<RawUtterance>,
}

fn validate_utterance(
    raw: RawUtterance,
    index: usize,
    what: &str,
) -> Result<Utterance, CorpusError> {
    let text = raw.text.ok_or(CorpusError::MissingField { index, field: "text" })?;
    let speaker = raw.speaker.ok_or(CorpusError::MissingField { index, field: "speaker" })?;
    if text.trim().is_empty() {
        return Err(CorpusError::InvalidRecord {
            index,
            message: format!("{what} has empty text"),
        });
    }
    if speaker.trim().is_empty() {
        return Err(CorpusError::InvalidRecord {
            index,
            message: format!("{what} has empty speaker label"),
        });
    }
    Ok(Utterance { speaker, text })
}

fn validate_sample(
    raw: RawSample,
    index: usize,
    mode: ParseMode,
    teacher: &TeacherMatcher,
) -> Result<DialogueSample, CorpusError> {
    let id = raw.id.ok_or(CorpusError::MissingField { index, field: "id" })?;
    let utterances = raw.utterances.ok_or(CorpusError::MissingField { index, field: "utterances" })?;
    if utterances.is_empty() {
        return Err(CorpusError::InvalidRecord {
            index,
            message: "utterance list is empty".to_owned(),
        });
    }
    let context = utterances
        .into_iter()
        .enumerate()
        .map(|(u, raw)| validate_utterance(raw, index, &format!("utterance {u}")))
        .collect::<Result<Vec<_>, _>>()?;

    let response = match (mode, raw.response) {
        (ParseMode::Train, None) => {
            return Err(CorpusError::MissingField { index, field: "response" });
        }
        (ParseMode::Test, Some(_)) => {
            return Err(CorpusError::InvalidRecord {
                index,
                message: "test sample must not carry a response".to_owned(),
            });
        }
        (ParseMode::Train, Some(raw)) => {
            let utt = validate_utterance(raw, index, "response")?;
            if !teacher.is_teacher(&utt.speaker) {
                return Err(CorpusError::InvalidRecord {
                    index,
                    message: format!("response speaker `{}` is not a teacher role", utt.speaker),
                });
            }
            Some(utt)
        }
        (ParseMode::Test, None) => None,
    };

    Ok(DialogueSample { id, context, response })
}

/// Parse samples from `source`, accepting either a JSON array or
/// newline-delimited JSON records. In `Train` mode every record must carry
/// a teacher response; in `Test` mode the response must be absent.
pub fn parse_corpus<R: Read>(source: R, mode: ParseMode) -> Result<Vec<DialogueSample>, CorpusError> {
    parse_corpus_with(source, mode, &TeacherMatcher::default())
}

/// [`parse_corpus`] with a custom teacher-role matcher.
pub fn parse_corpus_with<R: Read>(
    mut source: R,
    mode: ParseMode,
    teacher: &TeacherMatcher,
) -> Result<Vec<DialogueSample>, CorpusError> {
    let mut buf = String::new();
    source.read_to_string(&mut buf)?;

    let raws: Vec<RawSample> = if buf.trim_start().starts_with('[') {
        serde_json::from_str(&buf)?
    } else {
        buf.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?
    };

    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(raws.len());
    for (index, raw) in raws.into_iter().enumerate() {
        let sample = validate_sample(raw, index, mode, teacher)?;
        if !seen.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId { id: sample.id });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Serialize samples as newline-delimited JSON in the corpus schema.
pub fn serialize_corpus(samples: &[DialogueSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// Compute corpus statistics. Each context utterance counts as one turn;
/// the response, when present, counts as an additional turn.
pub fn corpus_stats<T: Tokenizer>(
    samples: &[DialogueSample],
    tokenizer: &T,
) -> Result<CorpusStats, CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut total_turns = 0usize;
    let mut total_tokens = 0usize;
    for s in samples {
        for u in s.context.iter().chain(s.response.iter()) {
            total_turns += 1;
            total_tokens += tokenizer.tokenize(&u.text).len();
        }
    }
    Ok(CorpusStats {
        num_samples: samples.len(),
        avg_turns: total_turns as f64 / samples.len() as f64,
        avg_tokens_per_turn: total_tokens as f64 / total_turns as f64,
    })
}

/// Render named stats as a markdown table: one column per dataset, rows for
/// sample count, average turns and average tokens per turn (2 decimals).
pub fn stats_markdown_table(named: &[(String, CorpusStats)]) -> String {
    let mut header = String::from("| Dataset |");
    let mut rule = String::from("|---|");
    let mut rows = [
        String::from("| Num Samples |"),
        String::from("| Avg Turns |"),
        String::from("| Avg Tokens Per Turn |"),
    ];
    for (name, stats) in named {
        header.push_str(&format!(" {name} |"));
        rule.push_str("---|");
        rows[0].push_str(&format!(" {} |", stats.num_samples));
        rows[1].push_str(&format!(" {:.2} |", stats.avg_turns));
        rows[2].push_str(&format!(" {:.2} |", stats.avg_tokens_per_turn));
    }
    format!("{header}\n{rule}\n{}\n{}\n{}\n", rows[0], rows[1], rows[2])
}

/// Why a teacher utterance produced no chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ChunkSkip {
    /// The teacher utterance alone exceeds the token budget.
    OversizedUtterance,
    /// No preceding utterance fits in the budget, so the chunk would have
    /// an empty context.
    NoContextFits,
}

/// Warning record emitted for teacher utterances that could not anchor a chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkWarning {
    pub utterance_index: usize,
    pub reason: ChunkSkip,
}

/// Options for [`extract_chunks`].
#[derive(Debug, Clone)]
pub struct ChunkOptions {
    /// Token budget per chunk (context plus response).
    pub max_tokens: usize,
    /// Prefix for generated chunk ids.
    pub id_prefix: String,
    pub teacher: TeacherMatcher,
}

impl Default for ChunkOptions {
    fn default() -> Self {
        Self {
            max_tokens: 100,
            id_prefix: "chunk".to_owned(),
            teacher: TeacherMatcher::default(),
        }
    }
}

/// Result of [`extract_chunks`]: the chunks plus skip warnings.
#[derive(Debug, Clone)]
pub struct ChunkOutcome {
    pub chunks: Vec<DialogueSample>,
    pub warnings: Vec<ChunkWarning>,
}

/// Slice a conversation into teacher-terminated passages of at most
/// `max_tokens` tokens.
///
/// For every teacher utterance, the longest window of preceding utterances
/// that still fits the budget becomes the chunk context and the teacher
/// utterance its response (sliding endpoint). Identical chunks produced by
/// repeated text are deduplicated. A conversation without teacher
/// utterances yields an empty result.
pub fn extract_chunks<T: Tokenizer>(
    conversation: &[Utterance],
    opts: &ChunkOptions,
    tokenizer: &T,
) -> ChunkOutcome {
    let token_counts: Vec<usize> =
        conversation.iter().map(|u| tokenizer.tokenize(&u.text).len()).collect();

    let mut chunks = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();

    for (i, utt) in conversation.iter().enumerate() {
        if !opts.teacher.is_teacher(&utt.speaker) {
            continue;
        }
        if token_counts[i] > opts.max_tokens {
            warnings.push(ChunkWarning { utterance_index: i, reason: ChunkSkip::OversizedUtterance });
            continue;
        }
        // Longest window [start, i] within budget; the chunk needs at least
        // one context utterance in front of the response.
        let mut total = token_counts[i];
        let mut start = i;
        while start > 0 && total + token_counts[start - 1] <= opts.max_tokens {
            start -= 1;
            total += token_counts[start];
        }
        if start == i {
            warnings.push(ChunkWarning { utterance_index: i, reason: ChunkSkip::NoContextFits });
            continue;
        }

        let context = conversation[start..i].to_vec();
        let response = conversation[i].clone();
        let key = chunk_key(&context, &response);
        if seen.insert(key) {
            chunks.push(DialogueSample {
                id: format!("{}-{}", opts.id_prefix, chunks.len()),
                context,
                response: Some(response),
            });
        }
    }

    ChunkOutcome { chunks, warnings }
}

fn chunk_key(context: &[Utterance], response: &Utterance) -> String {
    let mut key = String::new();
    for u in context.iter().chain(std::iter::once(response)) {
        key.push_str(&u.speaker);
        key.push('\u{1}');
        key.push_str(&u.text);
        key.push('\u{2}');
    }
    key
}
