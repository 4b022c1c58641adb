//! Few-shot prompt construction: embedding-similarity retrieval of exemplar
//! conversations and assembly of the system instruction, delimited
//! exemplars and the query conversation.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::DialogueSample;

/// Default system instruction for the external teacher baseline.
pub const SYSTEM_PROMPT: &str = "You are acting as a teacher, and you are helping a student learn. Be patient, helpful, and kind. Don't be superimposing; give short responses to encourage learning. Make the student feel comfortable and confident, and help them learn. Now, join the following conversation:";

/// Markers wrapping each exemplar conversation.
pub const DELIMITER_BEGIN: &str = "<<<BEGIN SAMPLE CONVERSATION>>>";
pub const DELIMITER_END: &str = "<<<END SAMPLE CONVERSATION>>>";

/// Number of exemplar conversations retrieved by default.
pub const DEFAULT_FEWSHOT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding provider failure: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty candidate pool")]
    EmptyPool,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cache file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Text-to-vector provider. Same text must yield the same vector within a
/// provider session, and all vectors must share one dimension.
pub trait EmbeddingProvider {
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;

    fn provider_id(&self) -> &str {
        "text-embedding-ada-002"
    }
}

/// A fully assembled few-shot prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    /// Rendered exemplar conversations in rank order.
    pub exemplars: Vec<String>,
    pub query_conversation: String,
    pub delimiter_begin: String,
    pub delimiter_end: String,
}

impl PromptBundle {
    /// Exemplars and query, each exemplar wrapped in its markers.
    pub fn user_message(&self) -> String {
        let mut out = String::new();
        for exemplar in &self.exemplars {
            out.push_str(&self.delimiter_begin);
            out.push('\n');
            out.push_str(exemplar);
            out.push('\n');
            out.push_str(&self.delimiter_end);
            out.push_str("\n\n");
        }
        out.push_str(&self.query_conversation);
        out
    }

    /// System text followed by the user message, as one string.
    pub fn to_flat_string(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_message())
    }
}

/// Speaker-tagged rendering: one `[speaker] text` line per utterance, the
/// response last when present.
pub fn render_dialogue(sample: &DialogueSample) -> String {
    sample
        .context
        .iter()
        .chain(sample.response.iter())
        .map(|u| format!("[{}] {}", u.speaker, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Speaker-tagged rendering of the context only; this is what gets
/// embedded for retrieval, so hidden responses never leak into similarity.
pub fn render_context(sample: &DialogueSample) -> String {
    sample
        .context
        .iter()
        .map(|u| format!("[{}] {}", u.speaker, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Cosine similarity; defined as 0 when either vector has zero norm.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        tracing::warn!("zero-norm embedding; similarity defined as 0");
        return 0.0;
    }
    dot / (nu * nv)
}

/// Rank the pool by cosine similarity of context embeddings against the
/// query, descending; ties keep pool order. Returns `min(k, |pool|)` pairs.
pub fn top_k_similar<P: EmbeddingProvider>(
    query: &DialogueSample,
    pool: &[DialogueSample],
    provider: &P,
    k: usize,
) -> Result<Vec<(DialogueSample, f64)>, RetrievalError> {
    if pool.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    let query_vec = provider.embed(&render_context(query))?;
    let dim = query_vec.len();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(pool.len());
    for (i, sample) in pool.iter().enumerate() {
        let vec = provider.embed(&render_context(sample))?;
        if vec.len() != dim {
            return Err(RetrievalError::DimensionMismatch { expected: dim, got: vec.len() });
        }
        scored.push((i, cosine_similarity(&query_vec, &vec)));
    }
    // Stable sort keeps pool order on ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    scored.truncate(k.min(pool.len()));
    Ok(scored.into_iter().map(|(i, s)| (pool[i].clone(), s)).collect())
}

/// Assemble the few-shot prompt: system text, then up to
/// [`DEFAULT_FEWSHOT_K`] exemplars in rank order, then the query.
pub fn build_fewshot_prompt(
    query: &DialogueSample,
    exemplars: &[(DialogueSample, f64)],
    system_text: &str,
) -> PromptBundle {
    build_fewshot_prompt_with(
        query,
        exemplars,
        system_text,
        DEFAULT_FEWSHOT_K,
        DELIMITER_BEGIN,
        DELIMITER_END,
    )
}

pub fn build_fewshot_prompt_with(
    query: &DialogueSample,
    exemplars: &[(DialogueSample, f64)],
    system_text: &str,
    k: usize,
    delimiter_begin: &str,
    delimiter_end: &str,
) -> PromptBundle {
    PromptBundle {
        system_text: system_text.to_owned(),
        exemplars: exemplars.iter().take(k).map(|(s, _)| render_dialogue(s)).collect(),
        query_conversation: render_context(query),
        delimiter_begin: delimiter_begin.to_owned(),
        delimiter_end: delimiter_end.to_owned(),
    }
}

/// Deterministic local embedding stub: the mean of hash-derived token
/// vectors, so texts sharing words land near each other.
#[derive(Debug, Clone)]
pub struct HashEmbeddingProvider {
    pub dim: usize,
}

impl Default for HashEmbeddingProvider {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for token in text.split_whitespace() {
            for (a, x) in acc.iter_mut().zip(crate::reward::stub::hash_vector(token, self.dim)) {
                *a += x;
            }
            count += 1;
        }
        if count > 0 {
            for a in acc.iter_mut() {
                *a /= count as f64;
            }
        }
        Ok(acc)
    }

    fn provider_id(&self) -> &str {
        "stub-hash-embedding"
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    entries: HashMap<String, Vec<f64>>,
}

/// Disk-backed embedding cache keyed by provider id and text hash. Wraps a
/// provider; access is serialized behind a mutex.
pub struct CachedProvider<P> {
    inner: P,
    state: Mutex<CacheState>,
}

struct CacheState {
    entries: HashMap<String, Vec<f64>>,
    path: Option<PathBuf>,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    /// In-memory cache only.
    pub fn new(inner: P) -> Self {
        Self { inner, state: Mutex::new(CacheState { entries: HashMap::new(), path: None }) }
    }

    /// Cache persisted at `path`; loads existing entries when present.
    pub fn with_disk_cache(inner: P, path: PathBuf) -> Result<Self, RetrievalError> {
        let entries = if path.exists() {
            let raw = std::fs::read_to_string(&path)?;
            serde_json::from_str::<CacheFile>(&raw)?.entries
        } else {
            HashMap::new()
        };
        Ok(Self { inner, state: Mutex::new(CacheState { entries, path: Some(path) }) })
    }

    fn key(&self, text: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        format!("{}:{:x}", self.inner.provider_id(), hasher.finalize())
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let key = self.key(text);
        let mut state = self.state.lock().expect("cache lock");
        if let Some(hit) = state.entries.get(&key) {
            return Ok(hit.clone());
        }
        let vec = self.inner.embed(text)?;
        state.entries.insert(key, vec.clone());
        if let Some(path) = state.path.clone() {
            let file = CacheFile { entries: state.entries.clone() };
            std::fs::write(path, serde_json::to_string(&file)?)?;
        }
        Ok(vec)
    }

    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }
}
