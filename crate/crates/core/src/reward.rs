//! Composite pedagogical reward: greedy-matching token-similarity scores
//! (BERTScore-style precision/recall/F1 over pluggable token embeddings)
//! blended with a dialogue-quality ranker score.
//!
//! Also houses the metric-contrast diagnostic showing that semantically
//! opposing responses can be ranked alike by token-similarity alone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("cannot score empty {side} text")]
    EmptyTokenization { side: &'static str },
    #[error("non-finite input to composite reward")]
    NonFinite,
    #[error("ranker failure: {0}")]
    Ranker(String),
}

/// Precision / recall / F1 triple. F1 is the harmonic mean, defined as 0
/// when precision + recall is not positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// Per-token contextual embeddings for a text.
pub trait TokenEmbedder {
    /// Tokenize `text` and return one vector per token. Token and vector
    /// counts must match; output must be deterministic.
    fn embed_tokens(&self, text: &str) -> (Vec<String>, Vec<Vec<f64>>);

    fn model_id(&self) -> &str {
        "roberta-large"
    }
}

/// Dialogue response quality score in [0, 1], higher is better.
pub trait DialogueRanker {
    fn score(&self, context: &str, response: &str) -> Result<f64, RewardError>;

    fn model_id(&self) -> &str {
        "microsoft/DialogRPT-updown"
    }

    /// Index of the score label in the ranker's output vector.
    fn label_index(&self) -> usize {
        0
    }
}

/// Coefficients of the composite reward (equal split by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub bertscore_coeff: f64,
    pub dialogrpt_coeff: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { bertscore_coeff: 0.5, dialogrpt_coeff: 0.5 }
    }
}

/// Optional scoring variants. Both default off; the plain greedy-matching
/// score uses uniform token weights and raw cosine values.
#[derive(Debug, Clone, Default)]
pub struct BertScoreOptions {
    /// Per-token importance weights; tokens missing from the table weigh 1.
    pub idf: Option<HashMap<String, f64>>,
    /// Rescale scores as (s - b) / (1 - b) against a baseline b.
    pub rescale_baseline: Option<f64>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        // Zero-norm vectors keep cosine 0 against everything.
        vec![0.0; v.len()]
    }
}

fn greedy_side(
    from: &[Vec<f64>],
    against: &[Vec<f64>],
    weights: Option<&[f64]>,
) -> f64 {
    let mut weighted_sum = 0.0;
    let mut weight_total = 0.0;
    for (i, u) in from.iter().enumerate() {
        let best = against
            .iter()
            .map(|v| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let w = weights.map_or(1.0, |ws| ws[i]);
        weighted_sum += w * best;
        weight_total += w;
    }
    if weight_total > 0.0 {
        weighted_sum / weight_total
    } else {
        0.0
    }
}

/// Greedy-matching similarity score with default options: uniform weights,
/// no baseline rescaling.
pub fn bertscore<E: TokenEmbedder>(
    candidate: &str,
    reference: &str,
    embedder: &E,
) -> Result<ScoreTriple, RewardError> {
    bertscore_with(candidate, reference, embedder, &BertScoreOptions::default())
}

/// Greedy-matching similarity score.
///
/// Precision is the mean over candidate tokens of the maximum cosine
/// similarity against any reference token; recall is the mirror image over
/// reference tokens. Zero-norm token vectors contribute 0.
pub fn bertscore_with<E: TokenEmbedder>(
    candidate: &str,
    reference: &str,
    embedder: &E,
    opts: &BertScoreOptions,
) -> Result<ScoreTriple, RewardError> {
    let (cand_tokens, cand_vecs) = embedder.embed_tokens(candidate);
    let (ref_tokens, ref_vecs) = embedder.embed_tokens(reference);
    if cand_tokens.is_empty() {
        return Err(RewardError::EmptyTokenization { side: "candidate" });
    }
    if ref_tokens.is_empty() {
        return Err(RewardError::EmptyTokenization { side: "reference" });
    }

    let cand_norm: Vec<Vec<f64>> = cand_vecs.iter().map(|v| normalize(v)).collect();
    let ref_norm: Vec<Vec<f64>> = ref_vecs.iter().map(|v| normalize(v)).collect();

    let idf_weights = |tokens: &[String]| -> Option<Vec<f64>> {
        opts.idf.as_ref().map(|table| {
            tokens.iter().map(|t| table.get(t).copied().unwrap_or(1.0)).collect()
        })
    };
    let cand_weights = idf_weights(&cand_tokens);
    let ref_weights = idf_weights(&ref_tokens);

    let mut precision = greedy_side(&cand_norm, &ref_norm, cand_weights.as_deref());
    let mut recall = greedy_side(&ref_norm, &cand_norm, ref_weights.as_deref());

    if let Some(b) = opts.rescale_baseline {
        precision = (precision - b) / (1.0 - b);
        recall = (recall - b) / (1.0 - b);
    }

    Ok(ScoreTriple::from_precision_recall(precision, recall))
}

/// Score a response against its context with the ranker, clamped to [0, 1].
pub fn dialogue_quality<R: DialogueRanker>(
    context: &str,
    response: &str,
    ranker: &R,
) -> Result<f64, RewardError> {
    let raw = ranker.score(context, response)?;
    if !(0.0..=1.0).contains(&raw) {
        tracing::warn!(raw, "ranker score outside [0, 1], clamping");
    }
    Ok(raw.clamp(0.0, 1.0))
}

/// Linear blend of the two metric scores: `bertscore_coeff * b +
/// dialogrpt_coeff * d`.
pub fn composite_reward(b: f64, d: f64, config: &RewardConfig) -> Result<f64, RewardError> {
    if !b.is_finite() || !d.is_finite() {
        return Err(RewardError::NonFinite);
    }
    Ok(config.bertscore_coeff * b + config.dialogrpt_coeff * d)
}

/// One row of the metric-contrast table.
#[derive(Debug, Clone, Serialize)]
pub struct ContrastRow {
    pub candidate: String,
    pub scores: ScoreTriple,
    pub quality: f64,
    pub reward: f64,
}

/// Per-candidate scores sorted by F1, plus a flag raised when the top two
/// candidates score within `threshold` of each other — opposing responses
/// ranked alike.
#[derive(Debug, Clone, Serialize)]
pub struct ContrastReport {
    pub rows: Vec<ContrastRow>,
    pub top_gap: Option<f64>,
    pub ranked_alike: bool,
    pub threshold: f64,
}

impl ContrastReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Candidate | Precision | Recall | F1 | Quality | Reward |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                row.candidate,
                row.scores.precision,
                row.scores.recall,
                row.scores.f1,
                row.quality,
                row.reward
            ));
        }
        if let Some(gap) = self.top_gap {
            out.push_str(&format!("\nTop-2 F1 gap: {gap:.4}\n"));
            if self.ranked_alike {
                out.push_str("Flag: opposing responses ranked alike\n");
            }
        }
        out
    }
}

/// Default F1 gap under which two leading candidates count as
/// indistinguishable to the similarity metric.
pub const RANKED_ALIKE_THRESHOLD: f64 = 0.02;

/// Score every candidate against the reference and rank by F1. Flags the
/// report when the two leading candidates land within the threshold.
pub fn metric_contrast_report<E: TokenEmbedder, R: DialogueRanker>(
    context: &str,
    candidates: &[String],
    reference: &str,
    embedder: &E,
    ranker: &R,
) -> Result<ContrastReport, RewardError> {
    metric_contrast_report_with(
        context,
        candidates,
        reference,
        embedder,
        ranker,
        &RewardConfig::default(),
        RANKED_ALIKE_THRESHOLD,
    )
}

pub fn metric_contrast_report_with<E: TokenEmbedder, R: DialogueRanker>(
    context: &str,
    candidates: &[String],
    reference: &str,
    embedder: &E,
    ranker: &R,
    config: &RewardConfig,
    threshold: f64,
) -> Result<ContrastReport, RewardError> {
    let mut rows = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let scores = bertscore(candidate, reference, embedder)?;
        let quality = dialogue_quality(context, candidate, ranker)?;
        let reward = composite_reward(scores.f1, quality, config)?;
        rows.push(ContrastRow { candidate: candidate.clone(), scores, quality, reward });
    }
    rows.sort_by(|a, b| b.scores.f1.partial_cmp(&a.scores.f1).unwrap_or(std::cmp::Ordering::Equal));
    let top_gap = (rows.len() >= 2).then(|| rows[0].scores.f1 - rows[1].scores.f1);
    let ranked_alike = top_gap.is_some_and(|g| g < threshold);
    Ok(ContrastReport { rows, top_gap, ranked_alike, threshold })
}

/// Deterministic stand-ins for the neural embedder and ranker, used in
/// tests and mock pipelines.
pub mod stub {
    use super::*;
    use sha2::{Digest, Sha256};

    /// Whitespace tokens mapped to unit vectors derived from a hash of the
    /// token text. Identical tokens embed identically; distinct tokens are
    /// nearly orthogonal in expectation.
    #[derive(Debug, Clone)]
    pub struct HashTokenEmbedder {
        pub dim: usize,
    }

    impl Default for HashTokenEmbedder {
        fn default() -> Self {
            Self { dim: 16 }
        }
    }

    pub(crate) fn hash_vector(token: &str, dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(dim);
        let mut counter = 0u32;
        while out.len() < dim {
            let mut hasher = Sha256::new();
            hasher.update(token.as_bytes());
            hasher.update(counter.to_le_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(8) {
                if out.len() == dim {
                    break;
                }
                let bits = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                // Map to (-1, 1)
                out.push((bits as f64 / u64::MAX as f64) * 2.0 - 1.0);
            }
            counter += 1;
        }
        out
    }

    impl TokenEmbedder for HashTokenEmbedder {
        fn embed_tokens(&self, text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
            let vecs = tokens.iter().map(|t| hash_vector(t, self.dim)).collect();
            (tokens, vecs)
        }

        fn model_id(&self) -> &str {
            "stub-hash-embedder"
        }
    }

    /// Explicit word-to-vector table; unknown words fall back to hash
    /// vectors of the table's dimension.
    #[derive(Debug, Clone)]
    pub struct TableEmbedder {
        table: HashMap<String, Vec<f64>>,
        dim: usize,
    }

    impl TableEmbedder {
        pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
            let table: HashMap<String, Vec<f64>> = entries.into_iter().collect();
            let dim = table.values().next().map_or(8, Vec::len);
            Self { table, dim }
        }

        /// Embedding table engineered so that two opposing candidates score
        /// nearly alike against the reference "plugged out":
        /// "plugged in" and "disconnected" land within 0.02 F1 of each other.
        pub fn antonym_fixture() -> Self {
            let z_in = (1.0_f64 - 0.25 - 0.4225).sqrt();
            Self::new([
                ("plugged".to_owned(), vec![1.0, 0.0, 0.0]),
                ("out".to_owned(), vec![0.6, 0.8, 0.0]),
                ("in".to_owned(), vec![0.5, 0.65, z_in]),
                (
                    "disconnected".to_owned(),
                    vec![1.6 / 3.2_f64.sqrt(), 0.8 / 3.2_f64.sqrt(), 0.0],
                ),
            ])
        }
    }

    impl TokenEmbedder for TableEmbedder {
        fn embed_tokens(&self, text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
            let vecs = tokens
                .iter()
                .map(|t| {
                    self.table
                        .get(&t.to_lowercase())
                        .cloned()
                        .unwrap_or_else(|| hash_vector(t, self.dim))
                })
                .collect();
            (tokens, vecs)
        }

        fn model_id(&self) -> &str {
            "stub-table-embedder"
        }
    }

    /// Always returns the same score; handy for plumbing tests.
    #[derive(Debug, Clone, Copy)]
    pub struct ConstantRanker(pub f64);

    impl DialogueRanker for ConstantRanker {
        fn score(&self, _context: &str, _response: &str) -> Result<f64, RewardError> {
            Ok(self.0)
        }

        fn model_id(&self) -> &str {
            "stub-constant-ranker"
        }
    }

    /// Deterministic heuristic quality score: favors responses of moderate
    /// length that pick up words from the context.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct HeuristicRanker;

    impl DialogueRanker for HeuristicRanker {
        fn score(&self, context: &str, response: &str) -> Result<f64, RewardError> {
            let resp_words: Vec<String> =
                response.split_whitespace().map(str::to_lowercase).collect();
            if resp_words.is_empty() {
                return Ok(0.0);
            }
            let ctx_words: std::collections::HashSet<String> =
                context.split_whitespace().map(str::to_lowercase).collect();
            let overlap =
                resp_words.iter().filter(|w| ctx_words.contains(*w)).count() as f64
                    / resp_words.len() as f64;
            let length = (resp_words.len() as f64 / 12.0).min(1.0);
            Ok((0.5 * length + 0.5 * overlap).clamp(0.0, 1.0))
        }

        fn model_id(&self) -> &str {
            "stub-heuristic-ranker"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::*;
    use super::*;

    #[test]
    fn identical_texts_score_ones() {
        let embedder = HashTokenEmbedder::default();
        let s = bertscore("the quick brown fox", "the quick brown fox", &embedder).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 1.0).abs() < 1e-12);
        assert!((s.f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_single_token_scores_zero() {
        let embedder = TableEmbedder::new([
            ("a".to_owned(), vec![1.0, 0.0]),
            ("b".to_owned(), vec![0.0, 1.0]),
        ]);
        let s = bertscore("a", "b", &embedder).unwrap();
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn empty_candidate_is_an_error() {
        let embedder = HashTokenEmbedder::default();
        assert!(matches!(
            bertscore("", "some reference", &embedder),
            Err(RewardError::EmptyTokenization { side: "candidate" })
        ));
        assert!(matches!(
            bertscore("some candidate", "   ", &embedder),
            Err(RewardError::EmptyTokenization { side: "reference" })
        ));
    }

    #[test]
    fn zero_norm_token_contributes_zero() {
        let embedder = TableEmbedder::new([
            ("z".to_owned(), vec![0.0, 0.0]),
            ("a".to_owned(), vec![1.0, 0.0]),
        ]);
        let s = bertscore("z", "a", &embedder).unwrap();
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.f1, 0.0);
    }

    /// Independent oracle: plain double loop over token pairs with its own
    /// cosine computed from raw (unnormalized) vectors.
    fn oracle_bertscore(cand: &str, refr: &str, embedder: &impl TokenEmbedder) -> ScoreTriple {
        fn cosine(u: &[f64], v: &[f64]) -> f64 {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                dot / (nu * nv)
            }
        }
        let (_, cv) = embedder.embed_tokens(cand);
        let (_, rv) = embedder.embed_tokens(refr);
        let mut p = 0.0;
        for u in &cv {
            let mut best = f64::NEG_INFINITY;
            for v in &rv {
                best = best.max(cosine(u, v));
            }
            p += best;
        }
        p /= cv.len() as f64;
        let mut r = 0.0;
        for v in &rv {
            let mut best = f64::NEG_INFINITY;
            for u in &cv {
                best = best.max(cosine(v, u));
            }
            r += best;
        }
        r /= rv.len() as f64;
        ScoreTriple::from_precision_recall(p, r)
    }

    fn random_text(rng: &mut impl rand::Rng, max_tokens: usize) -> String {
        let n = rng.gen_range(1..=max_tokens);
        (0..n).map(|_| format!("w{}", rng.gen_range(0..40))).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_fixtures() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let embedder = HashTokenEmbedder::default();
        for _ in 0..200 {
            let cand = random_text(&mut rng, 8);
            let refr = random_text(&mut rng, 6);
            let got = bertscore(&cand, &refr, &embedder).unwrap();
            let want = oracle_bertscore(&cand, &refr, &embedder);
            assert!((got.precision - want.precision).abs() < 1e-9);
            assert!((got.recall - want.recall).abs() < 1e-9);
            assert!((got.f1 - want.f1).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let embedder = HashTokenEmbedder::default();
        for _ in 0..50 {
            let a = random_text(&mut rng, 10);
            let b = random_text(&mut rng, 10);
            let ab = bertscore(&a, &b, &embedder).unwrap();
            let ba = bertscore(&b, &a, &embedder).unwrap();
            assert!((ab.precision - ba.recall).abs() < 1e-12);
            assert!((ab.recall - ba.precision).abs() < 1e-12);
            assert!((ab.f1 - ba.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn idf_weights_change_the_score() {
        let embedder = TableEmbedder::new([
            ("hit".to_owned(), vec![1.0, 0.0]),
            ("miss".to_owned(), vec![0.0, 1.0]),
        ]);
        let plain = bertscore("hit miss", "hit", &embedder).unwrap();
        assert!((plain.precision - 0.5).abs() < 1e-12);
        let opts = BertScoreOptions {
            idf: Some([("hit".to_owned(), 3.0)].into_iter().collect()),
            rescale_baseline: None,
        };
        let weighted = bertscore_with("hit miss", "hit", &embedder, &opts).unwrap();
        // hit weighs 3, miss weighs 1: precision = 3/4.
        assert!((weighted.precision - 0.75).abs() < 1e-12);
    }

    #[test]
    fn baseline_rescaling_shifts_scores() {
        let embedder = HashTokenEmbedder::default();
        let opts = BertScoreOptions { idf: None, rescale_baseline: Some(0.5) };
        let s = bertscore_with("same text", "same text", &embedder, &opts).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-12, "perfect match is invariant under rescaling");
    }

    #[test]
    fn constant_ranker_passes_through() {
        assert_eq!(dialogue_quality("ctx", "resp", &ConstantRanker(0.5)).unwrap(), 0.5);
    }

    #[test]
    fn out_of_range_ranker_is_clamped() {
        assert_eq!(dialogue_quality("ctx", "resp", &ConstantRanker(1.7)).unwrap(), 1.0);
        assert_eq!(dialogue_quality("ctx", "resp", &ConstantRanker(-0.2)).unwrap(), 0.0);
    }

    #[test]
    fn heuristic_ranker_is_order_independent() {
        let ranker = HeuristicRanker;
        let pairs = [
            ("what is the capital", "the capital is paris"),
            ("hello there", "hi"),
            ("plug it in", "you should plug it in now"),
        ];
        let one_by_one: Vec<f64> =
            pairs.iter().map(|(c, r)| dialogue_quality(c, r, &ranker).unwrap()).collect();
        let reversed: Vec<f64> = pairs
            .iter()
            .rev()
            .map(|(c, r)| dialogue_quality(c, r, &ranker).unwrap())
            .collect();
        assert_eq!(one_by_one[0], reversed[2]);
        assert_eq!(one_by_one[2], reversed[0]);
    }

    #[test]
    fn composite_reward_arithmetic() {
        let cfg = RewardConfig::default();
        assert!((composite_reward(1.0, 1.0, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!((composite_reward(0.94, 0.63, &cfg).unwrap() - 0.785).abs() < 1e-12);
        // Equal coefficients make the blend symmetric.
        let (b, d) = (0.3, 0.8);
        assert!(
            (composite_reward(b, d, &cfg).unwrap() - composite_reward(d, b, &cfg).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn composite_reward_rejects_non_finite() {
        let cfg = RewardConfig::default();
        assert!(composite_reward(f64::NAN, 0.5, &cfg).is_err());
        assert!(composite_reward(0.5, f64::INFINITY, &cfg).is_err());
    }

    #[test]
    fn contrast_report_flags_antonyms_ranked_alike() {
        let embedder = TableEmbedder::antonym_fixture();
        let report = metric_contrast_report(
            "someone plugged the charger in",
            &["plugged in".to_owned(), "disconnected".to_owned()],
            "plugged out",
            &embedder,
            &HeuristicRanker,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        let gap = report.top_gap.unwrap();
        assert!(gap < 0.02, "expected near-equal F1, gap was {gap}");
        assert!(report.ranked_alike);
        assert!(report.rows.iter().all(|r| r.scores.f1 > 0.85), "both scores should be high");
        assert!(report.to_markdown().contains("ranked alike"));
    }

    #[test]
    fn contrast_report_single_candidate() {
        let embedder = HashTokenEmbedder::default();
        let report = metric_contrast_report(
            "ctx",
            &["plugged out".to_owned()],
            "plugged out",
            &embedder,
            &ConstantRanker(0.5),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!((report.rows[0].scores.f1 - 1.0).abs() < 1e-12);
        assert!(report.top_gap.is_none());
        assert!(!report.ranked_alike);
    }

    #[test]
    fn contrast_report_sorted_by_f1() {
        let embedder = TableEmbedder::antonym_fixture();
        let report = metric_contrast_report(
            "ctx",
            &["disconnected".to_owned(), "plugged out".to_owned(), "plugged in".to_owned()],
            "plugged out",
            &embedder,
            &ConstantRanker(0.5),
        )
        .unwrap();
        let f1s: Vec<f64> = report.rows.iter().map(|r| r.scores.f1).collect();
        assert!(f1s.windows(2).all(|w| w[0] >= w[1]), "rows must be sorted: {f1s:?}");
        assert_eq!(report.rows[0].candidate, "plugged out");
    }
}
