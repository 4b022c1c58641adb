//! Chunk-induced overlap detection and leakage-free train/validation splits.
//!
//! Chunks cut from the same conversation share verbatim utterances, so a
//! naive split leaks held-out text into training data. The split here is a
//! greedy iterative inclusion pass: pool samples are admitted in input order
//! unless they share a match unit with any held-out sample.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::DialogueSample;

/// What counts as a shared unit between two samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchUnit {
    /// A single utterance text.
    #[default]
    SingleUtterance,
    /// Two contiguous utterance texts, joined.
    UtterancePair,
}

/// Overlap criterion: two samples overlap when they share at least one
/// match unit whose normalized text has at least `min_tokens` tokens.
#[derive(Debug, Clone)]
pub struct OverlapPolicy {
    /// Minimum token count for a unit to qualify; short backchannels
    /// ("ok", "yes") stay below this and never trigger exclusion.
    pub min_tokens: usize,
    /// Lowercase and collapse whitespace before comparing.
    pub normalize: bool,
    pub match_unit: MatchUnit,
}

impl Default for OverlapPolicy {
    fn default() -> Self {
        Self { min_tokens: 3, normalize: true, match_unit: MatchUnit::SingleUtterance }
    }
}

impl OverlapPolicy {
    fn normalize_text(&self, text: &str) -> String {
        if self.normalize {
            text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
        } else {
            text.to_owned()
        }
    }

    /// Qualifying match units of a sample (context plus response).
    pub fn units(&self, sample: &DialogueSample) -> Vec<String> {
        let texts: Vec<String> = sample
            .context
            .iter()
            .chain(sample.response.iter())
            .map(|u| self.normalize_text(&u.text))
            .collect();
        let qualifies = |unit: &String| unit.split_whitespace().count() >= self.min_tokens;
        match self.match_unit {
            MatchUnit::SingleUtterance => texts.into_iter().filter(|t| qualifies(t)).collect(),
            MatchUnit::UtterancePair => texts
                .windows(2)
                .map(|w| format!("{}\n{}", w[0], w[1]))
                .filter(|t| qualifies(t))
                .collect(),
        }
    }
}

/// True iff `a` and `b` share at least one qualifying match unit.
/// Symmetric by construction.
pub fn samples_overlap(a: &DialogueSample, b: &DialogueSample, policy: &OverlapPolicy) -> bool {
    let units_a: std::collections::HashSet<String> = policy.units(a).into_iter().collect();
    policy.units(b).iter().any(|u| units_a.contains(u))
}

/// A pool sample rejected by the split, paired with the id of the first
/// held-out sample it conflicts with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedSample {
    pub sample: DialogueSample,
    pub conflicts_with: String,
}

/// Outcome of [`iterative_inclusion_split`]: included and excluded samples
/// partition the input pool.
#[derive(Debug, Clone, Default)]
pub struct SplitResult {
    pub included: Vec<DialogueSample>,
    pub excluded: Vec<ExcludedSample>,
}

/// Greedy first-fit split: walk the pool in input order and include every
/// sample that overlaps no held-out sample. Deterministic for identical
/// inputs and policy.
pub fn iterative_inclusion_split(
    pool: &[DialogueSample],
    held_out: &[DialogueSample],
    policy: &OverlapPolicy,
) -> SplitResult {
    // unit -> index of the first held-out sample contributing it
    let mut unit_owner: HashMap<String, usize> = HashMap::new();
    for (idx, d) in held_out.iter().enumerate() {
        for unit in policy.units(d) {
            unit_owner.entry(unit).or_insert(idx);
        }
    }

    let mut result = SplitResult::default();
    for sample in pool {
        let conflict = policy
            .units(sample)
            .iter()
            .filter_map(|u| unit_owner.get(u).copied())
            .min();
        match conflict {
            None => result.included.push(sample.clone()),
            Some(idx) => result.excluded.push(ExcludedSample {
                sample: sample.clone(),
                conflicts_with: held_out[idx].id.clone(),
            }),
        }
    }
    result
}

/// One cross-split overlap: sample `id_a` of `split_a` shares a unit with
/// sample `id_b` of `split_b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub split_a: String,
    pub id_a: String,
    pub split_b: String,
    pub id_b: String,
}

/// Exhaustive cross-split overlap audit. Returns one tuple per conflicting
/// pair, in deterministic order (split order, then sample order). Empty iff
/// the splits are mutually overlap-free.
pub fn leakage_report(
    splits: &[(String, Vec<DialogueSample>)],
    policy: &OverlapPolicy,
) -> Vec<Conflict> {
    let mut conflicts = Vec::new();
    for i in 0..splits.len() {
        for j in (i + 1)..splits.len() {
            let (name_a, samples_a) = &splits[i];
            let (name_b, samples_b) = &splits[j];
            // unit -> ordered ids in split b
            let mut unit_ids: HashMap<String, Vec<usize>> = HashMap::new();
            for (idx, d) in samples_b.iter().enumerate() {
                for unit in policy.units(d) {
                    unit_ids.entry(unit).or_default().push(idx);
                }
            }
            for a in samples_a {
                let mut hit: Vec<usize> = policy
                    .units(a)
                    .iter()
                    .filter_map(|u| unit_ids.get(u))
                    .flatten()
                    .copied()
                    .collect();
                hit.sort_unstable();
                hit.dedup();
                for idx in hit {
                    conflicts.push(Conflict {
                        split_a: name_a.clone(),
                        id_a: a.id.clone(),
                        split_b: name_b.clone(),
                        id_b: samples_b[idx].id.clone(),
                    });
                }
            }
        }
    }
    conflicts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn sample(id: &str, texts: &[&str]) -> DialogueSample {
        let mut utts: Vec<Utterance> =
            texts.iter().map(|t| Utterance::new("student", *t)).collect();
        let response = utts.pop();
        DialogueSample {
            id: id.to_owned(),
            context: if utts.is_empty() {
                vec![Utterance::new("student", "filler context line")]
            } else {
                utts
            },
            response: response.map(|u| Utterance::new("teacher", u.text)),
        }
    }

    #[test]
    fn shared_qualifying_utterance_overlaps() {
        let a = sample("a", &["hello over there", "that's bad, charger must be ___?"]);
        let b = sample("b", &["different opener text", "that's bad, charger must be ___?"]);
        assert!(samples_overlap(&a, &b, &OverlapPolicy::default()));
    }

    #[test]
    fn disjoint_texts_do_not_overlap() {
        let a = sample("a", &["alpha beta gamma", "delta epsilon zeta"]);
        let b = sample("b", &["one two three", "four five six"]);
        assert!(!samples_overlap(&a, &b, &OverlapPolicy::default()));
    }

    #[test]
    fn short_backchannel_does_not_overlap() {
        let a = sample("a", &["first unique line here", "ok"]);
        let b = sample("b", &["second unique line here", "ok"]);
        assert!(!samples_overlap(&a, &b, &OverlapPolicy::default()));
    }

    #[test]
    fn normalization_folds_case_and_whitespace() {
        let a = sample("a", &["x y", "That's   BAD, charger must be ___?"]);
        let b = sample("b", &["z w", "that's bad, charger must be ___?"]);
        assert!(samples_overlap(&a, &b, &OverlapPolicy::default()));
        let strict = OverlapPolicy { normalize: false, ..OverlapPolicy::default() };
        assert!(!samples_overlap(&a, &b, &strict));
    }

    #[test]
    fn pair_unit_requires_contiguous_match() {
        let policy = OverlapPolicy { match_unit: MatchUnit::UtterancePair, ..Default::default() };
        let a = sample("a", &["shared line one", "shared line two"]);
        let b = sample("b", &["shared line one", "shared line two"]);
        let c = sample("c", &["shared line one", "unrelated reply text"]);
        assert!(samples_overlap(&a, &b, &policy));
        assert!(!samples_overlap(&a, &c, &policy));
    }

    #[test]
    fn split_excludes_overlapping_pool_sample() {
        let p1 = sample("p1", &["context words here", "we will meet tomorrow at noon"]);
        let p2 = sample("p2", &["fully disjoint context", "fully disjoint reply text"]);
        let d1 = sample("d1", &["other context line", "we will meet tomorrow at noon"]);
        let result =
            iterative_inclusion_split(&[p1, p2.clone()], &[d1], &OverlapPolicy::default());
        assert_eq!(result.included, vec![p2]);
        assert_eq!(result.excluded.len(), 1);
        assert_eq!(result.excluded[0].sample.id, "p1");
        assert_eq!(result.excluded[0].conflicts_with, "d1");
    }

    #[test]
    fn empty_held_out_includes_everything() {
        let pool = vec![
            sample("p1", &["aa bb cc", "dd ee ff"]),
            sample("p2", &["gg hh ii", "jj kk ll"]),
        ];
        let result = iterative_inclusion_split(&pool, &[], &OverlapPolicy::default());
        assert_eq!(result.included, pool);
        assert!(result.excluded.is_empty());
    }

    #[test]
    fn empty_pool_yields_empty_result() {
        let held = vec![sample("d", &["aa bb cc", "dd ee ff"])];
        let result = iterative_inclusion_split(&[], &held, &OverlapPolicy::default());
        assert!(result.included.is_empty());
        assert!(result.excluded.is_empty());
    }

    #[test]
    fn excluded_entry_carries_first_conflicting_id() {
        let p = sample("p", &["line shared with later", "line shared with earlier"]);
        let d0 = sample("d0", &["x y z", "line shared with earlier"]);
        let d1 = sample("d1", &["x y z2", "line shared with later"]);
        let result = iterative_inclusion_split(&[p], &[d0, d1], &OverlapPolicy::default());
        assert_eq!(result.excluded[0].conflicts_with, "d0");
    }

    fn synthetic_pool(n: usize, seed: u64) -> (Vec<DialogueSample>, Vec<DialogueSample>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let held: Vec<DialogueSample> = (0..n / 10)
            .map(|i| {
                sample(
                    &format!("d{i}"),
                    &[
                        &format!("held context {i} alpha beta"),
                        &format!("held reply {i} gamma delta"),
                    ],
                )
            })
            .collect();
        let pool: Vec<DialogueSample> = (0..n)
            .map(|i| {
                // Roughly a third of the pool gets a planted held-out line.
                if rng.gen_bool(0.33) && !held.is_empty() {
                    let victim = rng.gen_range(0..held.len());
                    sample(
                        &format!("p{i}"),
                        &[
                            &format!("pool context {i} one two"),
                            &format!("held reply {victim} gamma delta"),
                        ],
                    )
                } else {
                    sample(
                        &format!("p{i}"),
                        &[
                            &format!("pool context {i} one two"),
                            &format!("pool reply {i} three four"),
                        ],
                    )
                }
            })
            .collect();
        (pool, held)
    }

    #[test]
    fn split_verified_by_exhaustive_pairwise_oracle() {
        let (pool, held) = synthetic_pool(200, 7);
        let policy = OverlapPolicy::default();
        let result = iterative_inclusion_split(&pool, &held, &policy);
        // Oracle: brute-force pairwise check over every (included, held) pair.
        for t in &result.included {
            for d in &held {
                assert!(!samples_overlap(t, d, &policy), "included {} overlaps {}", t.id, d.id);
            }
        }
        // Greedy maximality: every excluded sample conflicts with something.
        for e in &result.excluded {
            assert!(
                held.iter().any(|d| samples_overlap(&e.sample, d, &policy)),
                "excluded {} has no conflict",
                e.sample.id
            );
        }
        assert_eq!(result.included.len() + result.excluded.len(), pool.len());
    }

    #[test]
    fn overlap_is_symmetric_on_generated_pairs() {
        let (pool, held) = synthetic_pool(60, 11);
        let policy = OverlapPolicy::default();
        for a in pool.iter().take(20) {
            for b in held.iter().chain(pool.iter().take(20)) {
                assert_eq!(
                    samples_overlap(a, b, &policy),
                    samples_overlap(b, a, &policy),
                    "asymmetric for {} / {}",
                    a.id,
                    b.id
                );
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let (pool, held) = synthetic_pool(100, 3);
        let policy = OverlapPolicy::default();
        let r1 = iterative_inclusion_split(&pool, &held, &policy);
        let r2 = iterative_inclusion_split(&pool, &held, &policy);
        assert_eq!(r1.included, r2.included);
        assert_eq!(r1.excluded, r2.excluded);
    }

    #[test]
    fn leakage_report_empty_on_disjoint_splits() {
        let a = vec![sample("a1", &["aa bb cc", "dd ee ff"])];
        let b = vec![sample("b1", &["gg hh ii", "jj kk ll"])];
        let report = leakage_report(
            &[("train".to_owned(), a), ("dev".to_owned(), b)],
            &OverlapPolicy::default(),
        );
        assert!(report.is_empty());
    }

    #[test]
    fn leakage_report_finds_planted_conflict() {
        let a = vec![sample("a1", &["aa bb cc", "the planted shared line"])];
        let b = vec![
            sample("b1", &["gg hh ii", "jj kk ll"]),
            sample("b2", &["mm nn oo", "the planted shared line"]),
        ];
        let report = leakage_report(
            &[("train".to_owned(), a), ("dev".to_owned(), b)],
            &OverlapPolicy::default(),
        );
        assert_eq!(report.len(), 1);
        assert_eq!(
            report[0],
            Conflict {
                split_a: "train".to_owned(),
                id_a: "a1".to_owned(),
                split_b: "dev".to_owned(),
                id_b: "b2".to_owned(),
            }
        );
    }

    #[test]
    fn leakage_report_matches_bruteforce_oracle() {
        let (pool, held) = synthetic_pool(80, 23);
        let policy = OverlapPolicy::default();
        let report = leakage_report(
            &[("pool".to_owned(), pool.clone()), ("held".to_owned(), held.clone())],
            &policy,
        );
        let mut expected = Vec::new();
        for a in &pool {
            for b in &held {
                if samples_overlap(a, b, &policy) {
                    expected.push((a.id.clone(), b.id.clone()));
                }
            }
        }
        let got: Vec<(String, String)> =
            report.iter().map(|c| (c.id_a.clone(), c.id_b.clone())).collect();
        assert_eq!(got, expected);
    }
}
