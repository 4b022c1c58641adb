//! A tiny differentiable sequence model with explicit logits.
//!
//! The model is log-linear: next-token logits are the sum of a bigram row
//! (indexed by the previous token) and a positional row, with a matching
//! log-linear scalar value head. Gradients are analytic, which keeps
//! finite-difference checks of the training objectives feasible. It backs
//! the supervised fine-tuning and PPO loops at desk scale behind the same
//! interfaces a full-size model would implement.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generation::{
    FinishReason, GeneratedResponse, GenerationError, GenerationParams, PromptInput,
    TextGenerator, Usage,
};
use crate::optim::AdamW;
use crate::ppo::{log_softmax, DifferentiablePolicy};
use crate::sft::{LossScope, SFTExample, SftError, TrainableGenerator};

/// Policy state: the previous token and how many tokens were consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyState {
    pub prev: usize,
    pub pos: usize,
}

/// In-memory snapshot of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLmSnapshot {
    params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TinyLmManifest {
    kind: String,
    vocab_size: usize,
    max_positions: usize,
    eos: Option<usize>,
    char_mode: bool,
}

/// The tiny trainable model. Parameters live in one flat vector:
/// bigram logits (V x V), positional logits (P x V), then the value-head
/// weights per previous token (V) and per position (P).
#[derive(Debug, Clone)]
pub struct TinyLm {
    vocab: Vec<String>,
    lookup: HashMap<String, usize>,
    max_positions: usize,
    eos: Option<usize>,
    bos: usize,
    unk: Option<usize>,
    char_mode: bool,
    params: Vec<f64>,
    sft_optimizer: AdamW,
}

impl TinyLm {
    fn build(
        vocab: Vec<String>,
        max_positions: usize,
        eos: Option<usize>,
        bos: usize,
        unk: Option<usize>,
        char_mode: bool,
    ) -> Self {
        let v = vocab.len();
        let n_params = v * v + max_positions * v + v + max_positions;
        let lookup = vocab.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self {
            vocab,
            lookup,
            max_positions,
            eos,
            bos,
            unk,
            char_mode,
            params: vec![0.0; n_params],
            sft_optimizer: AdamW::new(n_params),
        }
    }

    /// Vocabulary of `n` numeric tokens `"0" .. "n-1"`; used by synthetic
    /// reinforcement-learning tasks.
    pub fn with_numeric_vocab(n: usize, max_positions: usize, eos: Option<usize>) -> Self {
        let vocab = (0..n).map(|i| i.to_string()).collect();
        Self::build(vocab, max_positions, eos, 0, None, false)
    }

    /// Character-level vocabulary fitted on `texts`, with begin/end/unknown
    /// specials at ids 0..=2.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], max_positions: usize) -> Self {
        let mut chars: Vec<char> =
            texts.iter().flat_map(|t| t.as_ref().chars()).collect::<Vec<_>>();
        chars.sort_unstable();
        chars.dedup();
        let mut vocab = vec!["<bos>".to_owned(), "<eos>".to_owned(), "<unk>".to_owned()];
        vocab.extend(chars.into_iter().map(|c| c.to_string()));
        Self::build(vocab, max_positions, Some(1), 0, Some(2), true)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        if self.char_mode {
            text.chars()
                .map(|c| {
                    self.lookup
                        .get(&c.to_string())
                        .copied()
                        .or(self.unk)
                        .unwrap_or(self.bos)
                })
                .collect()
        } else {
            text.split_whitespace()
                .map(|t| self.lookup.get(t).copied().unwrap_or(0))
                .collect()
        }
    }

    fn token_id(&self, token: &str) -> usize {
        self.lookup.get(token).copied().or(self.unk).unwrap_or(0)
    }

    fn vsize(&self) -> usize {
        self.vocab.len()
    }

    fn pos_index(&self, pos: usize) -> usize {
        pos.min(self.max_positions - 1)
    }

    fn bigram_row(&self, prev: usize) -> &[f64] {
        let v = self.vsize();
        &self.params[prev * v..(prev + 1) * v]
    }

    fn pos_row(&self, pos: usize) -> &[f64] {
        let v = self.vsize();
        let off = v * v + self.pos_index(pos) * v;
        &self.params[off..off + v]
    }

    fn value_offsets(&self) -> (usize, usize) {
        let v = self.vsize();
        let vb = v * v + self.max_positions * v;
        (vb, vb + v)
    }

    fn softmax_at(&self, state: &TinyState) -> Vec<f64> {
        log_softmax(&DifferentiablePolicy::logits(self, state))
            .iter()
            .map(|lp| lp.exp())
            .collect()
    }

    /// Per-example token ids plus the loss span, per the scope.
    fn example_ids(&self, example: &SFTExample) -> Vec<usize> {
        example.tokens.iter().map(|t| self.token_id(t)).collect()
    }

    fn batch_loss_and_grad(
        &self,
        batch: &[SFTExample],
        scope: LossScope,
        grad: Option<&mut Vec<f64>>,
    ) -> f64 {
        let v = self.vsize();
        let mut grad = grad;
        let mut nll = 0.0;
        let mut count = 0usize;

        // First pass to know the token count for mean scaling.
        for example in batch {
            let n = example.tokens.len();
            count += match scope {
                LossScope::FullSequence => n,
                LossScope::ResponseOnly => example.target_span.1 - example.target_span.0,
            };
        }
        if count == 0 {
            return 0.0;
        }

        for example in batch {
            let ids = self.example_ids(example);
            let mut state = TinyState { prev: self.bos, pos: 0 };
            for (t, &target) in ids.iter().enumerate() {
                let in_scope = match scope {
                    LossScope::FullSequence => true,
                    LossScope::ResponseOnly => {
                        t >= example.target_span.0 && t < example.target_span.1
                    }
                };
                if in_scope {
                    let logp = log_softmax(&DifferentiablePolicy::logits(self, &state));
                    nll -= logp[target];
                    if let Some(g) = grad.as_deref_mut() {
                        // d(-logp)/dlogit_i = p_i - [i == target]
                        let scale = 1.0 / count as f64;
                        let bigram_off = state.prev * v;
                        let pos_off = v * v + self.pos_index(state.pos) * v;
                        for i in 0..v {
                            let gi = scale * (logp[i].exp() - f64::from(i == target));
                            g[bigram_off + i] += gi;
                            g[pos_off + i] += gi;
                        }
                    }
                }
                state = TinyState { prev: target, pos: state.pos + 1 };
            }
        }
        nll / count as f64
    }
}

impl DifferentiablePolicy for TinyLm {
    type State = TinyState;

    fn vocab_size(&self) -> usize {
        self.vsize()
    }

    fn eos_token(&self) -> Option<usize> {
        self.eos
    }

    fn initial_state(&self, prompt: &[usize]) -> TinyState {
        TinyState { prev: prompt.last().copied().unwrap_or(self.bos), pos: prompt.len() }
    }

    fn next_state(&self, state: &TinyState, token: usize) -> TinyState {
        TinyState { prev: token, pos: state.pos + 1 }
    }

    fn logits(&self, state: &TinyState) -> Vec<f64> {
        self.bigram_row(state.prev)
            .iter()
            .zip(self.pos_row(state.pos))
            .map(|(b, p)| b + p)
            .collect()
    }

    fn value(&self, state: &TinyState) -> f64 {
        let (vb, vp) = self.value_offsets();
        self.params[vb + state.prev] + self.params[vp + self.pos_index(state.pos)]
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len());
        self.params.copy_from_slice(params);
    }

    fn accum_grad_logp(&self, state: &TinyState, token: usize, scale: f64, grad: &mut [f64]) {
        let v = self.vsize();
        let p = self.softmax_at(state);
        let bigram_off = state.prev * v;
        let pos_off = v * v + self.pos_index(state.pos) * v;
        for i in 0..v {
            let gi = scale * (f64::from(i == token) - p[i]);
            grad[bigram_off + i] += gi;
            grad[pos_off + i] += gi;
        }
    }

    fn accum_grad_entropy(&self, state: &TinyState, scale: f64, grad: &mut [f64]) {
        let v = self.vsize();
        let logp = log_softmax(&DifferentiablePolicy::logits(self, state));
        let entropy = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        let bigram_off = state.prev * v;
        let pos_off = v * v + self.pos_index(state.pos) * v;
        for i in 0..v {
            // dH/dlogit_i = -p_i (log p_i + H)
            let gi = scale * (-logp[i].exp() * (logp[i] + entropy));
            grad[bigram_off + i] += gi;
            grad[pos_off + i] += gi;
        }
    }

    fn accum_grad_value(&self, state: &TinyState, scale: f64, grad: &mut [f64]) {
        let (vb, vp) = self.value_offsets();
        grad[vb + state.prev] += scale;
        grad[vp + self.pos_index(state.pos)] += scale;
    }

    fn decode(&self, tokens: &[usize]) -> String {
        if self.char_mode {
            tokens
                .iter()
                .filter(|&&t| t > 2)
                .map(|&t| self.vocab[t].as_str())
                .collect()
        } else {
            tokens
                .iter()
                .map(|&t| self.vocab.get(t).map_or("?", |s| s.as_str()))
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

impl TrainableGenerator for TinyLm {
    type Snapshot = TinyLmSnapshot;

    fn loss_and_update(
        &mut self,
        batch: &[SFTExample],
        scope: LossScope,
        lr: f64,
    ) -> Result<f64, SftError> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.batch_loss_and_grad(batch, scope, Some(&mut grad));
        let mut params = std::mem::take(&mut self.params);
        self.sft_optimizer.step(&mut params, &grad, lr);
        self.params = params;
        Ok(loss)
    }

    fn eval_loss(&self, batch: &[SFTExample], scope: LossScope) -> Result<f64, SftError> {
        Ok(self.batch_loss_and_grad(batch, scope, None))
    }

    fn snapshot(&self) -> TinyLmSnapshot {
        TinyLmSnapshot { params: self.params.clone() }
    }

    fn restore(&mut self, snapshot: &TinyLmSnapshot) {
        assert_eq!(snapshot.params.len(), self.params.len());
        self.params = snapshot.params.clone();
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<(), SftError> {
        std::fs::create_dir_all(dir)?;
        let manifest = TinyLmManifest {
            kind: "tinylm".to_owned(),
            vocab_size: self.vsize(),
            max_positions: self.max_positions,
            eos: self.eos,
            char_mode: self.char_mode,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(dir.join("vocab.json"), serde_json::to_string(&self.vocab)?)?;
        std::fs::write(dir.join("params.json"), serde_json::to_string(&self.params)?)?;
        Ok(())
    }
}

impl TinyLm {
    /// Load a model saved by
    /// [`TrainableGenerator::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path) -> Result<Self, SftError> {
        let manifest: TinyLmManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let vocab: Vec<String> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
        let params: Vec<f64> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("params.json"))?)?;
        let (bos, unk) = if manifest.char_mode { (0, Some(2)) } else { (0, None) };
        let mut model =
            Self::build(vocab, manifest.max_positions, manifest.eos, bos, unk, manifest.char_mode);
        model.set_params(&params);
        Ok(model)
    }
}

fn sample_with_top_p(probs: &[f64], top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let u: f64 = rng.gen_range(0.0..mass);
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *kept.last().expect("non-empty nucleus")
}

impl TextGenerator for TinyLm {
    fn generate(
        &mut self,
        prompt: PromptInput<'_>,
        params: &GenerationParams,
    ) -> Result<GeneratedResponse, GenerationError> {
        let prompt_text = prompt.flat_text();
        let prompt_ids = self.encode(&prompt_text);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.unwrap_or(0));
        let mut state = DifferentiablePolicy::initial_state(self, &prompt_ids);
        let mut tokens = Vec::new();
        let mut finish_reason = FinishReason::Length;
        while tokens.len() < params.max_new_tokens {
            let logits = DifferentiablePolicy::logits(self, &state);
            let token = if params.temperature <= 0.0 {
                logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / params.temperature).collect();
                let probs: Vec<f64> = log_softmax(&scaled).iter().map(|lp| lp.exp()).collect();
                sample_with_top_p(&probs, params.top_p.clamp(f64::MIN_POSITIVE, 1.0), &mut rng)
            };
            if Some(token) == self.eos {
                finish_reason = FinishReason::Stop;
                break;
            }
            tokens.push(token);
            state = DifferentiablePolicy::next_state(self, &state, token);
        }
        Ok(GeneratedResponse {
            text: DifferentiablePolicy::decode(self, &tokens),
            finish_reason,
            usage: Usage { prompt_tokens: prompt_ids.len(), completion_tokens: tokens.len() },
        })
    }
}
