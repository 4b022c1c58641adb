//! Token-level PPO fine-tuning against a terminal reward with KL-to-reference
//! shaping: rollout collection, generalized advantage estimation, the clipped
//! surrogate objective, separate policy/value update passes and the iteration
//! loop with periodic evaluation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::AdamW;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("mismatched input lengths for {0}")]
    LengthMismatch(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("policy assigned zero probability to sampled token {token}")]
    ZeroProbability { token: usize },
    #[error("non-finite gradient during update")]
    NonFiniteGradient,
    #[error("reward failure: {0}")]
    Reward(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Decoding settings for one generation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub do_sample: bool,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub num_beams: usize,
    /// Minimum number of new tokens before end-of-sequence is allowed.
    pub min_length: usize,
    pub max_new_tokens: usize,
}

impl GenerationSettings {
    /// Rollout defaults: plain sampling, no top-k cut.
    pub fn sampling_default() -> Self {
        Self { do_sample: true, top_k: 0, num_beams: 1, min_length: 9, max_new_tokens: 20 }
    }

    /// Evaluation defaults: width-5 beam search.
    pub fn eval_default() -> Self {
        Self { do_sample: false, top_k: 0, num_beams: 5, min_length: 9, max_new_tokens: 20 }
    }
}

/// PPO hyperparameters. Defaults mirror the reference RL fine-tuning
/// configuration file field for field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PPOConfig {
    /// Action-steps collected per iteration.
    pub n_steps: usize,
    /// Minibatch size (in action tokens) for updates.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_range: f64,
    /// Policy passes over the rollout buffer per iteration.
    pub n_epochs: usize,
    /// Value-head passes over the rollout buffer per iteration.
    pub value_update_epochs: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub ent_coef: f64,
    /// KL-to-reference shaping coefficient (beta).
    pub kl_coeff: f64,
    /// Early-stop ceiling on the approximate policy KL within one update.
    pub target_kl: f64,
    pub max_prompt_length: usize,
    pub max_episode_length: usize,
    pub terminate_on_eos: bool,
    pub n_envs: usize,
    pub n_iters: usize,
    pub eval_every: usize,
    pub save_every: usize,
    /// Normalize advantages to zero mean / unit variance per batch.
    pub normalize_advantages: bool,
    pub rollout_generation: GenerationSettings,
    pub eval_generation: GenerationSettings,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            batch_size: 64,
            learning_rate: 1e-6,
            clip_range: 0.2,
            n_epochs: 1,
            value_update_epochs: 3,
            gae_lambda: 0.95,
            gamma: 0.99,
            ent_coef: 0.01,
            kl_coeff: 0.001,
            target_kl: 2.0,
            max_prompt_length: 100,
            max_episode_length: 20,
            terminate_on_eos: true,
            n_envs: 1,
            n_iters: 200,
            eval_every: 20,
            save_every: 10,
            normalize_advantages: true,
            rollout_generation: GenerationSettings::sampling_default(),
            eval_generation: GenerationSettings::eval_default(),
            seed: 0,
        }
    }
}

/// One PPO episode with everything the update needs.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub prompt_index: usize,
    pub prompt_tokens: Vec<usize>,
    pub action_tokens: Vec<usize>,
    /// Log-probability of each action under the behavior policy.
    pub behavior_logprobs: Vec<f64>,
    /// Log-probability of each action under the frozen reference policy.
    pub reference_logprobs: Vec<f64>,
    /// Value estimate at each pre-action state.
    pub values: Vec<f64>,
    /// Composite reward of the decoded response.
    pub terminal_reward: f64,
    /// Per-token KL shaping plus the terminal reward at the last token.
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub decoded_text: String,
}

/// Aggregate statistics of one PPO update.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub mean_reward: f64,
}

/// A sequence policy with explicit logits, a scalar value head and analytic
/// parameter gradients over a flat parameter vector. Tiny by design so that
/// finite-difference checks stay feasible.
pub trait DifferentiablePolicy: Clone {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos_token(&self) -> Option<usize>;
    /// State after consuming the prompt.
    fn initial_state(&self, prompt: &[usize]) -> Self::State;
    fn next_state(&self, state: &Self::State, token: usize) -> Self::State;
    fn logits(&self, state: &Self::State) -> Vec<f64>;
    fn value(&self, state: &Self::State) -> f64;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);

    /// Accumulate `scale * d log p(token | state) / d params` into `grad`.
    fn accum_grad_logp(&self, state: &Self::State, token: usize, scale: f64, grad: &mut [f64]);
    /// Accumulate `scale * d H(p(. | state)) / d params` into `grad`.
    fn accum_grad_entropy(&self, state: &Self::State, scale: f64, grad: &mut [f64]);
    /// Accumulate `scale * d V(state) / d params` into `grad`.
    fn accum_grad_value(&self, state: &Self::State, scale: f64, grad: &mut [f64]);

    fn decode(&self, tokens: &[usize]) -> String;
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_sum).collect()
}

/// Entropy of the categorical distribution given by `logits`.
pub fn entropy_from_logits(logits: &[f64]) -> f64 {
    let logp = log_softmax(logits);
    -logp.iter().map(|lp| if lp.is_finite() { lp.exp() * lp } else { 0.0 }).sum::<f64>()
}

/// Generalized advantage estimation.
///
/// With `delta_t = r_t + gamma * V_{t+1} - V_t` (and `V_T` equal to
/// `bootstrap_value`), advantages follow the backward recursion
/// `A_t = delta_t + gamma * lambda * A_{t+1}` and `returns_t = A_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.is_empty() {
        return Err(PpoError::Empty("rewards"));
    }
    if rewards.len() != values.len() {
        return Err(PpoError::LengthMismatch("rewards vs values"));
    }
    if rewards.iter().chain(values.iter()).any(|x| !x.is_finite()) || !bootstrap_value.is_finite()
    {
        return Err(PpoError::NonFinite("gae inputs"));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_advantage = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_advantage = delta + gamma * lam * next_advantage;
        advantages[t] = next_advantage;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Clipped surrogate loss.
///
/// Per token, with ratio `rho_t = exp(logp_new - logp_old)`, the objective is
/// `min(rho_t * A_t, clamp(rho_t, 1 - eps, 1 + eps) * A_t)`; the loss is
/// `-mean(objective) - ent_coef * entropy`.
pub fn clipped_policy_objective(
    logp_new: &[f64],
    logp_old: &[f64],
    advantages: &[f64],
    clip_range: f64,
    ent_coef: f64,
    entropy: f64,
) -> f64 {
    assert_eq!(logp_new.len(), logp_old.len());
    assert_eq!(logp_new.len(), advantages.len());
    let mut total = 0.0;
    for ((new, old), adv) in logp_new.iter().zip(logp_old).zip(advantages) {
        let ratio = (new - old).exp();
        let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range);
        total += (ratio * adv).min(clipped * adv);
    }
    -(total / logp_new.len() as f64) - ent_coef * entropy
}

/// Fraction of tokens where the clipped branch of the objective is strictly
/// smaller, i.e. clipping binds.
pub fn clip_fraction(
    logp_new: &[f64],
    logp_old: &[f64],
    advantages: &[f64],
    clip_range: f64,
) -> f64 {
    if logp_new.is_empty() {
        return 0.0;
    }
    let bound = logp_new
        .iter()
        .zip(logp_old)
        .zip(advantages)
        .filter(|((new, old), adv)| {
            let ratio = (*new - *old).exp();
            let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range);
            clipped * **adv < ratio * **adv
        })
        .count();
    bound as f64 / logp_new.len() as f64
}

/// Approximate KL between the behavior and current policy:
/// `mean(logp_old - logp_new)`.
pub fn approx_kl(logp_old: &[f64], logp_new: &[f64]) -> f64 {
    if logp_old.is_empty() {
        return 0.0;
    }
    logp_old.iter().zip(logp_new).map(|(o, n)| o - n).sum::<f64>() / logp_old.len() as f64
}

fn masked_logits<P: DifferentiablePolicy>(
    policy: &P,
    state: &P::State,
    generated: usize,
    settings: &GenerationSettings,
) -> Vec<f64> {
    let mut logits = policy.logits(state);
    if generated < settings.min_length {
        if let Some(eos) = policy.eos_token() {
            logits[eos] = f64::NEG_INFINITY;
        }
    }
    if settings.top_k > 0 && settings.top_k < logits.len() {
        let mut sorted: Vec<f64> = logits.iter().copied().filter(|l| l.is_finite()).collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(&cutoff) = sorted.get(settings.top_k - 1) {
            for l in logits.iter_mut() {
                if *l < cutoff {
                    *l = f64::NEG_INFINITY;
                }
            }
        }
    }
    logits
}

fn sample_index(logp: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_valid = 0;
    for (i, lp) in logp.iter().enumerate() {
        if lp.is_finite() {
            acc += lp.exp();
            last_valid = i;
            if u < acc {
                return i;
            }
        }
    }
    last_valid
}

/// One sampled episode: generated tokens plus per-token log-probabilities
/// under the (unmasked) policy distribution.
pub fn sample_episode<P: DifferentiablePolicy>(
    policy: &P,
    prompt: &[usize],
    settings: &GenerationSettings,
    max_episode_length: usize,
    terminate_on_eos: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<f64>, Vec<P::State>), PpoError> {
    let mut state = policy.initial_state(prompt);
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut states = Vec::new();
    let limit = settings.max_new_tokens.min(max_episode_length);
    while tokens.len() < limit {
        let sampling = masked_logits(policy, &state, tokens.len(), settings);
        let sampling_logp = log_softmax(&sampling);
        let token = if settings.do_sample {
            sample_index(&sampling_logp, rng)
        } else {
            sampling_logp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        // Record the policy's own log-probability, without decode-time masks.
        let policy_logp = log_softmax(&policy.logits(&state));
        let lp = policy_logp[token];
        if !lp.is_finite() {
            return Err(PpoError::ZeroProbability { token });
        }
        states.push(state.clone());
        tokens.push(token);
        logprobs.push(lp);
        if terminate_on_eos && policy.eos_token() == Some(token) {
            break;
        }
        state = policy.next_state(&state, token);
    }
    Ok((tokens, logprobs, states))
}

/// Deterministic beam search decode.
pub fn beam_search<P: DifferentiablePolicy>(
    policy: &P,
    prompt: &[usize],
    settings: &GenerationSettings,
) -> Vec<usize> {
    struct Beam<S> {
        tokens: Vec<usize>,
        score: f64,
        state: S,
        finished: bool,
    }
    let width = settings.num_beams.max(1);
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        state: policy.initial_state(prompt),
        finished: false,
    }];
    for step in 0..settings.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam<P::State>> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(Beam {
                    tokens: beam.tokens.clone(),
                    score: beam.score,
                    state: beam.state.clone(),
                    finished: true,
                });
                continue;
            }
            let logits = masked_logits(policy, &beam.state, step, settings);
            let logp = log_softmax(&logits);
            for (token, lp) in logp.iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(token);
                let finished = settings.max_new_tokens == tokens.len()
                    || policy.eos_token() == Some(token);
                let state = if finished {
                    beam.state.clone()
                } else {
                    policy.next_state(&beam.state, token)
                };
                candidates.push(Beam { tokens, score: beam.score + lp, state, finished });
            }
        }
        candidates.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal)
        });
        candidates.truncate(width);
        beams = candidates;
    }
    beams
        .into_iter()
        .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal))
        .map(|b| b.tokens)
        .unwrap_or_default()
}

/// Collect rollouts until at least `config.n_steps` action tokens are
/// gathered. Prompts are consumed round-robin starting at `*cursor`;
/// per-token shaping is `-kl_coeff * (logpi - logpi_ref)` with the terminal
/// reward added at the last token. Advantages and returns are attached
/// before any update sees the batch.
pub fn collect_rollouts<P, F>(
    policy: &P,
    reference: &P,
    prompts: &[Vec<usize>],
    cursor: &mut usize,
    reward_fn: &mut F,
    config: &PPOConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>, PpoError>
where
    P: DifferentiablePolicy,
    F: FnMut(usize, &str) -> Result<f64, PpoError>,
{
    if prompts.is_empty() {
        return Err(PpoError::Empty("prompt pool"));
    }
    let mut trajectories = Vec::new();
    let mut steps = 0usize;
    while steps < config.n_steps {
        let prompt_index = *cursor % prompts.len();
        *cursor += 1;
        let mut prompt = prompts[prompt_index].clone();
        prompt.truncate(config.max_prompt_length);

        let (tokens, behavior_logprobs, states) = sample_episode(
            policy,
            &prompt,
            &config.rollout_generation,
            config.max_episode_length,
            config.terminate_on_eos,
            rng,
        )?;
        if tokens.is_empty() {
            continue;
        }

        // Reference log-probabilities along the same token path.
        let mut ref_state = reference.initial_state(&prompt);
        let mut reference_logprobs = Vec::with_capacity(tokens.len());
        for &token in &tokens {
            let logp = log_softmax(&reference.logits(&ref_state));
            reference_logprobs.push(logp[token]);
            ref_state = reference.next_state(&ref_state, token);
        }

        let values: Vec<f64> = states.iter().map(|s| policy.value(s)).collect();

        let decoded_text = policy.decode(&tokens);
        let terminal_reward = reward_fn(prompt_index, &decoded_text)?;
        if !terminal_reward.is_finite() {
            return Err(PpoError::NonFinite("terminal reward"));
        }

        let mut shaped_rewards: Vec<f64> = behavior_logprobs
            .iter()
            .zip(&reference_logprobs)
            .map(|(b, r)| -config.kl_coeff * (b - r))
            .collect();
        *shaped_rewards.last_mut().expect("non-empty episode") += terminal_reward;

        let (advantages, returns) =
            compute_gae(&shaped_rewards, &values, 0.0, config.gamma, config.gae_lambda)?;

        steps += tokens.len();
        trajectories.push(Trajectory {
            prompt_index,
            prompt_tokens: prompt,
            action_tokens: tokens,
            behavior_logprobs,
            reference_logprobs,
            values,
            terminal_reward,
            shaped_rewards,
            advantages,
            returns,
            decoded_text,
        });
    }
    Ok(trajectories)
}

struct FlatBatch<S> {
    states: Vec<S>,
    actions: Vec<usize>,
    logp_old: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn flatten_batch<P: DifferentiablePolicy>(
    policy: &P,
    batch: &[Trajectory],
    normalize: bool,
) -> FlatBatch<P::State> {
    let mut flat = FlatBatch {
        states: Vec::new(),
        actions: Vec::new(),
        logp_old: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    for traj in batch {
        let mut state = policy.initial_state(&traj.prompt_tokens);
        for (t, &action) in traj.action_tokens.iter().enumerate() {
            flat.states.push(state.clone());
            flat.actions.push(action);
            flat.logp_old.push(traj.behavior_logprobs[t]);
            flat.advantages.push(traj.advantages[t]);
            flat.returns.push(traj.returns[t]);
            state = policy.next_state(&state, action);
        }
    }
    if normalize && !flat.advantages.is_empty() {
        let n = flat.advantages.len() as f64;
        let mean = flat.advantages.iter().sum::<f64>() / n;
        let var =
            flat.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for a in flat.advantages.iter_mut() {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    flat
}

/// Optimizer pair for the separate policy and value passes.
pub struct PpoOptimizers {
    pub policy: AdamW,
    pub value: AdamW,
}

impl PpoOptimizers {
    pub fn new(num_params: usize) -> Self {
        Self { policy: AdamW::new(num_params), value: AdamW::new(num_params) }
    }
}

/// One PPO update over a rollout batch: `n_epochs` clipped-objective passes
/// for the policy, then `value_update_epochs` mean-squared-error passes for
/// the value head. Advantages are normalized per batch when configured.
/// A minibatch whose approximate KL exceeds `target_kl` stops the policy
/// pass; the remaining minibatches are skipped without a step.
pub fn ppo_update<P: DifferentiablePolicy>(
    batch: &[Trajectory],
    policy: &mut P,
    optimizers: &mut PpoOptimizers,
    config: &PPOConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::Empty("trajectory batch"));
    }
    let flat = flatten_batch(policy, batch, config.normalize_advantages);
    let n_tokens = flat.states.len();
    let num_params = policy.num_params();

    let mut policy_losses = Vec::new();
    let mut entropies = Vec::new();
    let mut kls = Vec::new();
    let mut clip_fractions = Vec::new();

    'policy_pass: for _ in 0..config.n_epochs {
        let mut order: Vec<usize> = (0..n_tokens).collect();
        shuffle(&mut order, rng);
        for minibatch in order.chunks(config.batch_size.max(1)) {
            let mut params = policy.params();
            let mut grad = vec![0.0; num_params];
            let m = minibatch.len() as f64;
            let mut logp_new = Vec::with_capacity(minibatch.len());
            let mut logp_old = Vec::with_capacity(minibatch.len());
            let mut advs = Vec::with_capacity(minibatch.len());
            let mut entropy_sum = 0.0;

            for &i in minibatch {
                let state = &flat.states[i];
                let action = flat.actions[i];
                let adv = flat.advantages[i];
                let logits = policy.logits(state);
                let logp = log_softmax(&logits);
                let lp_new = logp[action];
                let ratio = (lp_new - flat.logp_old[i]).exp();
                let clipped = ratio.clamp(1.0 - config.clip_range, 1.0 + config.clip_range);
                // Gradient flows through the ratio unless the clipped branch
                // is strictly selected.
                if clipped * adv >= ratio * adv {
                    policy.accum_grad_logp(state, action, -(adv * ratio) / m, &mut grad);
                }
                policy.accum_grad_entropy(state, -config.ent_coef / m, &mut grad);
                entropy_sum += entropy_from_logits(&logits);
                logp_new.push(lp_new);
                logp_old.push(flat.logp_old[i]);
                advs.push(adv);
            }

            let entropy_mean = entropy_sum / m;
            let loss = clipped_policy_objective(
                &logp_new,
                &logp_old,
                &advs,
                config.clip_range,
                config.ent_coef,
                entropy_mean,
            );
            let kl = approx_kl(&logp_old, &logp_new);
            policy_losses.push(loss);
            entropies.push(entropy_mean);
            kls.push(kl);
            clip_fractions.push(clip_fraction(&logp_new, &logp_old, &advs, config.clip_range));

            if kl > config.target_kl {
                tracing::warn!(kl, target = config.target_kl, "early stop: approx KL over target");
                break 'policy_pass;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::NonFiniteGradient);
            }
            optimizers.policy.step(&mut params, &grad, config.learning_rate);
            policy.set_params(&params);
        }
    }

    let mut value_losses = Vec::new();
    for _ in 0..config.value_update_epochs {
        let mut order: Vec<usize> = (0..n_tokens).collect();
        shuffle(&mut order, rng);
        for minibatch in order.chunks(config.batch_size.max(1)) {
            let mut params = policy.params();
            let mut grad = vec![0.0; num_params];
            let m = minibatch.len() as f64;
            let mut loss = 0.0;
            for &i in minibatch {
                let state = &flat.states[i];
                let err = policy.value(state) - flat.returns[i];
                loss += err * err / m;
                policy.accum_grad_value(state, 2.0 * err / m, &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::NonFiniteGradient);
            }
            value_losses.push(loss);
            optimizers.value.step(&mut params, &grad, config.learning_rate);
            policy.set_params(&params);
        }
    }

    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(UpdateStats {
        policy_loss: mean(&policy_losses),
        value_loss: mean(&value_losses),
        entropy: mean(&entropies),
        approx_kl: mean(&kls),
        clip_fraction: mean(&clip_fractions),
        mean_reward: batch.iter().map(|t| t.terminal_reward).sum::<f64>() / batch.len() as f64,
    })
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Which prompt pool a reward request refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-iteration record written to the stats log.
#[derive(Debug, Clone, Serialize)]
pub struct IterationStats {
    pub iteration: usize,
    #[serde(flatten)]
    pub stats: UpdateStats,
}

/// Periodic evaluation outcome: mean reward of beam-decoded responses on
/// the held-out prompts.
#[derive(Debug, Clone, Serialize)]
pub struct EvalEvent {
    pub iteration: usize,
    pub mean_score: f64,
}

/// Everything a training run leaves behind.
#[derive(Debug, Default)]
pub struct RunArtifacts {
    pub iterations: Vec<IterationStats>,
    pub eval_events: Vec<EvalEvent>,
    pub checkpoints: Vec<PathBuf>,
    /// Iterations rolled back after a non-finite gradient.
    pub aborted_iterations: Vec<usize>,
}

/// Run the full PPO loop: `n_iters` iterations of rollout + update, beam
/// evaluation on `eval_prompts` every `eval_every` iterations, a checkpoint
/// every `save_every` iterations (when `out_dir` is given). A non-finite
/// gradient aborts the iteration and restores the pre-iteration parameters.
pub fn train_rl<P, F>(
    policy: &mut P,
    train_prompts: &[Vec<usize>],
    eval_prompts: &[Vec<usize>],
    reward_fn: &mut F,
    config: &PPOConfig,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, PpoError>
where
    P: DifferentiablePolicy,
    F: FnMut(Phase, usize, &str) -> Result<f64, PpoError>,
{
    let reference = policy.clone();
    let mut optimizers = PpoOptimizers::new(policy.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cursor = 0usize;
    let mut artifacts = RunArtifacts::default();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for iteration in 1..=config.n_iters {
        let backup = policy.params();
        let mut train_reward = |idx: usize, text: &str| reward_fn(Phase::Train, idx, text);
        let batch = collect_rollouts(
            policy,
            &reference,
            train_prompts,
            &mut cursor,
            &mut train_reward,
            config,
            &mut rng,
        )?;
        match ppo_update(&batch, policy, &mut optimizers, config, &mut rng) {
            Ok(stats) => artifacts.iterations.push(IterationStats { iteration, stats }),
            Err(PpoError::NonFiniteGradient) => {
                tracing::warn!(iteration, "non-finite gradient; restoring parameters");
                policy.set_params(&backup);
                artifacts.aborted_iterations.push(iteration);
            }
            Err(other) => return Err(other),
        }

        if config.eval_every > 0 && iteration % config.eval_every == 0 {
            let mut total = 0.0;
            for (idx, prompt) in eval_prompts.iter().enumerate() {
                let mut p = prompt.clone();
                p.truncate(config.max_prompt_length);
                let tokens = beam_search(policy, &p, &config.eval_generation);
                let text = policy.decode(&tokens);
                total += reward_fn(Phase::Eval, idx, &text)?;
            }
            let mean_score =
                if eval_prompts.is_empty() { 0.0 } else { total / eval_prompts.len() as f64 };
            artifacts.eval_events.push(EvalEvent { iteration, mean_score });
        }

        if config.save_every > 0 && iteration % config.save_every == 0 {
            if let Some(dir) = out_dir {
                let ckpt = dir.join(format!("ckpt-{iteration:04}"));
                save_policy_checkpoint(policy, iteration, &ckpt)?;
                artifacts.checkpoints.push(ckpt);
            }
        }
    }

    if let Some(dir) = out_dir {
        write_run_logs(&artifacts, dir)?;
    }
    Ok(artifacts)
}

/// Persist policy parameters as a checkpoint directory with a manifest.
pub fn save_policy_checkpoint<P: DifferentiablePolicy>(
    policy: &P,
    iteration: usize,
    dir: &Path,
) -> Result<(), PpoError> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "kind": "policy-params",
        "iteration": iteration,
        "num_params": policy.num_params(),
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("params.json"), serde_json::to_string(&policy.params())?)?;
    Ok(())
}

/// Load flat parameters back from a checkpoint directory.
pub fn load_policy_params(dir: &Path) -> Result<Vec<f64>, PpoError> {
    let raw = std::fs::read_to_string(dir.join("params.json"))?;
    Ok(serde_json::from_str(&raw)?)
}

fn write_run_logs(artifacts: &RunArtifacts, dir: &Path) -> Result<(), PpoError> {
    let mut stats_lines = String::new();
    for it in &artifacts.iterations {
        stats_lines.push_str(&serde_json::to_string(it)?);
        stats_lines.push('\n');
    }
    std::fs::write(dir.join("rl_stats.jsonl"), stats_lines)?;

    let mut csv = String::from("iteration,mean_score\n");
    for ev in &artifacts.eval_events {
        csv.push_str(&format!("{},{}\n", ev.iteration, ev.mean_score));
    }
    std::fs::write(dir.join("eval_scores.csv"), csv)?;
    Ok(())
}

/// Mean exact KL of the policy against the reference over states visited by
/// sampling `episodes` rollouts from the current policy.
pub fn mean_kl_to_reference<P: DifferentiablePolicy>(
    policy: &P,
    reference: &P,
    prompts: &[Vec<usize>],
    config: &PPOConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64, PpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kl_sum = 0.0;
    let mut count = 0usize;
    for e in 0..episodes {
        let prompt = &prompts[e % prompts.len()];
        let (tokens, _, states) = sample_episode(
            policy,
            prompt,
            &config.rollout_generation,
            config.max_episode_length,
            config.terminate_on_eos,
            &mut rng,
        )?;
        let mut ref_state = reference.initial_state(prompt);
        for (state, &token) in states.iter().zip(&tokens) {
            let logp = log_softmax(&policy.logits(state));
            let ref_logp = log_softmax(&reference.logits(&ref_state));
            let kl: f64 = logp
                .iter()
                .zip(&ref_logp)
                .map(|(lp, rlp)| if lp.is_finite() { lp.exp() * (lp - rlp) } else { 0.0 })
                .sum();
            kl_sum += kl;
            count += 1;
            ref_state = reference.next_state(&ref_state, token);
        }
    }
    Ok(if count == 0 { 0.0 } else { kl_sum / count as f64 })
}
