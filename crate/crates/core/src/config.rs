//! Run configuration: one YAML document covering the RL fine-tuning
//! schema (tokenizer / reward_fn / datapool / env / alg / train_evaluation)
//! plus tool-specific sections. Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::GenerationParams;
use crate::ppo::{GenerationSettings, PPOConfig};
use crate::reward::RewardConfig;
use crate::sft::{LossScope, SFTConfig, SftFormat};

/// The default RL configuration document bundled with the workbench.
pub const DEFAULT_RL_CONFIG_YAML: &str = include_str!("../assets/rl_config.yml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("invalid value for {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub model_name: Option<String>,
    pub padding_side: Option<String>,
    pub truncation_side: Option<String>,
    pub pad_token_as_eos_token: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardFnArgs {
    #[serde(rename = "BERTScore_coeff")]
    pub bertscore_coeff: Option<f64>,
    #[serde(rename = "DialogRPT_coeff")]
    pub dialogrpt_coeff: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardFnSection {
    pub id: Option<String>,
    pub args: Option<RewardFnArgs>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatapoolSection {
    pub id: Option<String>,
    pub truncate: Option<bool>,
    pub args: Option<BTreeMap<String, serde_yaml::Value>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvArgs {
    pub max_prompt_length: Option<usize>,
    pub max_episode_length: Option<usize>,
    pub terminate_on_eos: Option<bool>,
    pub context_start_token: Option<i64>,
    pub prompt_truncation_side: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub n_envs: Option<usize>,
    pub args: Option<EnvArgs>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgArgs {
    pub n_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub verbose: Option<i64>,
    pub learning_rate: Option<f64>,
    pub clip_range: Option<f64>,
    pub n_epochs: Option<usize>,
    pub value_update_epochs: Option<usize>,
    pub gae_lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub ent_coef: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlDivSection {
    pub coeff: Option<f64>,
    pub target_kl: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationKwargs {
    pub do_sample: Option<bool>,
    pub top_k: Option<usize>,
    pub num_beams: Option<usize>,
    pub min_length: Option<usize>,
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArgs {
    pub model_name: Option<String>,
    pub apply_model_parallel: Option<bool>,
    pub prompt_truncation_side: Option<String>,
    pub generation_kwargs: Option<GenerationKwargs>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub id: Option<String>,
    pub args: Option<PolicyArgs>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgSection {
    pub id: Option<String>,
    pub args: Option<AlgArgs>,
    pub kl_div: Option<KlDivSection>,
    pub policy: Option<PolicySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub id: String,
    pub args: Option<BTreeMap<String, serde_yaml::Value>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEvalSection {
    pub eval_batch_size: Option<usize>,
    pub n_iters: Option<usize>,
    pub eval_every: Option<usize>,
    pub save_every: Option<usize>,
    pub metrics: Option<Vec<MetricSpec>>,
    pub generation_kwargs: Option<GenerationKwargs>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub max_chunk_tokens: Option<usize>,
    pub teacher_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupSection {
    pub min_tokens: Option<usize>,
    pub normalize: Option<bool>,
    pub match_unit: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptingSection {
    pub system_text: Option<String>,
    pub k: Option<usize>,
    pub delimiter_begin: Option<String>,
    pub delimiter_end: Option<String>,
    pub embedding_dim: Option<usize>,
    pub cache_path: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    /// Backend selector: `echo`, `canned` or `external`.
    pub backend: Option<String>,
    pub canned_responses: Option<Vec<String>>,
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub top_p: Option<f64>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub requests_per_minute: Option<u32>,
    pub audit_log: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub max_sequence_length: Option<usize>,
    /// `full-sequence` or `response-only`.
    pub loss_scope: Option<String>,
    /// `causal-concat` or `multiturn-eos`.
    pub format: Option<String>,
    pub sentinel: Option<String>,
}

/// The whole configuration document. The six RL sections accept the
/// reference schema verbatim; the remaining sections configure the
/// workbench tools.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tokenizer: Option<TokenizerSection>,
    pub reward_fn: Option<RewardFnSection>,
    pub datapool: Option<DatapoolSection>,
    pub env: Option<EnvSection>,
    pub alg: Option<AlgSection>,
    pub train_evaluation: Option<TrainEvalSection>,
    pub corpus: Option<CorpusSection>,
    pub dedup: Option<DedupSection>,
    pub prompting: Option<PromptingSection>,
    pub generation: Option<GenerationSection>,
    pub sft: Option<SftSection>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_yaml::from_str(text)?;
        if let Some(true) = config
            .alg
            .as_ref()
            .and_then(|a| a.policy.as_ref())
            .and_then(|p| p.args.as_ref())
            .and_then(|a| a.apply_model_parallel)
        {
            tracing::warn!("apply_model_parallel is accepted but ignored");
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_yaml_str(&std::fs::read_to_string(path)?)
    }

    /// PPO hyperparameters drawn from the env/alg/train_evaluation sections;
    /// anything absent keeps its default.
    pub fn ppo_config(&self) -> PPOConfig {
        let mut config = PPOConfig::default();
        if let Some(env) = &self.env {
            if let Some(n) = env.n_envs {
                config.n_envs = n;
            }
            if let Some(args) = &env.args {
                if let Some(v) = args.max_prompt_length {
                    config.max_prompt_length = v;
                }
                if let Some(v) = args.max_episode_length {
                    config.max_episode_length = v;
                }
                if let Some(v) = args.terminate_on_eos {
                    config.terminate_on_eos = v;
                }
            }
        }
        if let Some(alg) = &self.alg {
            if let Some(args) = &alg.args {
                if let Some(v) = args.n_steps {
                    config.n_steps = v;
                }
                if let Some(v) = args.batch_size {
                    config.batch_size = v;
                }
                if let Some(v) = args.learning_rate {
                    config.learning_rate = v;
                }
                if let Some(v) = args.clip_range {
                    config.clip_range = v;
                }
                if let Some(v) = args.n_epochs {
                    config.n_epochs = v;
                }
                if let Some(v) = args.value_update_epochs {
                    config.value_update_epochs = v;
                }
                if let Some(v) = args.gae_lambda {
                    config.gae_lambda = v;
                }
                if let Some(v) = args.gamma {
                    config.gamma = v;
                }
                if let Some(v) = args.ent_coef {
                    config.ent_coef = v;
                }
            }
            if let Some(kl) = &alg.kl_div {
                if let Some(v) = kl.coeff {
                    config.kl_coeff = v;
                }
                if let Some(v) = kl.target_kl {
                    config.target_kl = v;
                }
            }
            if let Some(kwargs) =
                alg.policy.as_ref().and_then(|p| p.args.as_ref()).and_then(|a| a.generation_kwargs.as_ref())
            {
                apply_generation_kwargs(&mut config.rollout_generation, kwargs);
            }
        }
        if let Some(te) = &self.train_evaluation {
            if let Some(v) = te.n_iters {
                config.n_iters = v;
            }
            if let Some(v) = te.eval_every {
                config.eval_every = v;
            }
            if let Some(v) = te.save_every {
                config.save_every = v;
            }
            if let Some(kwargs) = &te.generation_kwargs {
                apply_generation_kwargs(&mut config.eval_generation, kwargs);
            }
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config
    }

    /// Reward coefficients from the reward_fn section.
    pub fn reward_config(&self) -> RewardConfig {
        let mut config = RewardConfig::default();
        if let Some(args) = self.reward_fn.as_ref().and_then(|r| r.args.as_ref()) {
            if let Some(v) = args.bertscore_coeff {
                config.bertscore_coeff = v;
            }
            if let Some(v) = args.dialogrpt_coeff {
                config.dialogrpt_coeff = v;
            }
        }
        config
    }

    /// Supervised fine-tuning schedule from the sft section.
    pub fn sft_config(&self) -> Result<SFTConfig, ConfigError> {
        let mut config = SFTConfig::default();
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let Some(section) = &self.sft else { return Ok(config) };
        if let Some(v) = section.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = section.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = section.epochs {
            config.epochs = v;
        }
        if let Some(v) = section.max_sequence_length {
            config.max_sequence_length = v;
        }
        if let Some(scope) = &section.loss_scope {
            config.loss_scope = match scope.as_str() {
                "full-sequence" => LossScope::FullSequence,
                "response-only" => LossScope::ResponseOnly,
                other => {
                    return Err(ConfigError::Invalid {
                        field: "sft.loss_scope",
                        message: format!(
                            "`{other}` is not one of full-sequence, response-only"
                        ),
                    })
                }
            };
        }
        Ok(config)
    }

    /// Training-string format from the sft section.
    pub fn sft_format(&self) -> Result<SftFormat, ConfigError> {
        match self.sft.as_ref().and_then(|s| s.format.as_deref()) {
            None | Some("causal-concat") => Ok(SftFormat::CausalConcat),
            Some("multiturn-eos") => Ok(SftFormat::MultiturnEos),
            Some(other) => Err(ConfigError::Invalid {
                field: "sft.format",
                message: format!("`{other}` is not one of causal-concat, multiturn-eos"),
            }),
        }
    }

    /// Decoding parameters for the generation backend.
    pub fn generation_params(&self) -> GenerationParams {
        let mut params = GenerationParams::default();
        if let Some(section) = &self.generation {
            if let Some(v) = &section.model_id {
                params.model_id = v.clone();
            }
            if let Some(v) = section.temperature {
                params.temperature = v;
            }
            if let Some(v) = section.max_new_tokens {
                params.max_new_tokens = v;
            }
            if let Some(v) = section.top_p {
                params.top_p = v;
            }
        }
        params.seed = self.seed;
        params
    }
}

fn apply_generation_kwargs(settings: &mut GenerationSettings, kwargs: &GenerationKwargs) {
    if let Some(v) = kwargs.do_sample {
        settings.do_sample = v;
    }
    if let Some(v) = kwargs.top_k {
        settings.top_k = v;
    }
    if let Some(v) = kwargs.num_beams {
        settings.num_beams = v;
    }
    if let Some(v) = kwargs.min_length {
        settings.min_length = v;
    }
    if let Some(v) = kwargs.max_new_tokens {
        settings.max_new_tokens = v;
    }
}
