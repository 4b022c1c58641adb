//! teachbench: a desk-scale workbench for generating and evaluating
//! AI-teacher responses in educational dialogues.
//!
//! The pipeline runs from corpus ingestion to evaluation reports:
//!
//! 1. [`corpus`] — parse, validate and chunk teacher-student dialogues
//! 2. [`dedup`] — detect chunk-induced overlap and build leakage-free splits
//! 3. [`retrieval`] — embedding-similarity retrieval and few-shot prompt assembly
//! 4. [`generation`] — text-generation backends (chat-completion client + mocks)
//! 5. [`sft`] — supervised fine-tuning data formats and training loop
//! 6. [`reward`] — composite reward: greedy-matching token similarity + dialogue ranker
//! 7. [`ppo`] — token-level PPO with GAE, clipped objective and KL shaping
//! 8. [`eval`] — score predictions against references and render reports
//!
//! Training-scale backends are pluggable; everything here is verified with
//! tiny deterministic models so the full pipeline runs on a laptop.

pub mod config;
pub mod corpus;
pub mod dedup;
pub mod eval;
pub mod generation;
pub mod optim;
pub mod ppo;
pub mod retrieval;
pub mod reward;
pub mod sft;
pub mod tinylm;
