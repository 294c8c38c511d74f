//! Building blocks for desk-scale multilingual machine translation with
//! back-translation.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: sentence pairs, language tags, temperature-balanced mixing and
//!   the synthetic cipher-language task generator.
//! - [`tokenizer`]: a shared multilingual byte-pair-encoding vocabulary.
//! - [`model`]: a pre-norm Transformer encoder-decoder with hand-written
//!   backpropagation, checkpoint files and checkpoint averaging.
//! - [`training`]: Adam with decoupled weight decay, the inverse square root
//!   schedule and the token-budgeted training loop.
//! - [`decoding`]: beam search, top-k sampling and unconstrained sampling.
//! - [`backtranslation`]: synthetic data generation, filtering and rounds.
//! - [`evaluation`]: spBLEU-style corpus BLEU, distinct-n and score matrices.

pub mod backtranslation;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod kv;
pub mod model;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use backtranslation::{
    back_translate, filter_synthetic, run_bt_round, BtRoundConfig, FilterOutcome, RoundReport,
    SyntheticFilterConfig,
};
pub use corpus::{
    cipher::{generate_cipher_task, CipherTask, CipherTaskConfig},
    sample_mixture, tag_target, temperature_weights, Corpus, DevSet, Direction, LanguageId,
    MixtureSpec, MonoCorpus, Origin, SentencePair,
};
pub use decoding::{
    beam_search, max_target_len, sample_decode, DecodeStrategy, NmtSystem, StepScorer, StopRule,
    Translator,
};
pub use error::{Error, Result};
pub use evaluation::{distinct_n, score_matrix, spbleu, BleuReport, ScoreMatrix};
pub use model::{
    average_checkpoints, checkpoint::Checkpoint, ModelConfig, ModelParams, Scalar, Tensor,
};
pub use tokenizer::{bpe_decode, bpe_encode, bpe_train, BpeVocab, TokenId};
pub use training::{adam_step, lr_at, train, AdamState, TrainConfig, TrainOutcome};
