//! Coarse-to-fine co-design of robot morphology and reward functions.
//!
//! This crate holds everything that is pure computation: the domain model,
//! the reward expression language, the built-in crawler evaluator with its
//! cross-entropy trainer, diversity metrics, prompt assembly, response
//! parsing and the two-stage search engine itself. It needs only `alloc`;
//! file formats, subprocess workers, HTTP providers and the CLI live in the
//! `codesign` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cem;
pub mod crawler;
pub mod diversity;
pub mod engine;
pub mod llm;
pub mod model;
pub mod prompt;
pub mod reward_lang;
pub mod seed;

pub use engine::{Engine, EngineError, Evaluator, EvaluatorError, Journal, JournalEvent};
pub use llm::{LanguageModel, LlmRequest, PromptTag, ProviderError, ScriptedProvider};
pub use model::{
    efficiency, validate_morphology, EvalStatus, EvaluationResult, FineOutcome, FinePhase, FineStep, ModelError,
    MorphologyCandidate, MorphologySchema, PairKey, ParamMap, ParamSpec, Provenance, RewardCandidate, RewardDialect,
    RunConfig, RunState, RunStatus,
};
