//! Domain types shared across the engine.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::cem::CemConfig;
use crate::llm::PromptTag;
use crate::reward_lang;

/// Design parameter values keyed by parameter name.
pub type ParamMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{0}` has an empty or inverted range")]
    InvalidBounds(String),
    #[error("template placeholder `{{{0}}}` does not name a parameter")]
    UnknownPlaceholder(String),
    #[error("parameter `{0}` has no placeholder in the structure template")]
    MissingPlaceholder(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{0}` is not part of the schema")]
    UnknownParameter(String),
    #[error("non-finite value for `{0}`")]
    NonFiniteValue(String),
    #[error("volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("invalid identifier `{0}`")]
    InvalidId(String),
    #[error("reward source is empty")]
    EmptyReward,
    #[error("reward source does not parse: {0}")]
    RewardParse(reward_lang::ParseError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Identifiers are non-empty and drawn from `[A-Za-z0-9.-]`, so `_` can
/// separate the two halves of a [`PairKey`].
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'.')
}

fn check_id(id: &str) -> Result<(), ModelError> {
    if is_valid_id(id) {
        Ok(())
    } else {
        Err(ModelError::InvalidId(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub unit: String,
}

impl ParamSpec {
    pub fn new(name: &str, lower: f64, upper: f64, unit: &str) -> Self {
        ParamSpec {
            name: name.to_string(),
            lower,
            upper,
            unit: unit.to_string(),
        }
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawSchema {
    name: String,
    params: Vec<ParamSpec>,
    structure_template: String,
}

/// Named, bounded design space plus the structure file it renders into.
///
/// The template carries one `{name}` placeholder per parameter (a parameter
/// may appear more than once); construction rejects any mismatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct MorphologySchema {
    name: String,
    params: Vec<ParamSpec>,
    structure_template: String,
}

impl TryFrom<RawSchema> for MorphologySchema {
    type Error = ModelError;

    fn try_from(raw: RawSchema) -> Result<Self, ModelError> {
        MorphologySchema::new(&raw.name, raw.params, &raw.structure_template)
    }
}

impl From<MorphologySchema> for RawSchema {
    fn from(s: MorphologySchema) -> Self {
        RawSchema {
            name: s.name,
            params: s.params,
            structure_template: s.structure_template,
        }
    }
}

impl MorphologySchema {
    pub fn new(name: &str, params: Vec<ParamSpec>, structure_template: &str) -> Result<Self, ModelError> {
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.name == p.name) {
                return Err(ModelError::DuplicateParameter(p.name.clone()));
            }
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                return Err(ModelError::InvalidBounds(p.name.clone()));
            }
        }
        let found = placeholders(structure_template);
        for ph in &found {
            if !params.iter().any(|p| &p.name == ph) {
                return Err(ModelError::UnknownPlaceholder(ph.clone()));
            }
        }
        for p in &params {
            if !found.contains(&p.name) {
                return Err(ModelError::MissingPlaceholder(p.name.clone()));
            }
        }
        Ok(MorphologySchema {
            name: name.to_string(),
            params,
            structure_template: structure_template.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn structure_template(&self) -> &str {
        &self.structure_template
    }

    /// Hex SHA-256 over the schema's canonical text form.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for p in &self.params {
            h.update(format!("\n{}:{:?}:{:?}:{}", p.name, p.lower, p.upper, p.unit).as_bytes());
        }
        h.update(b"\n");
        h.update(self.structure_template.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Substitutes numeric values for every placeholder or mask token.
    pub fn render(&self, values: &ParamMap) -> Result<String, ModelError> {
        let mut out = self.structure_template.clone();
        for p in &self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| ModelError::MissingParameter(p.name.clone()))?;
            let text = format!("{v}");
            out = out.replace(&format!("{{{}}}", p.name), &text);
            out = out.replace(&format!("<MASKED:{}>", p.name), &text);
        }
        Ok(out)
    }
}

/// Names of all `{ident}` placeholders in `template`, deduplicated, in
/// order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' && !bytes[start].is_ascii_digit() {
                let name = &template[start..j];
                if !out.iter().any(|n| n == name) {
                    out.push(name.to_string());
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// A parameter value that was moved onto its bound during admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub param: String,
    pub proposed: f64,
    pub clamped: f64,
}

/// Checks `values` against `schema`, clamping out-of-range entries.
///
/// Missing parameters and non-finite values are hard errors; clamps are
/// returned as soft violations.
pub fn validate_morphology(schema: &MorphologySchema, values: &ParamMap) -> Result<(ParamMap, Vec<Clamp>), ModelError> {
    if let Some(k) = values.keys().find(|k| schema.param(k).is_none()) {
        return Err(ModelError::UnknownParameter(k.clone()));
    }
    if let Some((k, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ModelError::NonFiniteValue(k.clone()));
    }
    let mut out = ParamMap::new();
    let mut clamps = Vec::new();
    for p in schema.params() {
        let v = *values
            .get(&p.name)
            .ok_or_else(|| ModelError::MissingParameter(p.name.clone()))?;
        let c = p.clamp(v);
        if c != v {
            clamps.push(Clamp {
                param: p.name.clone(),
                proposed: v,
                clamped: c,
            });
        }
        out.insert(p.name.clone(), c);
    }
    Ok((out, clamps))
}

/// Fitness per unit volume, the selection objective.
pub fn efficiency(fitness: f64, volume: f64) -> Result<f64, ModelError> {
    if !fitness.is_finite() {
        return Err(ModelError::NonFiniteValue("fitness".into()));
    }
    if !volume.is_finite() {
        return Err(ModelError::NonFiniteValue("volume".into()));
    }
    if volume <= 0.0 {
        return Err(ModelError::NonPositiveVolume(volume));
    }
    Ok(fitness / volume)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmProposal,
    LlmRefinement,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyCandidate {
    pub id: String,
    pub values: ParamMap,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamps: Vec<Clamp>,
}

impl MorphologyCandidate {
    /// Admits raw values under `schema`: clamps and records out-of-range values.
    pub fn admit(
        id: &str,
        schema: &MorphologySchema,
        values: &ParamMap,
        provenance: Provenance,
        parent_id: Option<String>,
    ) -> Result<Self, ModelError> {
        check_id(id)?;
        let (values, clamps) = validate_morphology(schema, values)?;
        Ok(MorphologyCandidate {
            id: id.to_string(),
            values,
            provenance,
            parent_id,
            clamps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardDialect {
    BuiltinDsl,
    ExternalCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCandidate {
    pub id: String,
    pub source: String,
    pub dialect: RewardDialect,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl RewardCandidate {
    pub fn new(
        id: &str,
        source: &str,
        dialect: RewardDialect,
        provenance: Provenance,
        parent_id: Option<String>,
    ) -> Result<Self, ModelError> {
        check_id(id)?;
        let source = source.trim();
        if source.is_empty() {
            return Err(ModelError::EmptyReward);
        }
        if dialect == RewardDialect::BuiltinDsl {
            reward_lang::parse(source).map_err(ModelError::RewardParse)?;
        }
        Ok(RewardCandidate {
            id: id.to_string(),
            source: source.to_string(),
            dialect,
            provenance,
            parent_id,
        })
    }
}

/// A (morphology, reward) pair. Serialized as `"<morphology>_<reward>"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairKey {
    pub morphology_id: String,
    pub reward_id: String,
}

impl PairKey {
    pub fn new(morphology_id: &str, reward_id: &str) -> Self {
        PairKey {
            morphology_id: morphology_id.to_string(),
            reward_id: reward_id.to_string(),
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.morphology_id, self.reward_id)
    }
}

impl FromStr for PairKey {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        let (m, r) = s.split_once('_').ok_or_else(|| ModelError::InvalidId(s.to_string()))?;
        check_id(m)?;
        check_id(r)?;
        Ok(PairKey::new(m, r))
    }
}

impl Serialize for PairKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PairKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    RewardParseError,
    RuntimeError,
    Timeout,
    Nonfinite,
}

impl EvalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalStatus::Ok => "ok",
            EvalStatus::RewardParseError => "reward_parse_error",
            EvalStatus::RuntimeError => "runtime_error",
            EvalStatus::Timeout => "timeout",
            EvalStatus::Nonfinite => "nonfinite",
        }
    }
}

impl FromStr for EvalStatus {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Ok(match s {
            "ok" => EvalStatus::Ok,
            "reward_parse_error" => EvalStatus::RewardParseError,
            "runtime_error" => EvalStatus::RuntimeError,
            "timeout" => EvalStatus::Timeout,
            "nonfinite" => EvalStatus::Nonfinite,
            other => return Err(ModelError::InvalidConfig(format!("unknown status `{other}`"))),
        })
    }
}

/// Outcome of training and measuring one (morphology, reward) pair.
///
/// `status == Ok` exactly when fitness, volume and efficiency are all
/// present and finite. Use [`EvaluationResult::measured`] or
/// [`EvaluationResult::failed`] to build one; both uphold that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub pair: PairKey,
    pub status: EvalStatus,
    pub fitness: Option<f64>,
    pub volume: Option<f64>,
    pub efficiency: Option<f64>,
    pub train_return: Option<f64>,
    /// Seconds spent; not part of the canonical run state.
    #[serde(default)]
    pub wall_time: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl EvaluationResult {
    /// Builds a result from raw measurements. Non-finite numbers map to
    /// `nonfinite` and a non-positive volume to `runtime_error`.
    pub fn measured(pair: PairKey, fitness: f64, volume: f64, train_return: Option<f64>, seed: u64) -> Self {
        let train_return = train_return.filter(|r| r.is_finite());
        match efficiency(fitness, volume) {
            Ok(eff) if eff.is_finite() => EvaluationResult {
                pair,
                status: EvalStatus::Ok,
                fitness: Some(fitness),
                volume: Some(volume),
                efficiency: Some(eff),
                train_return,
                wall_time: 0.0,
                seed,
                detail: None,
            },
            Ok(_) | Err(ModelError::NonFiniteValue(_)) => Self::failed(
                pair,
                EvalStatus::Nonfinite,
                seed,
                Some("non-finite fitness or volume".into()),
            ),
            Err(e) => Self::failed(pair, EvalStatus::RuntimeError, seed, Some(e.to_string())),
        }
    }

    pub fn failed(pair: PairKey, status: EvalStatus, seed: u64, detail: Option<String>) -> Self {
        debug_assert!(status != EvalStatus::Ok);
        EvaluationResult {
            pair,
            status,
            fitness: None,
            volume: None,
            efficiency: None,
            train_return: None,
            wall_time: 0.0,
            seed,
            detail,
        }
    }

    pub fn with_pair(mut self, pair: PairKey) -> Self {
        self.pair = pair;
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok
    }

    /// Ordering score: efficiency for ok results, `-inf` otherwise.
    pub fn score(&self) -> f64 {
        match (self.status, self.efficiency) {
            (EvalStatus::Ok, Some(e)) => e,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// How the built-in or external evaluator is reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Builtin {
        #[serde(default)]
        cem: CemConfig,
        #[serde(default = "default_workers")]
        workers: usize,
    },
    Subprocess {
        argv: Vec<String>,
        #[serde(default = "default_workers")]
        workers: usize,
        /// Idle seconds without any message before a job is declared hung.
        #[serde(default = "default_idle_timeout")]
        idle_timeout_s: f64,
        #[serde(default = "default_handshake_timeout")]
        handshake_timeout_s: f64,
    },
}

fn default_workers() -> usize {
    2
}

fn default_idle_timeout() -> f64 {
    1800.0
}

fn default_handshake_timeout() -> f64 {
    10.0
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Builtin {
            cem: CemConfig::default(),
            workers: default_workers(),
        }
    }
}

pub const DEFAULT_API_KEY_ENV: &str = "CODESIGN_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    ScriptedMock {
        fixture_path: String,
    },
    HttpChat {
        endpoint: String,
        model: String,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::n_morphologies")]
    pub n_morphologies: usize,
    #[serde(default = "defaults::n_rewards")]
    pub n_rewards: usize,
    #[serde(default = "defaults::top_k_fraction")]
    pub top_k_fraction: f64,
    #[serde(default = "defaults::fine_max_iterations")]
    pub fine_max_iterations: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    pub llm: ProviderSpec,
    /// Steps handed to external trainers for every coarse evaluation.
    #[serde(default = "defaults::training_budget")]
    pub training_budget: u64,
    /// Budget for fine-stage evaluations; `None` reuses `training_budget`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_training_budget: Option<u64>,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::proposal_temperature")]
    pub proposal_temperature: f64,
    #[serde(default = "defaults::refine_temperature")]
    pub refine_temperature: f64,
    /// Character budget for a rendered prompt.
    #[serde(default = "defaults::context_budget")]
    pub context_budget: usize,
    /// Number of ranked pairs shown to refinement prompts.
    #[serde(default = "defaults::ranked_context")]
    pub ranked_context: usize,
}

mod defaults {
    pub fn n_morphologies() -> usize {
        25
    }
    pub fn n_rewards() -> usize {
        5
    }
    pub fn top_k_fraction() -> f64 {
        0.05
    }
    pub fn fine_max_iterations() -> u32 {
        10
    }
    pub fn training_budget() -> u64 {
        500_000
    }
    pub fn max_retries() -> u32 {
        2
    }
    pub fn proposal_temperature() -> f64 {
        1.0
    }
    pub fn refine_temperature() -> f64 {
        0.3
    }
    pub fn context_budget() -> usize {
        24_000
    }
    pub fn ranked_context() -> usize {
        5
    }
}

/// Budget the top candidate is retrained with in full-fidelity runs.
pub const EXTENDED_TRAINING_BUDGET: u64 = 1_000_000;

impl RunConfig {
    pub fn new(llm: ProviderSpec) -> Self {
        RunConfig {
            n_morphologies: defaults::n_morphologies(),
            n_rewards: defaults::n_rewards(),
            top_k_fraction: defaults::top_k_fraction(),
            fine_max_iterations: defaults::fine_max_iterations(),
            seed: 0,
            evaluator: EvaluatorSpec::default(),
            llm,
            training_budget: defaults::training_budget(),
            fine_training_budget: None,
            max_retries: defaults::max_retries(),
            proposal_temperature: defaults::proposal_temperature(),
            refine_temperature: defaults::refine_temperature(),
            context_budget: defaults::context_budget(),
            ranked_context: defaults::ranked_context(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_morphologies < 1 {
            return bad("n_morphologies must be at least 1");
        }
        if self.n_rewards < 1 {
            return bad("n_rewards must be at least 1");
        }
        if !(self.top_k_fraction > 0.0 && self.top_k_fraction <= 1.0) {
            return bad("top_k_fraction must lie in (0, 1]");
        }
        if self.ranked_context < 1 {
            return bad("ranked_context must be at least 1");
        }
        match &self.evaluator {
            EvaluatorSpec::Builtin { cem, workers } => {
                cem.validate().map_err(|e| ModelError::InvalidConfig(e.into()))?;
                if *workers < 1 {
                    return bad("workers must be at least 1");
                }
            }
            EvaluatorSpec::Subprocess {
                argv,
                workers,
                idle_timeout_s,
                handshake_timeout_s,
            } => {
                if argv.is_empty() {
                    return bad("subprocess evaluator needs a command");
                }
                if *workers < 1 {
                    return bad("workers must be at least 1");
                }
                if !(*idle_timeout_s > 0.0 && *handshake_timeout_s > 0.0) {
                    return bad("timeouts must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn fine_budget(&self) -> u64 {
        self.fine_training_budget.unwrap_or(self.training_budget)
    }

    /// `max(1, floor(fraction * ok_count))`.
    pub fn selection_count(&self, ok_count: usize) -> usize {
        selection_count(self.top_k_fraction, ok_count)
    }
}

pub fn selection_count(fraction: f64, ok_count: usize) -> usize {
    let k = libm::floor(fraction * ok_count as f64) as usize;
    k.clamp(1, ok_count.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Coarse,
    Fine,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinePhase {
    Morphology,
    Reward,
}

impl FinePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            FinePhase::Morphology => "morphology",
            FinePhase::Reward => "reward",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineStep {
    pub iteration: u32,
    pub phase: FinePhase,
    pub candidate_id: String,
    pub result: EvaluationResult,
    /// True exactly when the result strictly beat the incumbent.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Termination {
    /// An iteration accepted neither phase.
    Converged,
    IterationCap,
    ProviderFailure(String),
}

/// Final incumbent of one selected pair's refinement loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineOutcome {
    pub origin: PairKey,
    pub best: EvaluationResult,
    pub iterations: u32,
    pub termination: Termination,
}

/// Full, resumable state of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    pub schema: MorphologySchema,
    pub status: RunStatus,
    pub morphologies: Vec<MorphologyCandidate>,
    pub rewards: Vec<RewardCandidate>,
    pub grid: BTreeMap<PairKey, EvaluationResult>,
    pub selected: Vec<PairKey>,
    /// Candidates produced during refinement.
    pub refined_morphologies: Vec<MorphologyCandidate>,
    pub refined_rewards: Vec<RewardCandidate>,
    pub fine_trajectories: BTreeMap<PairKey, Vec<FineStep>>,
    pub fine_outcomes: BTreeMap<PairKey, FineOutcome>,
    /// Responses consumed from the language model, per prompt kind.
    pub llm_calls: BTreeMap<PromptTag, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

impl RunState {
    pub fn new(config: RunConfig, schema: MorphologySchema) -> Self {
        RunState {
            config,
            schema,
            status: RunStatus::Coarse,
            morphologies: Vec::new(),
            rewards: Vec::new(),
            grid: BTreeMap::new(),
            selected: Vec::new(),
            refined_morphologies: Vec::new(),
            refined_rewards: Vec::new(),
            fine_trajectories: BTreeMap::new(),
            fine_outcomes: BTreeMap::new(),
            llm_calls: BTreeMap::new(),
            abort_reason: None,
        }
    }

    pub fn morphology(&self, id: &str) -> Option<&MorphologyCandidate> {
        self.morphologies
            .iter()
            .chain(self.refined_morphologies.iter())
            .find(|m| m.id == id)
    }

    pub fn reward(&self, id: &str) -> Option<&RewardCandidate> {
        self.rewards
            .iter()
            .chain(self.refined_rewards.iter())
            .find(|r| r.id == id)
    }

    /// Every (morphology, reward) key of the coarse grid, row-major.
    pub fn grid_keys(&self) -> Vec<PairKey> {
        let mut keys = Vec::with_capacity(self.morphologies.len() * self.rewards.len());
        for m in &self.morphologies {
            for r in &self.rewards {
                keys.push(PairKey::new(&m.id, &r.id));
            }
        }
        keys
    }

    /// Best ok coarse-grid result.
    pub fn best_coarse(&self) -> Option<&EvaluationResult> {
        best_of(self.grid.values())
    }

    /// Globally best result after refinement, falling back to the grid.
    pub fn best_overall(&self) -> Option<&EvaluationResult> {
        best_of(self.grid.values().chain(self.fine_outcomes.values().map(|o| &o.best)))
    }

    /// Copy with wall-clock measurements zeroed, for byte-stable comparison.
    pub fn canonical(&self) -> RunState {
        let mut s = self.clone();
        for r in s.grid.values_mut() {
            r.wall_time = 0.0;
        }
        for steps in s.fine_trajectories.values_mut() {
            for st in steps {
                st.result.wall_time = 0.0;
            }
        }
        for o in s.fine_outcomes.values_mut() {
            o.best.wall_time = 0.0;
        }
        s
    }
}

/// Highest-scoring ok result; ties go to the smaller pair key.
pub fn best_of<'a>(it: impl Iterator<Item = &'a EvaluationResult>) -> Option<&'a EvaluationResult> {
    let mut best: Option<&EvaluationResult> = None;
    for r in it.filter(|r| r.is_ok()) {
        best = match best {
            None => Some(r),
            Some(b) if rank_cmp(r, b) == core::cmp::Ordering::Less => Some(r),
            keep => keep,
        };
    }
    best
}

/// Ranking order: efficiency descending, then pair key ascending.
pub fn rank_cmp(a: &EvaluationResult, b: &EvaluationResult) -> core::cmp::Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.pair.cmp(&b.pair))
}
