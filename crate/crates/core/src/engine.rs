//! The two-stage search.
//!
//! Coarse stage: propose `n_morphologies` morphologies and `n_rewards`
//! rewards one at a time, each prompt reflecting on everything proposed
//! before it; evaluate the full grid; keep the top fraction by efficiency.
//! Fine stage: for each kept pair, alternately refine the morphology (reward
//! held fixed) and the reward (morphology held fixed), accepting a candidate
//! only on a strict efficiency improvement, until an iteration improves
//! nothing or the iteration cap is hit.
//!
//! The engine works on a [`RunState`] and skips whatever that state already
//! contains, so a state reloaded from disk resumes where it stopped. Every
//! mutation is reported to a [`Journal`] before the engine moves on.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::ControlFlow;

use crate::cem::CemConfig;
use crate::crawler::{self, SimConfig};
use crate::llm::{self, LanguageModel, LlmRequest, PromptTag, ProviderError};
use crate::model::{
    rank_cmp, selection_count, EvalStatus, EvaluationResult, EvaluatorSpec, FineOutcome, FinePhase, FineStep,
    MorphologyCandidate, PairKey, Provenance, RewardCandidate, RewardDialect, RunState, RunStatus, Termination,
};
use crate::prompt::{self, ArchiveEntry, Prompt, PromptError, PromptKind, PromptTemplates, RankedSample, TaskContext};
use crate::seed;

/// Refill rounds after the first round of attempts fails to parse.
pub const PROPOSAL_REFILLS: u32 = 3;

/// One (morphology, reward) evaluation request.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalJob {
    pub pair: PairKey,
    pub schema_name: String,
    pub morphology: MorphologyCandidate,
    pub reward: RewardCandidate,
    pub training_budget: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("evaluator failure: {0}")]
pub struct EvaluatorError(pub String);

/// Maps (morphology, reward) pairs to evaluation results.
pub trait Evaluator {
    /// Evaluates every job and hands each result to `sink` as it completes,
    /// in any order. Stops early if `sink` breaks. Per-job failures are
    /// results with a non-ok status; `Err` means the backend itself is gone.
    fn evaluate(
        &mut self,
        jobs: &[EvalJob],
        sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
    ) -> Result<(), EvaluatorError>;
}

impl<E: Evaluator + ?Sized> Evaluator for &mut E {
    fn evaluate(
        &mut self,
        jobs: &[EvalJob],
        sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
    ) -> Result<(), EvaluatorError> {
        (**self).evaluate(jobs, sink)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(
        &mut self,
        jobs: &[EvalJob],
        sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
    ) -> Result<(), EvaluatorError> {
        (**self).evaluate(jobs, sink)
    }
}

/// In-process crawler evaluator, one job after another.
#[derive(Debug, Clone, Default)]
pub struct BuiltinEvaluator {
    pub cem: CemConfig,
    pub sim: SimConfig,
}

impl BuiltinEvaluator {
    pub fn new(cem: CemConfig) -> Self {
        BuiltinEvaluator {
            cem,
            sim: SimConfig::default(),
        }
    }

    pub fn run_job(&self, job: &EvalJob) -> EvaluationResult {
        crawler::evaluate_builtin(&job.morphology, &job.reward, &self.cem.with_seed(job.seed), &self.sim)
            .with_pair(job.pair.clone())
    }
}

impl Evaluator for BuiltinEvaluator {
    fn evaluate(
        &mut self,
        jobs: &[EvalJob],
        sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
    ) -> Result<(), EvaluatorError> {
        for job in jobs {
            if sink(self.run_job(job)).is_break() {
                break;
            }
        }
        Ok(())
    }
}

/// A state change the engine has just applied.
#[derive(Debug, Clone, Copy)]
pub enum JournalEvent<'a> {
    MorphologyAdmitted(&'a MorphologyCandidate),
    RewardAdmitted(&'a RewardCandidate),
    GridResult(&'a EvaluationResult),
    Selected(&'a [PairKey]),
    FineStep {
        origin: &'a PairKey,
        step: &'a FineStep,
        morphology: Option<&'a MorphologyCandidate>,
        reward: Option<&'a RewardCandidate>,
    },
    FineDone(&'a FineOutcome),
    Status(RunStatus),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("journal write failed: {0}")]
pub struct JournalError(pub String);

/// Durable record of a run. `state` already includes the event.
pub trait Journal {
    fn record(&mut self, event: JournalEvent<'_>, state: &RunState) -> Result<(), JournalError>;
}

impl<J: Journal + ?Sized> Journal for &mut J {
    fn record(&mut self, event: JournalEvent<'_>, state: &RunState) -> Result<(), JournalError> {
        (**self).record(event, state)
    }
}

/// Discards every event.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoJournal;

impl Journal for NoJournal {
    fn record(&mut self, _: JournalEvent<'_>, _: &RunState) -> Result<(), JournalError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid run state: {0}")]
    InvalidState(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectError {
    #[error("no evaluation finished with status ok")]
    NoViableCandidates,
}

/// The `max(1, floor(fraction * ok))` best ok results, efficiency
/// descending with ties broken by pair key.
pub fn select_top_k<'a>(
    results: impl IntoIterator<Item = &'a EvaluationResult>,
    fraction: f64,
) -> Result<Vec<PairKey>, SelectError> {
    let mut ok: Vec<&EvaluationResult> = results.into_iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(SelectError::NoViableCandidates);
    }
    ok.sort_by(|a, b| rank_cmp(a, b));
    let k = selection_count(fraction, ok.len());
    Ok(ok[..k].iter().map(|r| r.pair.clone()).collect())
}

#[derive(Debug)]
enum ProposalFailure {
    Provider(ProviderError),
    Unparseable(String),
}

impl ProposalFailure {
    fn describe(&self) -> String {
        match self {
            ProposalFailure::Provider(e) => e.to_string(),
            ProposalFailure::Unparseable(e) => format!("no parseable response after all retries: {e}"),
        }
    }
}

/// Summary of a finished (or aborted) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub status: RunStatus,
    pub best: Option<EvaluationResult>,
    pub best_coarse: Option<EvaluationResult>,
    pub selected: Vec<PairKey>,
    pub outcomes: Vec<FineOutcome>,
    pub abort_reason: Option<String>,
}

impl RunReport {
    pub fn from_state(state: &RunState) -> Self {
        RunReport {
            status: state.status,
            best: state.best_overall().cloned(),
            best_coarse: state.best_coarse().cloned(),
            selected: state.selected.clone(),
            outcomes: state.fine_outcomes.values().cloned().collect(),
            abort_reason: state.abort_reason.clone(),
        }
    }
}

pub struct Engine<L, E, J> {
    state: RunState,
    ctx: TaskContext,
    templates: PromptTemplates,
    llm: L,
    evaluator: E,
    journal: J,
}

impl<L: LanguageModel, E: Evaluator, J: Journal> Engine<L, E, J> {
    pub fn new(state: RunState, ctx: TaskContext, llm: L, evaluator: E, journal: J) -> Self {
        Engine {
            state,
            ctx,
            templates: PromptTemplates::default(),
            llm,
            evaluator,
            journal,
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_parts(self) -> (RunState, L, E, J) {
        (self.state, self.llm, self.evaluator, self.journal)
    }

    fn dialect(&self) -> RewardDialect {
        match self.state.config.evaluator {
            EvaluatorSpec::Builtin { .. } => RewardDialect::BuiltinDsl,
            EvaluatorSpec::Subprocess { .. } => RewardDialect::ExternalCode,
        }
    }

    fn record(&mut self, event: JournalEvent<'_>) -> Result<(), EngineError> {
        self.journal.record(event, &self.state)?;
        Ok(())
    }

    fn set_status(&mut self, status: RunStatus) -> Result<(), EngineError> {
        self.state.status = status;
        self.journal.record(JournalEvent::Status(status), &self.state)?;
        Ok(())
    }

    fn abort(&mut self, reason: String) -> Result<RunReport, EngineError> {
        self.state.abort_reason = Some(reason);
        self.set_status(RunStatus::Aborted)?;
        Ok(RunReport::from_state(&self.state))
    }

    /// Runs (or resumes) both stages to completion.
    pub fn run(&mut self) -> Result<RunReport, EngineError> {
        self.state
            .config
            .validate()
            .map_err(|e| EngineError::InvalidState(e.to_string()))?;
        self.llm.resume_from(&self.state.llm_calls);
        match self.state.status {
            RunStatus::Done => return Ok(RunReport::from_state(&self.state)),
            RunStatus::Aborted => {
                self.state.abort_reason = None;
                self.state.status = if self.state.selected.is_empty() && self.state.grid.len() < self.expected_grid() {
                    RunStatus::Coarse
                } else {
                    RunStatus::Fine
                };
            }
            _ => {}
        }
        if self.state.status == RunStatus::Coarse {
            if let Some(reason) = self.coarse_stage()? {
                return self.abort(reason);
            }
        }
        self.fine_stage()?;
        self.set_status(RunStatus::Done)?;
        Ok(RunReport::from_state(&self.state))
    }

    fn expected_grid(&self) -> usize {
        self.state.config.n_morphologies * self.state.config.n_rewards
    }

    /// Returns an abort reason, or `None` once the grid is complete and the
    /// selection recorded.
    fn coarse_stage(&mut self) -> Result<Option<String>, EngineError> {
        while self.state.morphologies.len() < self.state.config.n_morphologies {
            if let Err(f) = self.propose_morphology()? {
                return Ok(Some(format!("morphology proposal failed: {}", f.describe())));
            }
        }
        while self.state.rewards.len() < self.state.config.n_rewards {
            if let Err(f) = self.propose_reward()? {
                return Ok(Some(format!("reward proposal failed: {}", f.describe())));
            }
        }
        if let Err(e) = self.evaluate_grid()? {
            return Ok(Some(e.to_string()));
        }
        let selected = select_top_k(self.state.grid.values(), self.state.config.top_k_fraction).unwrap_or_default();
        self.state.selected = selected.clone();
        self.record(JournalEvent::Selected(&selected))?;
        self.set_status(RunStatus::Fine)?;
        Ok(None)
    }

    /// Sends `prompt` and parses the reply, re-prompting with a corrective
    /// note up to `max_retries` times per round and starting a fresh round
    /// up to [`PROPOSAL_REFILLS`] times.
    fn ask<T>(
        &mut self,
        tag: PromptTag,
        prompt: &Prompt,
        temperature: f64,
        mut parse: impl FnMut(&str) -> Result<T, String>,
    ) -> Result<T, ProposalFailure> {
        let max_retries = self.state.config.max_retries;
        let mut last_error = String::new();
        for _round in 0..=PROPOSAL_REFILLS {
            for attempt in 0..=max_retries {
                let user_prompt = if attempt == 0 {
                    prompt.user.clone()
                } else {
                    prompt::with_correction(&prompt.user, &last_error, &self.templates)
                };
                let request = LlmRequest {
                    system_prompt: prompt.system.clone(),
                    user_prompt,
                    temperature,
                    max_retries,
                    tag,
                };
                let reply = self.llm.complete(&request).map_err(ProposalFailure::Provider)?;
                *self.state.llm_calls.entry(tag).or_insert(0) += 1;
                match parse(&reply) {
                    Ok(v) => return Ok(v),
                    Err(e) => last_error = e,
                }
            }
        }
        Err(ProposalFailure::Unparseable(last_error))
    }

    fn propose_morphology(&mut self) -> Result<Result<(), ProposalFailure>, EngineError> {
        let archive: Vec<ArchiveEntry> = self
            .state
            .morphologies
            .iter()
            .map(|m| ArchiveEntry::Morphology {
                id: m.id.clone(),
                values: m.values.clone(),
                efficiency: None,
            })
            .collect();
        let prompt = prompt::build_proposal_prompt(
            PromptKind::Morphology,
            &self.ctx,
            &archive,
            &self.templates,
            self.state.config.context_budget,
        )?;
        let id = format!("m{}", self.state.morphologies.len() + 1);
        let schema = self.state.schema.clone();
        let temperature = self.state.config.proposal_temperature;
        let cand = match self.ask(PromptTag::MorphPropose, &prompt, temperature, |reply| {
            let values = llm::extract_params_block(reply, &schema).map_err(|e| e.to_string())?;
            MorphologyCandidate::admit(&id, &schema, &values, Provenance::LlmProposal, None).map_err(|e| e.to_string())
        }) {
            Ok(c) => c,
            Err(f) => return Ok(Err(f)),
        };
        self.state.morphologies.push(cand);
        let cand = self.state.morphologies.last().expect("just pushed").clone();
        self.record(JournalEvent::MorphologyAdmitted(&cand))?;
        Ok(Ok(()))
    }

    fn propose_reward(&mut self) -> Result<Result<(), ProposalFailure>, EngineError> {
        let archive: Vec<ArchiveEntry> = self
            .state
            .rewards
            .iter()
            .map(|r| ArchiveEntry::Reward {
                id: r.id.clone(),
                source: r.source.clone(),
                efficiency: None,
            })
            .collect();
        let prompt = prompt::build_proposal_prompt(
            PromptKind::Reward,
            &self.ctx,
            &archive,
            &self.templates,
            self.state.config.context_budget,
        )?;
        let id = format!("r{}", self.state.rewards.len() + 1);
        let dialect = self.dialect();
        let temperature = self.state.config.proposal_temperature;
        let cand = match self.ask(PromptTag::RewardPropose, &prompt, temperature, |reply| {
            let code = llm::extract_code_block(reply).map_err(|e| e.to_string())?;
            RewardCandidate::new(&id, &code, dialect, Provenance::LlmProposal, None).map_err(|e| e.to_string())
        }) {
            Ok(c) => c,
            Err(f) => return Ok(Err(f)),
        };
        self.state.rewards.push(cand);
        let cand = self.state.rewards.last().expect("just pushed").clone();
        self.record(JournalEvent::RewardAdmitted(&cand))?;
        Ok(Ok(()))
    }

    fn job(&self, morphology: &MorphologyCandidate, reward: &RewardCandidate, budget: u64) -> EvalJob {
        EvalJob {
            pair: PairKey::new(&morphology.id, &reward.id),
            schema_name: self.state.schema.name().to_string(),
            morphology: morphology.clone(),
            reward: reward.clone(),
            training_budget: budget,
            seed: seed::for_pair(self.state.config.seed, &morphology.values, &reward.source),
        }
    }

    /// Evaluates every grid cell without a result. The outer error is a
    /// journal failure; the inner one a dead evaluator backend.
    fn evaluate_grid(&mut self) -> Result<Result<(), EvaluatorError>, EngineError> {
        let budget = self.state.config.training_budget;
        let jobs: Vec<EvalJob> = self
            .state
            .morphologies
            .iter()
            .flat_map(|m| self.state.rewards.iter().map(move |r| (m, r)))
            .filter(|(m, r)| !self.state.grid.contains_key(&PairKey::new(&m.id, &r.id)))
            .map(|(m, r)| self.job(m, r, budget))
            .collect();
        if jobs.is_empty() {
            return Ok(Ok(()));
        }
        let mut journal_err = None;
        let state = &mut self.state;
        let journal = &mut self.journal;
        let outcome = self.evaluator.evaluate(&jobs, &mut |res: EvaluationResult| {
            if !jobs.iter().any(|j| j.pair == res.pair) || state.grid.contains_key(&res.pair) {
                return ControlFlow::Continue(());
            }
            state.grid.insert(res.pair.clone(), res.clone());
            match journal.record(JournalEvent::GridResult(&res), state) {
                Ok(()) => ControlFlow::Continue(()),
                Err(e) => {
                    journal_err = Some(e);
                    ControlFlow::Break(())
                }
            }
        });
        if let Some(e) = journal_err {
            return Err(e.into());
        }
        if let Err(e) = outcome {
            return Ok(Err(e));
        }
        let missing = jobs.iter().filter(|j| !self.state.grid.contains_key(&j.pair)).count();
        if missing > 0 {
            return Ok(Err(EvaluatorError(format!(
                "{missing} grid cell(s) were not evaluated"
            ))));
        }
        Ok(Ok(()))
    }

    fn fine_stage(&mut self) -> Result<(), EngineError> {
        for origin in self.state.selected.clone() {
            if self.state.fine_outcomes.contains_key(&origin) {
                continue;
            }
            self.fine_optimize(&origin)?;
        }
        Ok(())
    }

    fn evaluate_one(&mut self, job: EvalJob) -> EvaluationResult {
        let mut got = None;
        let outcome = self.evaluator.evaluate(core::slice::from_ref(&job), &mut |r| {
            got = Some(r);
            ControlFlow::Break(())
        });
        match (got, outcome) {
            (Some(r), _) => r.with_pair(job.pair),
            (None, Err(e)) => EvaluationResult::failed(job.pair, EvalStatus::RuntimeError, job.seed, Some(e.0)),
            (None, Ok(())) => EvaluationResult::failed(
                job.pair,
                EvalStatus::RuntimeError,
                job.seed,
                Some("evaluator returned no result".into()),
            ),
        }
    }

    fn ranked_sample(&self, r: &EvaluationResult) -> Option<RankedSample> {
        let m = self.state.morphology(&r.pair.morphology_id)?;
        let rw = self.state.reward(&r.pair.reward_id)?;
        Some(RankedSample {
            morphology_id: m.id.clone(),
            values: m.values.clone(),
            reward_id: rw.id.clone(),
            reward_source: rw.source.clone(),
            efficiency: r.score(),
        })
    }

    /// Top ok results from the grid and this pair's refinement history.
    fn ranked_context(&self, origin: &PairKey) -> Vec<RankedSample> {
        let mut pool: Vec<&EvaluationResult> = self.state.grid.values().filter(|r| r.is_ok()).collect();
        if let Some(steps) = self.state.fine_trajectories.get(origin) {
            pool.extend(steps.iter().map(|s| &s.result).filter(|r| r.is_ok()));
        }
        pool.sort_by(|a, b| rank_cmp(a, b));
        pool.dedup_by(|a, b| a.pair == b.pair);
        pool.iter()
            .take(self.state.config.ranked_context)
            .filter_map(|r| self.ranked_sample(r))
            .collect()
    }

    fn fine_optimize(&mut self, origin: &PairKey) -> Result<(), EngineError> {
        let mut incumbent = self
            .state
            .grid
            .get(origin)
            .filter(|r| r.is_ok())
            .cloned()
            .ok_or_else(|| EngineError::InvalidState(format!("selected pair {origin} has no ok result")))?;
        let steps = self.state.fine_trajectories.get(origin).cloned().unwrap_or_default();
        let mut iteration = 1;
        let mut phase = FinePhase::Morphology;
        let mut improved = false;
        for s in &steps {
            if s.accepted {
                incumbent = s.result.clone();
            }
            improved |= s.accepted;
            (iteration, phase) = (s.iteration, s.phase);
        }
        let max = self.state.config.fine_max_iterations;
        let mut termination = None;
        if let Some(last) = steps.last() {
            let iter_improved = steps.iter().any(|s| s.iteration == last.iteration && s.accepted);
            match last.phase {
                FinePhase::Morphology => phase = FinePhase::Reward,
                FinePhase::Reward if !iter_improved => termination = Some(Termination::Converged),
                FinePhase::Reward => {
                    iteration += 1;
                    phase = FinePhase::Morphology;
                }
            }
            improved = iter_improved;
        }
        while termination.is_none() {
            if iteration > max {
                termination = Some(Termination::IterationCap);
                break;
            }
            if phase == FinePhase::Morphology {
                improved = false;
            }
            match self.refine_step(origin, &incumbent, iteration, phase)? {
                Err(reason) => termination = Some(Termination::ProviderFailure(reason)),
                Ok(step) => {
                    if step.accepted {
                        incumbent = step.result.clone();
                        improved = true;
                    }
                    match phase {
                        FinePhase::Morphology => phase = FinePhase::Reward,
                        FinePhase::Reward if !improved => termination = Some(Termination::Converged),
                        FinePhase::Reward => {
                            iteration += 1;
                            phase = FinePhase::Morphology;
                        }
                    }
                }
            }
        }
        let iterations = self
            .state
            .fine_trajectories
            .get(origin)
            .and_then(|s| s.last())
            .map_or(0, |s| s.iteration);
        let outcome = FineOutcome {
            origin: origin.clone(),
            best: incumbent,
            iterations,
            termination: termination.expect("loop exits with a termination"),
        };
        self.state.fine_outcomes.insert(origin.clone(), outcome.clone());
        self.record(JournalEvent::FineDone(&outcome))
    }

    /// One refinement phase. The inner `Err` carries a provider failure that
    /// ends this pair's refinement.
    fn refine_step(
        &mut self,
        origin: &PairKey,
        incumbent: &EvaluationResult,
        iteration: u32,
        phase: FinePhase,
    ) -> Result<Result<FineStep, String>, EngineError> {
        let current = self
            .ranked_sample(incumbent)
            .ok_or_else(|| EngineError::InvalidState(format!("unknown candidates in {}", incumbent.pair)))?;
        let ranked = self.ranked_context(origin);
        let (kind, tag) = match phase {
            FinePhase::Morphology => (PromptKind::Morphology, PromptTag::MorphRefine),
            FinePhase::Reward => (PromptKind::Reward, PromptTag::RewardRefine),
        };
        let prompt = prompt::build_refine_prompt(
            kind,
            &self.ctx,
            &current,
            &ranked,
            &self.templates,
            self.state.config.context_budget,
        )?;
        let temperature = self.state.config.refine_temperature;
        let budget = self.state.config.fine_budget();
        let inc_m = self
            .state
            .morphology(&incumbent.pair.morphology_id)
            .cloned()
            .ok_or_else(|| EngineError::InvalidState("incumbent morphology missing".into()))?;
        let inc_r = self
            .state
            .reward(&incumbent.pair.reward_id)
            .cloned()
            .ok_or_else(|| EngineError::InvalidState("incumbent reward missing".into()))?;

        let (job, new_m, new_r) = match phase {
            FinePhase::Morphology => {
                let id = format!(
                    "m{}",
                    self.state.morphologies.len() + self.state.refined_morphologies.len() + 1
                );
                let schema = self.state.schema.clone();
                let parent = Some(inc_m.id.clone());
                let cand = match self.ask(tag, &prompt, temperature, |reply| {
                    let values = llm::extract_params_block(reply, &schema).map_err(|e| e.to_string())?;
                    MorphologyCandidate::admit(&id, &schema, &values, Provenance::LlmRefinement, parent.clone())
                        .map_err(|e| e.to_string())
                }) {
                    Ok(c) => c,
                    Err(f) => return Ok(Err(f.describe())),
                };
                (self.job(&cand, &inc_r, budget), Some(cand), None)
            }
            FinePhase::Reward => {
                let id = format!("r{}", self.state.rewards.len() + self.state.refined_rewards.len() + 1);
                let dialect = self.dialect();
                let parent = Some(inc_r.id.clone());
                let cand = match self.ask(tag, &prompt, temperature, |reply| {
                    let code = llm::extract_code_block(reply).map_err(|e| e.to_string())?;
                    RewardCandidate::new(&id, &code, dialect, Provenance::LlmRefinement, parent.clone())
                        .map_err(|e| e.to_string())
                }) {
                    Ok(c) => c,
                    Err(f) => return Ok(Err(f.describe())),
                };
                (self.job(&inc_m, &cand, budget), None, Some(cand))
            }
        };
        let candidate_id = new_m
            .as_ref()
            .map(|m| m.id.clone())
            .or_else(|| new_r.as_ref().map(|r| r.id.clone()))
            .unwrap_or_default();
        let result = self.evaluate_one(job);
        let accepted = result.is_ok() && result.score() > incumbent.score();
        let step = FineStep {
            iteration,
            phase,
            candidate_id,
            result,
            accepted,
        };
        if let Some(m) = &new_m {
            self.state.refined_morphologies.push(m.clone());
        }
        if let Some(r) = &new_r {
            self.state.refined_rewards.push(r.clone());
        }
        self.state
            .fine_trajectories
            .entry(origin.clone())
            .or_default()
            .push(step.clone());
        self.record(JournalEvent::FineStep {
            origin,
            step: &step,
            morphology: new_m.as_ref(),
            reward: new_r.as_ref(),
        })?;
        Ok(Ok(step))
    }
}
