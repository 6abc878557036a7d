//! Starting and resuming runs on disk.

use std::path::{Path, PathBuf};

use codesign_core::engine::{Engine, EngineError, Evaluator, RunReport};
use codesign_core::llm::LanguageModel;
use codesign_core::model::{RunState, RunStatus};
use codesign_core::prompt::TaskContext;

use crate::bridge::{self, BridgeError};
use crate::config::{CliConfig, ConfigError};
use crate::provider::{self, OpenError};
use crate::report::{self, ReportError, ReportFormat};
use crate::store::{RunStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] OpenError),
    #[error(transparent)]
    Evaluator(#[from] BridgeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
    pub state: RunState,
    /// Report files written at the end of the run.
    pub reports: Vec<PathBuf>,
}

/// Starts a new run of `cfg` in `out`.
pub fn start(cfg: &CliConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let task = cfg.task.load()?;
    let llm = provider::open(&cfg.run.llm)?;
    let evaluator = bridge::open(&cfg.run.evaluator)?;
    let store = RunStore::init(out, &cfg.run, &task.schema, &task.context)?;
    let state = RunState::new(cfg.run.clone(), task.schema);
    execute(store, state, task.context, llm, evaluator)
}

/// Continues the run in `dir` with the provider and evaluator recorded in
/// its manifest.
pub fn resume(dir: &Path) -> Result<RunOutcome, RunError> {
    let (store, state, _) = RunStore::resume(dir)?;
    let ctx = store.task_context()?;
    let llm = provider::open(&state.config.llm)?;
    let evaluator = bridge::open(&state.config.evaluator)?;
    execute(store, state, ctx, llm, evaluator)
}

/// Drives the engine over an open store and writes both reports when the
/// grid is complete.
pub fn execute<L: LanguageModel, E: Evaluator>(
    store: RunStore,
    state: RunState,
    ctx: TaskContext,
    llm: L,
    evaluator: E,
) -> Result<RunOutcome, RunError> {
    let mut engine = Engine::new(state, ctx, llm, evaluator, store);
    let report = engine.run()?;
    let (state, _, _, store) = engine.into_parts();
    let mut reports = Vec::new();
    if state.status == RunStatus::Done || !state.grid.is_empty() {
        for format in [ReportFormat::Csv, ReportFormat::Md] {
            match report::write_report(&state, format, &store.report_dir()) {
                Ok(p) => reports.push(p),
                Err(ReportError::NotReady(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(RunOutcome {
        dir: store.dir().to_path_buf(),
        report,
        state,
        reports,
    })
}
