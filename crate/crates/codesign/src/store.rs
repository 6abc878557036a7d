//! Run directories.
//!
//! ```text
//! <run>/manifest.json               config, status, completed keys
//! <run>/schema.json  task.json
//! <run>/morphologies/m1.json        one file per admitted candidate
//! <run>/rewards/r1.json
//! <run>/grid/m1_r1.json             one file per coarse evaluation
//! <run>/fine/m1_r1/iter_1_morphology.json
//! <run>/fine/m1_r1/outcome.json
//! <run>/report/
//! ```
//!
//! Every file is written to a temporary name and renamed into place. A
//! result file counts only once its key is in the manifest, so a crash
//! between the two writes leaves an orphan that is overwritten on resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use codesign_core::engine::{Journal, JournalError, JournalEvent};
use codesign_core::llm::PromptTag;
use codesign_core::model::{
    EvaluationResult, FineOutcome, FinePhase, FineStep, MorphologyCandidate, MorphologySchema, PairKey,
    RewardCandidate, RunConfig, RunState, RunStatus,
};
use codesign_core::prompt::TaskContext;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const TASK_FILE: &str = "task.json";
pub const SUBDIRS: [&str; 5] = ["morphologies", "rewards", "grid", "fine", "report"];
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0} exists and is not empty")]
    DirNotEmpty(PathBuf),
    #[error("key `{0}` is already recorded")]
    DuplicateKey(String),
    #[error("corrupt run directory: {0}")]
    CorruptRun(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a completed unit of work is filed under.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum RecordKey {
    Morphology(String),
    Reward(String),
    Grid(PairKey),
    FineStep {
        origin: PairKey,
        iteration: u32,
        phase: FinePhase,
    },
    FineDone(PairKey),
}

impl RecordKey {
    /// Location of the record, relative to the run directory.
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(format!("{self}.json"))
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordKey::Morphology(id) => write!(f, "morphologies/{id}"),
            RecordKey::Reward(id) => write!(f, "rewards/{id}"),
            RecordKey::Grid(p) => write!(f, "grid/{p}"),
            RecordKey::FineStep {
                origin,
                iteration,
                phase,
            } => write!(f, "fine/{origin}/iter_{iteration}_{}", phase.as_str()),
            RecordKey::FineDone(p) => write!(f, "fine/{p}/outcome"),
        }
    }
}

impl FromStr for RecordKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("unrecognized record key `{s}`");
        let pair = |p: &str| p.parse::<PairKey>().map_err(|_| bad());
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            ["morphologies", id] => Ok(RecordKey::Morphology(id.to_string())),
            ["rewards", id] => Ok(RecordKey::Reward(id.to_string())),
            ["grid", p] => Ok(RecordKey::Grid(pair(p)?)),
            ["fine", p, "outcome"] => Ok(RecordKey::FineDone(pair(p)?)),
            ["fine", p, step] => {
                let rest = step.strip_prefix("iter_").ok_or_else(bad)?;
                let (n, phase) = rest.split_once('_').ok_or_else(bad)?;
                let phase = match phase {
                    "morphology" => FinePhase::Morphology,
                    "reward" => FinePhase::Reward,
                    _ => return Err(bad()),
                };
                Ok(RecordKey::FineStep {
                    origin: pair(p)?,
                    iteration: n.parse().map_err(|_| bad())?,
                    phase,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub schema_fingerprint: String,
    pub status: RunStatus,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Keys in completion order; append-only.
    pub completed: Vec<String>,
    pub selected: Vec<PairKey>,
    /// Language-model responses consumed so far, per prompt tag.
    pub llm_calls: BTreeMap<PromptTag, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

/// A refinement step together with the candidate it introduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineStepRecord {
    pub step: FineStep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub morphology: Option<MorphologyCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardCandidate>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("run data serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            StoreError::CorruptRun(format!("{} is missing", path.display()))
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| StoreError::CorruptRun(format!("{}: {e}", path.display())))
}

/// Handle on one run directory.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    done: BTreeSet<String>,
}

/// Work a resumed run still has to do, as record keys.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pending {
    pub keys: Vec<String>,
}

impl Pending {
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn grid_count(&self) -> usize {
        self.keys.iter().filter(|k| k.starts_with("grid/")).count()
    }
}

impl RunStore {
    /// Creates the directory layout for a new run. `dir` must be absent or
    /// empty.
    pub fn init(
        dir: &Path,
        config: &RunConfig,
        schema: &MorphologySchema,
        context: &TaskContext,
    ) -> Result<Self, StoreError> {
        if dir.exists() {
            let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
            if entries.next().is_some() {
                return Err(StoreError::DirNotEmpty(dir.to_path_buf()));
            }
        }
        for sub in SUBDIRS {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        write_json(&dir.join(SCHEMA_FILE), schema)?;
        write_json(&dir.join(TASK_FILE), context)?;
        let now = now_unix();
        let manifest = RunManifest {
            format: FORMAT_VERSION,
            config: config.clone(),
            seed: config.seed,
            schema_fingerprint: schema.fingerprint(),
            status: RunStatus::Coarse,
            created_unix: now,
            updated_unix: now,
            completed: Vec::new(),
            selected: Vec::new(),
            llm_calls: BTreeMap::new(),
            abort_reason: None,
        };
        let store = RunStore {
            dir: dir.to_path_buf(),
            manifest,
            done: BTreeSet::new(),
        };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(StoreError::CorruptRun(format!(
                "{} has no {MANIFEST_FILE}",
                dir.display()
            )));
        }
        let manifest: RunManifest = read_json(&path)?;
        if manifest.format != FORMAT_VERSION {
            return Err(StoreError::CorruptRun(format!(
                "unsupported format {}",
                manifest.format
            )));
        }
        let done: BTreeSet<String> = manifest.completed.iter().cloned().collect();
        if done.len() != manifest.completed.len() {
            return Err(StoreError::CorruptRun("manifest lists a key twice".into()));
        }
        Ok(RunStore {
            dir: dir.to_path_buf(),
            manifest,
            done,
        })
    }

    /// Opens a run and rebuilds its state from the recorded files.
    pub fn resume(dir: &Path) -> Result<(Self, RunState, Pending), StoreError> {
        let store = RunStore::open(dir)?;
        let state = store.load_state()?;
        let pending = pending(&state);
        Ok((store, state, pending))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    pub fn is_recorded(&self, key: &RecordKey) -> bool {
        self.done.contains(&key.to_string())
    }

    pub fn schema(&self) -> Result<MorphologySchema, StoreError> {
        let schema: MorphologySchema = read_json(&self.dir.join(SCHEMA_FILE))?;
        if schema.fingerprint() != self.manifest.schema_fingerprint {
            return Err(StoreError::CorruptRun("schema.json does not match the manifest".into()));
        }
        Ok(schema)
    }

    pub fn task_context(&self) -> Result<TaskContext, StoreError> {
        read_json(&self.dir.join(TASK_FILE))
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }

    fn touch(&mut self) -> Result<(), StoreError> {
        self.manifest.updated_unix = now_unix();
        self.write_manifest()
    }

    /// Writes the record file, then appends its key to the manifest.
    pub fn record<T: Serialize + ?Sized>(&mut self, key: &RecordKey, value: &T) -> Result<(), StoreError> {
        let name = key.to_string();
        if self.done.contains(&name) {
            return Err(StoreError::DuplicateKey(name));
        }
        write_json(&self.dir.join(key.relative_path()), value)?;
        self.manifest.completed.push(name.clone());
        self.done.insert(name);
        self.touch()
    }

    pub fn set_status(&mut self, status: RunStatus, abort_reason: Option<String>) -> Result<(), StoreError> {
        self.manifest.status = status;
        self.manifest.abort_reason = abort_reason;
        self.touch()
    }

    pub fn set_selected(&mut self, selected: &[PairKey]) -> Result<(), StoreError> {
        self.manifest.selected = selected.to_vec();
        self.touch()
    }

    /// Reads every recorded file back into a [`RunState`].
    pub fn load_state(&self) -> Result<RunState, StoreError> {
        let mut state = RunState::new(self.manifest.config.clone(), self.schema()?);
        state.status = self.manifest.status;
        state.selected = self.manifest.selected.clone();
        state.llm_calls = self.manifest.llm_calls.clone();
        state.abort_reason = self.manifest.abort_reason.clone();
        for name in &self.manifest.completed {
            let key: RecordKey = name.parse().map_err(StoreError::CorruptRun)?;
            let path = self.dir.join(key.relative_path());
            match key {
                RecordKey::Morphology(_) => state.morphologies.push(read_json(&path)?),
                RecordKey::Reward(_) => state.rewards.push(read_json(&path)?),
                RecordKey::Grid(p) => {
                    let r: EvaluationResult = read_json(&path)?;
                    state.grid.insert(p, r);
                }
                RecordKey::FineStep { origin, .. } => {
                    let rec: FineStepRecord = read_json(&path)?;
                    state.refined_morphologies.extend(rec.morphology);
                    state.refined_rewards.extend(rec.reward);
                    state.fine_trajectories.entry(origin).or_default().push(rec.step);
                }
                RecordKey::FineDone(p) => {
                    let o: FineOutcome = read_json(&path)?;
                    state.fine_outcomes.insert(p, o);
                }
            }
        }
        Ok(state)
    }

    fn apply(&mut self, event: JournalEvent<'_>, state: &RunState) -> Result<(), StoreError> {
        self.manifest.llm_calls = state.llm_calls.clone();
        match event {
            JournalEvent::MorphologyAdmitted(m) => self.record(&RecordKey::Morphology(m.id.clone()), m),
            JournalEvent::RewardAdmitted(r) => self.record(&RecordKey::Reward(r.id.clone()), r),
            JournalEvent::GridResult(r) => self.record(&RecordKey::Grid(r.pair.clone()), r),
            JournalEvent::Selected(sel) => self.set_selected(sel),
            JournalEvent::FineStep {
                origin,
                step,
                morphology,
                reward,
            } => {
                let key = RecordKey::FineStep {
                    origin: origin.clone(),
                    iteration: step.iteration,
                    phase: step.phase,
                };
                let rec = FineStepRecord {
                    step: step.clone(),
                    morphology: morphology.cloned(),
                    reward: reward.cloned(),
                };
                self.record(&key, &rec)
            }
            JournalEvent::FineDone(o) => self.record(&RecordKey::FineDone(o.origin.clone()), o),
            JournalEvent::Status(s) => self.set_status(s, state.abort_reason.clone()),
        }
    }
}

impl Journal for RunStore {
    fn record(&mut self, event: JournalEvent<'_>, state: &RunState) -> Result<(), JournalError> {
        self.apply(event, state).map_err(|e| JournalError(e.to_string()))
    }
}

/// Record keys a run still needs: unproposed candidates, unevaluated grid
/// cells and unfinished refinements.
pub fn pending(state: &RunState) -> Pending {
    let cfg = &state.config;
    let mut keys = Vec::new();
    for i in state.morphologies.len() + 1..=cfg.n_morphologies {
        keys.push(RecordKey::Morphology(format!("m{i}")).to_string());
    }
    for j in state.rewards.len() + 1..=cfg.n_rewards {
        keys.push(RecordKey::Reward(format!("r{j}")).to_string());
    }
    for i in 1..=cfg.n_morphologies {
        for j in 1..=cfg.n_rewards {
            let p = PairKey::new(&format!("m{i}"), &format!("r{j}"));
            if !state.grid.contains_key(&p) {
                keys.push(RecordKey::Grid(p).to_string());
            }
        }
    }
    for p in &state.selected {
        if !state.fine_outcomes.contains_key(p) {
            keys.push(RecordKey::FineDone(p.clone()).to_string());
        }
    }
    Pending { keys }
}
