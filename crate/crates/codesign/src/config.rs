//! Config file loading.
//!
//! ```toml
//! out_dir = "runs/demo"
//!
//! [run]
//! n_morphologies = 5
//! n_rewards = 3
//! seed = 7
//! llm = { kind = "scripted_mock", fixture_path = "fixture.json" }
//! evaluator = { kind = "builtin", workers = 2 }
//!
//! [task]
//! kind = "crawler"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use codesign_core::crawler;
use codesign_core::model::{EvaluatorSpec, MorphologySchema, ProviderSpec, RunConfig};
use codesign_core::prompt::{TaskContext, DEFAULT_FORBIDDEN_MARKERS};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid task definition: {0}")]
    Task(String),
}

/// Which task the run optimizes for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// The built-in three-segment crawler.
    Crawler,
    /// A schema evaluated by an external worker.
    Custom {
        /// JSON file with `name`, `params` and `structure_template`.
        schema: PathBuf,
        task_description: PathBuf,
        environment_source: PathBuf,
        reward_format: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub run: RunConfig,
    #[serde(default = "crawler_task")]
    pub task: TaskSpec,
}

fn crawler_task() -> TaskSpec {
    TaskSpec::Crawler
}

/// A task with its schema loaded and its prompt context built.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub schema: MorphologySchema,
    pub context: TaskContext,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: CliConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        let base = base.canonicalize().unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.run.validate().map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Rewrites every relative path against `base`. For a subprocess
    /// evaluator only the program itself is resolved, and only when it
    /// contains a path separator.
    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if let Some(d) = &self.out_dir {
            self.out_dir = Some(abs(d));
        }
        if let ProviderSpec::ScriptedMock { fixture_path } = &mut self.run.llm {
            *fixture_path = abs(Path::new(fixture_path)).to_string_lossy().into_owned();
        }
        if let EvaluatorSpec::Subprocess { argv, .. } = &mut self.run.evaluator {
            if let Some(prog) = argv.first_mut() {
                if prog.contains('/') {
                    *prog = abs(Path::new(prog)).to_string_lossy().into_owned();
                }
            }
        }
        if let TaskSpec::Custom {
            schema,
            task_description,
            environment_source,
            reward_format,
        } = &mut self.task
        {
            for p in [schema, task_description, environment_source, reward_format] {
                *p = abs(p);
            }
        }
    }
}

impl TaskSpec {
    pub fn load(&self) -> Result<LoadedTask, ConfigError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })
        };
        let (schema, description, env, reward_format) = match self {
            TaskSpec::Crawler => (
                crawler::schema(),
                crawler::TASK_DESCRIPTION.to_string(),
                crawler::ENVIRONMENT_SOURCE.to_string(),
                crawler::REWARD_FORMAT.to_string(),
            ),
            TaskSpec::Custom {
                schema,
                task_description,
                environment_source,
                reward_format,
            } => {
                let s: MorphologySchema = serde_json::from_str(&read(schema)?)
                    .map_err(|e| ConfigError::Task(format!("{}: {e}", schema.display())))?;
                (
                    s,
                    read(task_description)?,
                    read(environment_source)?,
                    read(reward_format)?,
                )
            }
        };
        let context = TaskContext::for_schema(&schema, &description, &env, &reward_format)
            .map_err(|e| ConfigError::Task(e.to_string()))?;
        context
            .validate(&schema, &DEFAULT_FORBIDDEN_MARKERS)
            .map_err(|e| ConfigError::Task(e.to_string()))?;
        Ok(LoadedTask { schema, context })
    }
}
