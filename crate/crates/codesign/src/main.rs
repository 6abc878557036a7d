use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use codesign::config::{CliConfig, ConfigError};
use codesign::fixture::{self, FixtureSpec};
use codesign::report::{self, ReportFormat};
use codesign::store::RunStore;
use codesign::{provider, runner};
use codesign_core::cem::CemConfig;
use codesign_core::crawler::{self, SimConfig};
use codesign_core::llm;
use codesign_core::model::{MorphologyCandidate, ParamMap, Provenance, RewardCandidate, RewardDialect, RunStatus};
use codesign_core::reward_lang;

#[derive(Parser)]
#[command(
    name = "codesign",
    version,
    about = "Coarse-to-fine co-design of robot bodies and reward functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue an interrupted run.
    Resume { dir: PathBuf },
    /// Write the run report into DIR/report/.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: ReportFormat,
    },
    /// Print the diversity of a run's proposals.
    Diversity { dir: PathBuf },
    /// Evaluate one morphology and reward on the built-in crawler.
    EvalOnce {
        #[arg(long)]
        morphology: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Parse a reward expression and list its variables.
    ValidateReward {
        file: PathBuf,
        /// Accept variables the crawler does not provide.
        #[arg(long)]
        any_vars: bool,
    },
    /// Write a random scripted-provider fixture for the crawler task.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        morphologies: usize,
        #[arg(long, default_value_t = 5)]
        rewards: usize,
        #[arg(long, default_value_t = 60)]
        refinements: usize,
    },
}

enum Failure {
    Usage(String),
    Domain(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Domain(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Domain(format!("cannot read {}: {e}", path.display())))
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = CliConfig::load(config).map_err(|e| match e {
        ConfigError::Read { .. } | ConfigError::Parse { .. } => Failure::Usage(e.to_string()),
        ConfigError::Task(_) => Failure::Domain(e.to_string()),
    })?;
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Failure::Usage("no run directory: pass --out or set out_dir in the config".into()))?;
    finish(runner::start(&cfg, &out)?)
}

fn finish(outcome: runner::RunOutcome) -> Result<(), Failure> {
    println!("run directory: {}", outcome.dir.display());
    println!("status: {:?}", outcome.state.status);
    if let Some(b) = &outcome.report.best {
        println!(
            "best pair: {} efficiency {} (fitness {}, volume {})",
            b.pair,
            report::fmt_num(b.efficiency),
            report::fmt_num(b.fitness),
            report::fmt_num(b.volume)
        );
    } else {
        println!("best pair: none");
    }
    for p in &outcome.reports {
        println!("report: {}", p.display());
    }
    match outcome.state.status {
        RunStatus::Aborted => Err(Failure::Domain(format!(
            "run aborted: {}",
            outcome.state.abort_reason.unwrap_or_default()
        ))),
        _ => Ok(()),
    }
}

fn cmd_report(dir: &Path, format: ReportFormat) -> Result<(), Failure> {
    let store = RunStore::open(dir)?;
    let state = store.load_state()?;
    let path = report::write_report(&state, format, &store.report_dir())?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_diversity(dir: &Path) -> Result<(), Failure> {
    let state = RunStore::open(dir)?.load_state()?;
    let d = report::proposal_diversity(&state);
    println!("morphologies: {}", d.morphology_count);
    for (k, v) in &d.per_param_cv {
        println!(
            "cv {k}: {}",
            v.map_or("undefined (mean near zero)".into(), |x| x.to_string())
        );
    }
    println!(
        "cv aggregate: {}",
        d.aggregate_cv.map_or("undefined".into(), |x| x.to_string())
    );
    println!("rewards: {}", d.reward_count);
    println!(
        "self-bleu: {}",
        d.self_bleu.map_or("undefined".into(), |x| x.to_string())
    );
    Ok(())
}

fn parse_morphology(text: &str) -> Result<ParamMap, Failure> {
    if let Ok(m) = serde_json::from_str::<ParamMap>(text) {
        return Ok(m);
    }
    Ok(llm::extract_params_block(text, &crawler::schema())?)
}

fn cmd_eval_once(morphology: &Path, reward: &Path, seed: u64) -> Result<(), Failure> {
    let schema = crawler::schema();
    let values = parse_morphology(&read(morphology)?)?;
    let m = MorphologyCandidate::admit("m1", &schema, &values, Provenance::Fixture, None)?;
    for c in &m.clamps {
        eprintln!("clamped {} from {} to {}", c.param, c.proposed, c.clamped);
    }
    let source = llm::extract_code_block(&read(reward)?)?;
    let r = RewardCandidate::new("r1", &source, RewardDialect::BuiltinDsl, Provenance::Fixture, None)?;
    let result = crawler::evaluate_builtin(&m, &r, &CemConfig::default().with_seed(seed), &SimConfig::default());
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_validate_reward(file: &Path, any_vars: bool) -> Result<(), Failure> {
    let ast = reward_lang::parse(read(file)?.trim())?;
    let vars: Vec<String> = ast.free_vars().into_iter().collect();
    println!("free variables: {{{}}}", vars.join(", "));
    let unknown: Vec<&String> = vars
        .iter()
        .filter(|v| !crawler::STATE_VARS.contains(&v.as_str()))
        .collect();
    if !any_vars && !unknown.is_empty() {
        let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
        return Err(Failure::Domain(format!(
            "not provided by the crawler: {} (pass --any-vars for other tasks)",
            names.join(", ")
        )));
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Resume { dir } => finish(runner::resume(&dir)?),
        Command::Report { dir, format } => cmd_report(&dir, format),
        Command::Diversity { dir } => cmd_diversity(&dir),
        Command::EvalOnce {
            morphology,
            reward,
            seed,
        } => cmd_eval_once(&morphology, &reward, seed),
        Command::ValidateReward { file, any_vars } => cmd_validate_reward(&file, any_vars),
        Command::MakeFixture {
            out,
            seed,
            morphologies,
            rewards,
            refinements,
        } => {
            let spec = FixtureSpec::new(seed, (morphologies, rewards), refinements, &crawler::STATE_VARS);
            provider::save_fixture(&out, &fixture::synthetic(&crawler::schema(), &spec))?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("usage: codesign run --config FILE [--out DIR]");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
