#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codesign::fixture::{self, FixtureSpec};
use codesign::provider;
use codesign_core::crawler;

pub const BIN: &str = env!("CARGO_BIN_EXE_codesign");
pub const STUB: &str = env!("CARGO_BIN_EXE_codesign-stub-worker");

pub struct Setup {
    pub n_m: usize,
    pub n_r: usize,
    pub top_k: f64,
    pub fine_max: u32,
    pub seed: u64,
    pub fixture_seed: u64,
    pub refinements: usize,
    pub malformed_rate: f64,
    pub workers: usize,
    /// CEM population, elites, iterations.
    pub cem: (usize, usize, usize),
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            n_m: 5,
            n_r: 3,
            top_k: 0.2,
            fine_max: 2,
            seed: 7,
            fixture_seed: 1,
            refinements: 10,
            malformed_rate: 0.0,
            workers: 2,
            cem: (4, 1, 2),
        }
    }
}

impl Setup {
    /// Writes `fixture.json` and `config.toml` into `dir`; returns the config path.
    pub fn write(&self, dir: &Path) -> PathBuf {
        fs::create_dir_all(dir).unwrap();
        let mut spec = FixtureSpec::new(
            self.fixture_seed,
            (self.n_m + 4, self.n_r + 4),
            self.refinements,
            &crawler::STATE_VARS,
        );
        spec.malformed_rate = self.malformed_rate;
        spec.out_of_bounds_rate = 0.1;
        provider::save_fixture(
            &dir.join("fixture.json"),
            &fixture::synthetic(&crawler::schema(), &spec),
        )
        .unwrap();
        let (p, e, i) = self.cem;
        let toml = format!(
            r#"[run]
n_morphologies = {}
n_rewards = {}
top_k_fraction = {}
fine_max_iterations = {}
seed = {}

[run.llm]
kind = "scripted_mock"
fixture_path = "fixture.json"

[run.evaluator]
kind = "builtin"
workers = {}

[run.evaluator.cem]
population = {p}
elites = {e}
iterations = {i}
"#,
            self.n_m, self.n_r, self.top_k, self.fine_max, self.seed, self.workers
        );
        let path = dir.join("config.toml");
        fs::write(&path, toml).unwrap();
        path
    }
}

pub fn codesign(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("codesign binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Canonical JSON of the state stored in `dir`.
pub fn canonical_state(dir: &Path) -> String {
    let state = codesign::store::RunStore::open(dir).unwrap().load_state().unwrap();
    serde_json::to_string(&state.canonical()).unwrap()
}
