mod common;

use std::fs;

use codesign::store::RunStore;
use codesign_core::model::RunStatus;
use common::{canonical_state, codesign, stdout, Setup};

#[test]
fn validate_reward_lists_free_variables() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("r.txt");
    fs::write(&f, "v - 0.5*ctrl\n").unwrap();
    let o = codesign(&["validate-reward", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "free variables: {ctrl, v}");

    fs::write(&f, "height + v").unwrap();
    assert_eq!(
        codesign(&["validate-reward", f.to_str().unwrap()]).status.code(),
        Some(1)
    );
    assert_eq!(
        codesign(&["validate-reward", "--any-vars", f.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    fs::write(&f, "v +/ 2").unwrap();
    assert_eq!(
        codesign(&["validate-reward", f.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(codesign(&["run"]).status.code(), Some(2));
    assert_eq!(
        codesign(&["run", "--config", "/nonexistent/config.toml"]).status.code(),
        Some(2)
    );
    assert_eq!(codesign(&["frobnicate"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[run]\nbogus = 1\n").unwrap();
    assert_eq!(
        codesign(&["run", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn run_report_diversity_and_resume_of_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Setup::default().write(tmp.path());
    let run = tmp.path().join("run");
    let o = codesign(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best pair: m"));
    assert!(run.join("report/report.md").is_file());
    let before = canonical_state(&run);

    let o = codesign(&["report", run.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).trim().ends_with("report.csv"));

    let o = codesign(&["diversity", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("self-bleu: 0."));
    assert!(stdout(&o).contains("cv l1: "));

    let o = codesign(&["resume", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(canonical_state(&run), before);

    let o = codesign(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn empty_fixture_persists_an_aborted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Setup::default().write(tmp.path());
    fs::write(tmp.path().join("fixture.json"), "{}").unwrap();
    let run = tmp.path().join("run");
    let o = codesign(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let m = RunStore::open(&run).unwrap();
    assert_eq!(m.manifest().status, RunStatus::Aborted);
    assert!(m.manifest().abort_reason.as_deref().unwrap().contains("morph_propose"));
    assert_eq!(codesign(&["report", run.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn resume_after_interrupted_coarse_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let setup = Setup::default();
    let cfg = setup.write(tmp.path());
    let full = tmp.path().join("full");
    assert_eq!(
        codesign(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            full.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    // Replay the first few manifest entries into a fresh directory, as if
    // the process had died there.
    let part = tmp.path().join("part");
    copy_dir(&full, &part);
    let path = part.join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let done = manifest["completed"].as_array().unwrap().clone();
    let keep = 12;
    manifest["completed"] = serde_json::Value::Array(done[..keep].to_vec());
    manifest["status"] = "coarse".into();
    manifest["selected"] = serde_json::json!([]);
    manifest["llm_calls"] = serde_json::json!({"morph_propose": 5, "reward_propose": 3});
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    fs::remove_dir_all(part.join("report")).unwrap();

    let o = codesign(&["resume", part.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(canonical_state(&part), canonical_state(&full));
    assert_eq!(
        fs::read_to_string(part.join("report/report.csv")).unwrap(),
        fs::read_to_string(full.join("report/report.csv")).unwrap()
    );
}

fn copy_dir(from: &std::path::Path, to: &std::path::Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            fs::copy(e.path(), dst).unwrap();
        }
    }
}

#[test]
fn eval_once_prints_a_result() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m.txt");
    fs::write(&m, "l1: 0.5\nl2: 0.5\nl3: 0.5\nr1: 0.05\nr2: 0.05\nr3: 0.5\n").unwrap();
    let r = tmp.path().join("r.txt");
    fs::write(&r, "v - 0.5*ctrl").unwrap();
    let o = codesign(&[
        "eval-once",
        "--morphology",
        m.to_str().unwrap(),
        "--reward",
        r.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["seed"], 7);
    assert!(String::from_utf8_lossy(&o.stderr).contains("clamped r3"));
}

#[test]
fn make_fixture_writes_every_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("f.json");
    let o = codesign(&[
        "make-fixture",
        "--out",
        f.to_str().unwrap(),
        "--morphologies",
        "3",
        "--rewards",
        "2",
        "--refinements",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let fx = codesign::provider::load_fixture(&f).unwrap();
    let lens: Vec<usize> = fx.values().map(Vec::len).collect();
    assert_eq!(lens, vec![3, 2, 4, 4]);
}
