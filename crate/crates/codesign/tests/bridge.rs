use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use codesign::bridge::{map_result, BridgeError, Message, WireJob, WireResult, WorkerHandle, WorkerPool, WorkerSlot};
use codesign_core::cem::CemConfig;
use codesign_core::crawler;
use codesign_core::engine::{BuiltinEvaluator, EvalJob, Evaluator};
use codesign_core::model::{
    EvalStatus, EvaluationResult, MorphologyCandidate, PairKey, ParamMap, Provenance, RewardCandidate, RewardDialect,
};

const STUB: &str = env!("CARGO_BIN_EXE_codesign-stub-worker");
const HANDSHAKE: Duration = Duration::from_secs(10);

fn argv(extra: &[&str]) -> Vec<String> {
    std::iter::once(STUB)
        .chain(extra.iter().copied())
        .map(String::from)
        .collect()
}

fn job(m: usize, r: usize, dialect: RewardDialect) -> EvalJob {
    let values: ParamMap = [
        ("l1", 0.4),
        ("l2", 0.3),
        ("l3", 0.2),
        ("r1", 0.05),
        ("r2", 0.04),
        ("r3", 0.03),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v + 0.01 * m as f64))
    .collect();
    let (mid, rid) = (format!("m{m}"), format!("r{r}"));
    EvalJob {
        pair: PairKey::new(&mid, &rid),
        schema_name: crawler::SCHEMA_NAME.into(),
        morphology: MorphologyCandidate::admit(&mid, &crawler::schema(), &values, Provenance::Fixture, None).unwrap(),
        reward: RewardCandidate::new(&rid, &format!("v - 0.{r}*ctrl"), dialect, Provenance::Fixture, None).unwrap(),
        training_budget: 500_000,
        seed: 100 + (m * 10 + r) as u64,
    }
}

fn slot(extra: &[&str], idle: Duration) -> WorkerSlot {
    WorkerSlot::new(argv(extra), HANDSHAKE, idle)
}

#[test]
fn wire_messages_use_tagged_snake_case() {
    let hello = serde_json::to_value(Message::Hello {
        protocol: 1,
        schemas: vec!["crawler".into()],
    })
    .unwrap();
    assert_eq!(hello["type"], "hello");
    let wire = WireJob::new(&job(1, 1, RewardDialect::ExternalCode), Duration::from_secs(30));
    let v = serde_json::to_value(Message::Evaluate(wire.clone())).unwrap();
    assert_eq!(v["type"], "evaluate");
    assert_eq!(v["job_id"], "m1_r1");
    assert_eq!(v["reward"]["dialect"], "external_code");
    assert_eq!(v["timeout"], 30.0);
    let back: Message = serde_json::from_value(v).unwrap();
    assert_eq!(back, Message::Evaluate(wire));
    let res: Message =
        serde_json::from_str(r#"{"type":"result","job_id":"m1_r1","status":"ok","fitness":1.0,"volume":0.5}"#).unwrap();
    assert!(matches!(res, Message::Result(WireResult { fitness: Some(_), .. })));
}

#[test]
fn echo_worker_round_trip() {
    let mut s = slot(
        &["--mode", "echo", "--fitness", "3", "--volume", "0.25"],
        Duration::from_secs(10),
    );
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::Ok);
    assert_eq!(r.efficiency, Some(12.0));
    assert_eq!(r.pair, PairKey::new("m1", "r1"));
    assert_eq!(r.seed, 111);
}

#[test]
fn handshake_failures() {
    assert!(matches!(
        WorkerHandle::spawn(&argv(&["--mode", "protocol2"]), HANDSHAKE),
        Err(BridgeError::ProtocolVersionMismatch { expected: 1, found: 2 })
    ));
    let t = Instant::now();
    assert!(matches!(
        WorkerHandle::spawn(&argv(&["--mode", "no-hello"]), Duration::from_millis(300)),
        Err(BridgeError::HandshakeTimeout(_))
    ));
    assert!(t.elapsed() < Duration::from_secs(5));
    assert!(matches!(
        WorkerHandle::spawn(&["/nonexistent/worker".to_string()], HANDSHAKE),
        Err(BridgeError::Spawn { .. })
    ));
}

#[test]
fn silent_worker_times_out_after_one_retry() {
    let mut s = slot(&["--mode", "silent"], Duration::from_millis(300));
    let t = Instant::now();
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::Timeout);
    assert!(t.elapsed() >= Duration::from_millis(600));
    assert!(r.fitness.is_none());
}

#[test]
fn heartbeats_keep_a_slow_job_alive() {
    let mut s = slot(
        &["--mode", "heartbeat", "--beats", "6", "--interval-ms", "150"],
        Duration::from_millis(400),
    );
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::Ok);
    assert!(r.wall_time >= 0.9);
}

#[test]
fn crash_is_retried_on_a_fresh_process() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("crashed");
    let mut s = slot(
        &["--mode", "crash-once", "--marker", marker.to_str().unwrap()],
        Duration::from_secs(10),
    );
    s.start().unwrap();
    let first = s.worker().unwrap().id();
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::Ok);
    assert!(marker.exists());
    assert_ne!(s.worker().unwrap().id(), first);
}

#[test]
fn persistent_crash_becomes_runtime_error() {
    let mut s = slot(&["--mode", "crash"], Duration::from_secs(10));
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::RuntimeError);
    assert!(r.detail.unwrap().contains("after one retry"));
}

#[test]
fn failed_respawn_is_a_bridge_error() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("life");
    let mut s = slot(
        &["--mode", "one-life", "--marker", marker.to_str().unwrap()],
        Duration::from_secs(10),
    );
    assert!(matches!(
        s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)),
        Err(BridgeError::Spawn { .. })
    ));
}

#[test]
fn protocol_violations_are_isolated_per_job() {
    for mode in ["noise", "wrong-id"] {
        let mut s = slot(&["--mode", mode], Duration::from_secs(10));
        let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
        assert_eq!(r.status, EvalStatus::RuntimeError, "{mode}");
        assert!(r.detail.unwrap().contains("protocol violation"), "{mode}");
    }
    let mut s = slot(&["--mode", "zero-volume"], Duration::from_secs(10));
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::RuntimeError);
    assert!(r.detail.unwrap().contains("volume must be positive"));
}

#[test]
fn unsupported_schema_is_a_failed_result() {
    let mut s = slot(&["--mode", "echo", "--schema", "ant"], Duration::from_secs(10));
    let r = s.evaluate_remote(&job(1, 1, RewardDialect::ExternalCode)).unwrap();
    assert_eq!(r.status, EvalStatus::RuntimeError);
    assert!(r.detail.unwrap().contains("does not serve schema"));
}

#[test]
fn map_result_statuses() {
    let j = job(2, 1, RewardDialect::ExternalCode);
    let reply = |status: &str, fitness: Option<f64>, volume: Option<f64>| WireResult {
        job_id: j.pair.to_string(),
        status: status.into(),
        fitness,
        volume,
        train_return: None,
        detail: Some("d".into()),
    };
    assert_eq!(map_result(&j, reply("ok", Some(2.0), Some(0.5))).efficiency, Some(4.0));
    assert_eq!(
        map_result(&j, reply("ok", None, Some(0.5))).status,
        EvalStatus::RuntimeError
    );
    assert_eq!(map_result(&j, reply("timeout", None, None)).status, EvalStatus::Timeout);
    assert_eq!(
        map_result(&j, reply("nonfinite", None, None)).status,
        EvalStatus::Nonfinite
    );
    assert_eq!(
        map_result(&j, reply("reward_parse_error", None, None)).status,
        EvalStatus::RewardParseError
    );
    assert_eq!(
        map_result(&j, reply("exploded", None, None)).status,
        EvalStatus::RuntimeError
    );
}

fn collect(pool: &mut impl Evaluator, jobs: &[EvalJob]) -> Vec<EvaluationResult> {
    let mut out = Vec::new();
    pool.evaluate(jobs, &mut |r| {
        out.push(r);
        ControlFlow::Continue(())
    })
    .unwrap();
    out
}

#[test]
fn pool_returns_exactly_one_result_per_job() {
    let jobs: Vec<EvalJob> = (1..=6)
        .flat_map(|m| (1..=3).map(move |r| job(m, r, RewardDialect::ExternalCode)))
        .collect();
    let mut pool = WorkerPool::start(&argv(&["--mode", "echo"]), 3, HANDSHAKE, Duration::from_secs(10)).unwrap();
    assert_eq!(pool.slots().len(), 3);
    let ids: BTreeSet<u32> = pool.slots().iter().map(|s| s.worker().unwrap().id()).collect();
    assert_eq!(ids.len(), 3);
    let out = collect(&mut pool, &jobs);
    assert_eq!(out.len(), jobs.len());
    let pairs: BTreeSet<PairKey> = out.iter().map(|r| r.pair.clone()).collect();
    assert_eq!(pairs, jobs.iter().map(|j| j.pair.clone()).collect());
}

#[test]
fn pool_stops_when_the_sink_breaks() {
    let jobs: Vec<EvalJob> = (1..=8).map(|m| job(m, 1, RewardDialect::ExternalCode)).collect();
    let mut pool = WorkerPool::start(&argv(&["--mode", "echo"]), 2, HANDSHAKE, Duration::from_secs(10)).unwrap();
    let mut seen = 0;
    pool.evaluate(&jobs, &mut |_| {
        seen += 1;
        ControlFlow::Break(())
    })
    .unwrap();
    assert_eq!(seen, 1);
}

#[test]
fn pool_with_dead_workers_reports_leftover_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("life");
    let mut pool = WorkerPool::start(
        &argv(&["--mode", "one-life", "--marker", marker.to_str().unwrap()]),
        1,
        HANDSHAKE,
        Duration::from_secs(10),
    )
    .unwrap();
    let jobs = vec![
        job(1, 1, RewardDialect::ExternalCode),
        job(2, 1, RewardDialect::ExternalCode),
    ];
    let err = pool.evaluate(&jobs, &mut |_| ControlFlow::Continue(())).unwrap_err();
    assert!(err.0.contains("2 job(s) left"), "{err}");
}

#[test]
fn subprocess_crawler_matches_builtin() {
    let cem = CemConfig {
        population: 8,
        elites: 2,
        iterations: 3,
        ..CemConfig::default()
    };
    let jobs: Vec<EvalJob> = (1..=3).map(|m| job(m, 5, RewardDialect::BuiltinDsl)).collect();
    let mut pool = WorkerPool::start(
        &argv(&[
            "--mode",
            "crawler",
            "--population",
            "8",
            "--elites",
            "2",
            "--iterations",
            "3",
        ]),
        2,
        HANDSHAKE,
        Duration::from_secs(60),
    )
    .unwrap();
    let mut remote = collect(&mut pool, &jobs);
    remote.sort_by(|a, b| a.pair.cmp(&b.pair));
    let local = BuiltinEvaluator::new(cem);
    for (j, r) in jobs.iter().zip(&remote) {
        let mut want = local.run_job(j);
        want.wall_time = r.wall_time;
        assert_eq!(r, &want);
    }
}
