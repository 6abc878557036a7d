//! External evaluator processes speaking line-delimited JSON over
//! stdin/stdout. See `docs/protocol.md` for the wire format.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use codesign_core::engine::{BuiltinEvaluator, EvalJob, Evaluator, EvaluatorError};
use codesign_core::model::{EvalStatus, EvaluationResult, EvaluatorSpec, ParamMap, RewardDialect};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        protocol: u32,
        #[serde(default)]
        schemas: Vec<String>,
    },
    Evaluate(WireJob),
    Progress {
        job_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
    Result(WireResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReward {
    pub source: String,
    pub dialect: RewardDialect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireJob {
    pub job_id: String,
    pub schema: String,
    pub morphology: ParamMap,
    pub reward: WireReward,
    pub training_budget: u64,
    pub seed: u64,
    /// Idle seconds the engine tolerates without a message.
    pub timeout: f64,
}

impl WireJob {
    pub fn new(job: &EvalJob, timeout: Duration) -> Self {
        WireJob {
            job_id: job.pair.to_string(),
            schema: job.schema_name.clone(),
            morphology: job.morphology.values.clone(),
            reward: WireReward {
                source: job.reward.source.clone(),
                dialect: job.reward.dialect,
            },
            training_budget: job.training_budget,
            seed: job.seed,
            timeout: timeout.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResult {
    pub job_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BridgeError {
    #[error("cannot start worker `{program}`: {message}")]
    Spawn { program: String, message: String },
    #[error("worker sent no hello within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("worker speaks protocol {found}, expected {expected}")]
    ProtocolVersionMismatch { expected: u32, found: u32 },
    #[error("worker protocol violation: {0}")]
    Protocol(String),
}

/// Why a single attempt at a job produced no result.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptFailure {
    Timeout,
    Crashed(String),
}

/// One running worker process after a successful handshake.
pub struct WorkerHandle {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<Option<String>>,
    schemas: Vec<String>,
}

impl WorkerHandle {
    pub fn spawn(argv: &[String], handshake_timeout: Duration) -> Result<Self, BridgeError> {
        let program = argv.first().cloned().unwrap_or_default();
        let spawn_err = |message: String| BridgeError::Spawn {
            program: program.clone(),
            message,
        };
        if argv.is_empty() {
            return Err(spawn_err("empty command".into()));
        }
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| spawn_err(e.to_string()))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => {
                        if tx.send(Some(l)).is_err() {
                            return;
                        }
                    }
                    Err(_) => break,
                }
            }
            let _ = tx.send(None);
        });
        let mut handle = WorkerHandle {
            child,
            stdin,
            lines: rx,
            schemas: Vec::new(),
        };
        match handle.lines.recv_timeout(handshake_timeout) {
            Ok(Some(line)) => match serde_json::from_str::<Message>(&line) {
                Ok(Message::Hello { protocol, schemas }) if protocol == PROTOCOL_VERSION => {
                    handle.schemas = schemas;
                    Ok(handle)
                }
                Ok(Message::Hello { protocol, .. }) => Err(BridgeError::ProtocolVersionMismatch {
                    expected: PROTOCOL_VERSION,
                    found: protocol,
                }),
                _ => Err(BridgeError::Protocol(format!("expected hello, got `{line}`"))),
            },
            Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                let status = handle.child.wait().map(|s| s.to_string()).unwrap_or_default();
                Err(spawn_err(format!("exited before the handshake ({status})")))
            }
            Err(RecvTimeoutError::Timeout) => Err(BridgeError::HandshakeTimeout(handshake_timeout)),
        }
    }

    /// Schema names advertised in the handshake.
    pub fn schemas(&self) -> &[String] {
        &self.schemas
    }

    pub fn id(&self) -> u32 {
        self.child.id()
    }

    /// Sends one job and waits for its result. Every message from the
    /// worker restarts the idle clock.
    pub fn run(&mut self, job: &WireJob, idle: Duration) -> Result<WireResult, AttemptFailure> {
        let line = serde_json::to_string(&Message::Evaluate(job.clone())).expect("job serializes");
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| AttemptFailure::Crashed("stdin closed".into()))?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| AttemptFailure::Crashed(format!("cannot write job: {e}")))?;
        loop {
            match self.lines.recv_timeout(idle) {
                Err(RecvTimeoutError::Timeout) => return Err(AttemptFailure::Timeout),
                Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(AttemptFailure::Crashed("worker exited mid-job".into()))
                }
                Ok(Some(line)) => match serde_json::from_str::<Message>(&line) {
                    Ok(Message::Progress { job_id, .. }) if job_id == job.job_id => continue,
                    Ok(Message::Result(r)) if r.job_id == job.job_id => return Ok(r),
                    _ => {
                        return Err(AttemptFailure::Crashed(format!(
                            "protocol violation: unexpected line `{line}`"
                        )))
                    }
                },
            }
        }
    }

    /// Closes stdin, gives the worker a moment to exit, then kills it.
    pub fn shutdown(mut self) {
        self.stop(Duration::from_millis(500));
    }

    fn stop(&mut self, grace: Duration) {
        self.stdin = None;
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            self.stop(Duration::from_millis(200));
        }
    }
}

fn parse_status(s: &str) -> Option<EvalStatus> {
    s.parse().ok()
}

/// Turns a worker reply into an evaluation result for `job`.
pub fn map_result(job: &EvalJob, reply: WireResult) -> EvaluationResult {
    let pair = job.pair.clone();
    match parse_status(&reply.status) {
        Some(EvalStatus::Ok) => match (reply.fitness, reply.volume) {
            (Some(f), Some(v)) => {
                let mut r = EvaluationResult::measured(pair, f, v, reply.train_return, job.seed);
                if r.status == EvalStatus::RuntimeError {
                    r.detail = Some(format!("protocol violation: volume must be positive, got {v}"));
                } else if reply.detail.is_some() {
                    r.detail = reply.detail;
                }
                r
            }
            _ => EvaluationResult::failed(
                pair,
                EvalStatus::RuntimeError,
                job.seed,
                Some("protocol violation: ok result without fitness and volume".into()),
            ),
        },
        Some(status) => EvaluationResult::failed(pair, status, job.seed, reply.detail),
        None => EvaluationResult::failed(
            pair,
            EvalStatus::RuntimeError,
            job.seed,
            Some(format!("protocol violation: unknown status `{}`", reply.status)),
        ),
    }
}

/// A worker command plus its current process, respawned on demand.
pub struct WorkerSlot {
    argv: Vec<String>,
    handshake_timeout: Duration,
    idle_timeout: Duration,
    worker: Option<WorkerHandle>,
}

impl WorkerSlot {
    pub fn new(argv: Vec<String>, handshake_timeout: Duration, idle_timeout: Duration) -> Self {
        WorkerSlot {
            argv,
            handshake_timeout,
            idle_timeout,
            worker: None,
        }
    }

    /// Starts the process now rather than on the first job.
    pub fn start(&mut self) -> Result<&WorkerHandle, BridgeError> {
        if self.worker.is_none() {
            self.worker = Some(WorkerHandle::spawn(&self.argv, self.handshake_timeout)?);
        }
        Ok(self.worker.as_ref().expect("just started"))
    }

    pub fn worker(&self) -> Option<&WorkerHandle> {
        self.worker.as_ref()
    }

    /// Runs one job. A timeout or crash kills the worker and the job is
    /// retried once on a fresh process; a second failure becomes a
    /// `timeout` or `runtime_error` result. `Err` only when no worker can
    /// be started.
    pub fn evaluate_remote(&mut self, job: &EvalJob) -> Result<EvaluationResult, BridgeError> {
        let started = Instant::now();
        let wire = WireJob::new(job, self.idle_timeout);
        let mut failure = AttemptFailure::Timeout;
        for _attempt in 0..2 {
            self.start()?;
            let worker = self.worker.as_mut().expect("started");
            if !worker.schemas.iter().any(|s| s == &job.schema_name) {
                return Ok(EvaluationResult::failed(
                    job.pair.clone(),
                    EvalStatus::RuntimeError,
                    job.seed,
                    Some(format!("worker does not serve schema `{}`", job.schema_name)),
                ));
            }
            match worker.run(&wire, self.idle_timeout) {
                Ok(reply) => {
                    let mut r = map_result(job, reply);
                    r.wall_time = started.elapsed().as_secs_f64();
                    return Ok(r);
                }
                Err(f) => {
                    if let Some(w) = self.worker.take() {
                        w.shutdown_now();
                    }
                    failure = f;
                }
            }
        }
        let (status, detail) = match failure {
            AttemptFailure::Timeout => (
                EvalStatus::Timeout,
                format!("no message for {:?}, twice", self.idle_timeout),
            ),
            AttemptFailure::Crashed(d) => (EvalStatus::RuntimeError, format!("{d} (after one retry)")),
        };
        let mut r = EvaluationResult::failed(job.pair.clone(), status, job.seed, Some(detail));
        r.wall_time = started.elapsed().as_secs_f64();
        Ok(r)
    }
}

impl WorkerHandle {
    fn shutdown_now(mut self) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs `jobs` on `workers` threads, each calling `run` for one job at a
/// time, and feeds results to `sink` on the calling thread. A job whose
/// `run` errors is put back for another thread, and the erroring thread
/// stops. Errs if jobs remain once every thread has stopped.
fn dispatch<S: Send, E: Send + std::fmt::Display>(
    states: &mut [S],
    jobs: &[EvalJob],
    run: impl Fn(&mut S, &EvalJob) -> Result<EvaluationResult, E> + Sync,
    sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
) -> Result<(), EvaluatorError> {
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..jobs.len()).collect());
    let stop = AtomicBool::new(false);
    let mut errors = Vec::new();
    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<Result<EvaluationResult, String>>();
        for state in states.iter_mut() {
            let tx = tx.clone();
            let (queue, stop, run) = (&queue, &stop, &run);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                let Some(i) = queue.lock().expect("queue lock").pop_front() else {
                    return;
                };
                match run(state, &jobs[i]) {
                    Ok(r) => {
                        if tx.send(Ok(r)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        queue.lock().expect("queue lock").push_front(i);
                        let _ = tx.send(Err(e.to_string()));
                        return;
                    }
                }
            });
        }
        drop(tx);
        for msg in rx {
            match msg {
                Ok(r) => {
                    if !stop.load(Ordering::SeqCst) && sink(r).is_break() {
                        stop.store(true, Ordering::SeqCst);
                    }
                }
                Err(e) => errors.push(e),
            }
        }
    });
    if stop.load(Ordering::SeqCst) {
        return Ok(());
    }
    let left = queue.lock().expect("queue lock").len();
    if left > 0 {
        return Err(EvaluatorError(format!(
            "{left} job(s) left after every worker failed: {}",
            errors.join("; ")
        )));
    }
    Ok(())
}

/// A fixed set of worker slots serving jobs concurrently.
pub struct WorkerPool {
    slots: Vec<WorkerSlot>,
}

impl WorkerPool {
    /// Spawns `workers` processes and completes their handshakes.
    pub fn start(
        argv: &[String],
        workers: usize,
        handshake_timeout: Duration,
        idle_timeout: Duration,
    ) -> Result<Self, BridgeError> {
        let mut slots = Vec::with_capacity(workers);
        for _ in 0..workers.max(1) {
            let mut s = WorkerSlot::new(argv.to_vec(), handshake_timeout, idle_timeout);
            s.start()?;
            slots.push(s);
        }
        Ok(WorkerPool { slots })
    }

    pub fn slots(&self) -> &[WorkerSlot] {
        &self.slots
    }
}

impl Evaluator for WorkerPool {
    fn evaluate(
        &mut self,
        jobs: &[EvalJob],
        sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
    ) -> Result<(), EvaluatorError> {
        dispatch(&mut self.slots, jobs, |slot, job| slot.evaluate_remote(job), sink)
    }
}

/// The built-in crawler evaluator on a thread pool.
pub struct LocalPool {
    inner: BuiltinEvaluator,
    workers: usize,
}

impl LocalPool {
    pub fn new(inner: BuiltinEvaluator, workers: usize) -> Self {
        LocalPool {
            inner,
            workers: workers.max(1),
        }
    }
}

impl Evaluator for LocalPool {
    fn evaluate(
        &mut self,
        jobs: &[EvalJob],
        sink: &mut dyn FnMut(EvaluationResult) -> ControlFlow<()>,
    ) -> Result<(), EvaluatorError> {
        let mut states = vec![(); self.workers];
        let inner = &self.inner;
        dispatch(
            &mut states,
            jobs,
            |_, job| {
                let started = Instant::now();
                let mut r = inner.run_job(job);
                r.wall_time = started.elapsed().as_secs_f64();
                Ok::<_, std::convert::Infallible>(r)
            },
            sink,
        )
    }
}

/// Builds the evaluator named by `spec`.
pub fn open(spec: &EvaluatorSpec) -> Result<Box<dyn Evaluator + Send>, BridgeError> {
    match spec {
        EvaluatorSpec::Builtin { cem, workers } => Ok(Box::new(LocalPool::new(BuiltinEvaluator::new(*cem), *workers))),
        EvaluatorSpec::Subprocess {
            argv,
            workers,
            idle_timeout_s,
            handshake_timeout_s,
        } => Ok(Box::new(WorkerPool::start(
            argv,
            *workers,
            Duration::from_secs_f64(*handshake_timeout_s),
            Duration::from_secs_f64(*idle_timeout_s),
        )?)),
    }
}
