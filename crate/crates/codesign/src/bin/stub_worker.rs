//! Minimal evaluator worker for exercising the bridge. It speaks the wire
//! protocol with canned behaviour chosen by `--mode`.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use codesign::bridge::{Message, WireJob, WireResult};
use codesign_core::cem::CemConfig;
use codesign_core::crawler::{self, SimConfig};
use codesign_core::model::{EvalStatus, MorphologyCandidate, Provenance, RewardCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Reply ok with the configured fitness and volume.
    Echo,
    /// Never answer a job.
    Silent,
    /// Reply ok with volume 0.
    ZeroVolume,
    /// Advertise protocol version 2.
    Protocol2,
    /// Never send the hello line.
    NoHello,
    /// Exit as soon as a job arrives.
    Crash,
    /// Exit on the first job if the marker file is absent, then echo.
    CrashOnce,
    /// Send `--beats` progress lines `--interval-ms` apart, then echo.
    Heartbeat,
    /// Print a non-protocol line on stdout before replying.
    Noise,
    /// Reply with a result for a different job id.
    WrongId,
    /// Exit on the first job and refuse to start again once the marker exists.
    OneLife,
    /// Train and evaluate on the built-in crawler.
    Crawler,
}

#[derive(Parser)]
struct Args {
    #[arg(long, value_enum, default_value = "echo")]
    mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    fitness: f64,
    #[arg(long, default_value_t = 0.5)]
    volume: f64,
    #[arg(long, default_value = "crawler")]
    schema: Vec<String>,
    #[arg(long)]
    marker: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    beats: u32,
    #[arg(long, default_value_t = 50)]
    interval_ms: u64,
    #[arg(long, default_value_t = 8)]
    population: usize,
    #[arg(long, default_value_t = 2)]
    elites: usize,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
}

fn send(out: &mut impl Write, msg: &Message) {
    let line = serde_json::to_string(msg).expect("message serializes");
    writeln!(out, "{line}").and_then(|_| out.flush()).expect("stdout open");
}

fn echo(job: &WireJob, args: &Args, volume: f64) -> WireResult {
    WireResult {
        job_id: job.job_id.clone(),
        status: "ok".into(),
        fitness: Some(args.fitness),
        volume: Some(volume),
        train_return: None,
        detail: None,
    }
}

fn crawler_result(job: &WireJob, args: &Args) -> WireResult {
    let schema = crawler::schema();
    let fail = |status: EvalStatus, detail: String| WireResult {
        job_id: job.job_id.clone(),
        status: status.as_str().into(),
        fitness: None,
        volume: None,
        train_return: None,
        detail: Some(detail),
    };
    let m = match MorphologyCandidate::admit("m", &schema, &job.morphology, Provenance::Fixture, None) {
        Ok(m) => m,
        Err(e) => return fail(EvalStatus::RuntimeError, e.to_string()),
    };
    let r = match RewardCandidate::new("r", &job.reward.source, job.reward.dialect, Provenance::Fixture, None) {
        Ok(r) => r,
        Err(e) => return fail(EvalStatus::RewardParseError, e.to_string()),
    };
    let cem = CemConfig {
        population: args.population,
        elites: args.elites,
        iterations: args.iterations,
        seed: job.seed,
        ..CemConfig::default()
    };
    let res = crawler::evaluate_builtin(&m, &r, &cem, &SimConfig::default());
    WireResult {
        job_id: job.job_id.clone(),
        status: res.status.as_str().into(),
        fitness: res.fitness,
        volume: res.volume,
        train_return: res.train_return,
        detail: res.detail,
    }
}

fn main() {
    let args = Args::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if args.mode == Mode::OneLife {
        let marker = args.marker.as_ref().expect("--marker is required in one-life mode");
        if marker.exists() {
            std::process::exit(4);
        }
        std::fs::write(marker, b"started\n").expect("marker writable");
    }
    match args.mode {
        Mode::NoHello => loop {
            thread::sleep(Duration::from_secs(3600));
        },
        Mode::Protocol2 => send(
            &mut out,
            &Message::Hello {
                protocol: 2,
                schemas: args.schema.clone(),
            },
        ),
        _ => send(
            &mut out,
            &Message::Hello {
                protocol: 1,
                schemas: args.schema.clone(),
            },
        ),
    }
    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        let job = match serde_json::from_str::<Message>(&line) {
            Ok(Message::Evaluate(job)) => job,
            _ => {
                eprintln!("stub worker: ignoring `{line}`");
                continue;
            }
        };
        eprintln!("stub worker: job {}", job.job_id);
        let progress = Message::Progress {
            job_id: job.job_id.clone(),
            message: None,
        };
        let reply = match args.mode {
            Mode::Echo | Mode::Protocol2 | Mode::NoHello => echo(&job, &args, args.volume),
            Mode::Silent => continue,
            Mode::ZeroVolume => echo(&job, &args, 0.0),
            Mode::Crash | Mode::OneLife => std::process::exit(3),
            Mode::CrashOnce => {
                let marker = args.marker.as_ref().expect("--marker is required in crash-once mode");
                if !marker.exists() {
                    std::fs::write(marker, b"crashed\n").expect("marker writable");
                    std::process::exit(3);
                }
                echo(&job, &args, args.volume)
            }
            Mode::Heartbeat => {
                for _ in 0..args.beats {
                    thread::sleep(Duration::from_millis(args.interval_ms));
                    send(&mut out, &progress);
                }
                echo(&job, &args, args.volume)
            }
            Mode::Noise => {
                writeln!(out, "training started").expect("stdout open");
                echo(&job, &args, args.volume)
            }
            Mode::WrongId => {
                let mut r = echo(&job, &args, args.volume);
                r.job_id.push_str("-other");
                r
            }
            Mode::Crawler => {
                send(&mut out, &progress);
                crawler_result(&job, &args)
            }
        };
        send(&mut out, &Message::Result(reply));
    }
}
