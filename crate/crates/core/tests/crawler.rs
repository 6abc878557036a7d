use std::f64::consts::PI;

use codesign_core::cem::CemConfig;
use codesign_core::crawler::{
    self, evaluate_builtin, simulate, ControllerParams, CrawlerMorphology, CrawlerReward, SimConfig,
};
use codesign_core::model::{EvalStatus, MorphologyCandidate, ParamMap, Provenance, RewardCandidate, RewardDialect};
use codesign_core::reward_lang::parse;
use proptest::prelude::*;

/// Straight transcription of the crawler equations of motion with std math.
fn oracle_rollout(lengths: [f64; 3], radii: [f64; 3], ctrl: &ControllerParams, cfg: &SimConfig) -> (f64, f64) {
    let volume: f64 = (0..3).map(|i| PI * radii[i].powi(2) * lengths[i]).sum();
    let mass = cfg.density * volume;
    let (mut x, mut v) = (0.0f64, 0.0f64);
    let mut ret = 0.0;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let u: Vec<f64> = (0..3)
            .map(|i| ctrl.amplitude[i] * (2.0 * PI * ctrl.frequency[i] * t + ctrl.phase[i]).sin())
            .collect();
        let thrust = cfg.gear * (0..3).map(|i| u[i] * lengths[i]).sum::<f64>();
        let resist = cfg.drag * mass * v + cfg.friction * mass * cfg.gravity * (v / cfg.velocity_smoothing).tanh();
        v += (thrust - resist) / mass * cfg.dt;
        x += v * cfg.dt;
        let ctrl_cost: f64 = u.iter().map(|u| u * u).sum();
        ret += v - 0.5 * ctrl_cost;
    }
    (x, cfg.dt * ret)
}

fn arb_ctrl() -> impl Strategy<Value = ControllerParams> {
    (
        prop::array::uniform3(0.0f64..1.0),
        prop::array::uniform3(0.1f64..3.0),
        prop::array::uniform3(0.0f64..2.0 * PI),
    )
        .prop_map(|(amplitude, frequency, phase)| ControllerParams {
            amplitude,
            frequency,
            phase,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rollout_matches_equations_of_motion(
        lengths in prop::array::uniform3(0.05f64..1.0),
        radii in prop::array::uniform3(0.01f64..0.2),
        ctrl in arb_ctrl(),
    ) {
        let cfg = SimConfig::default();
        let body = CrawlerMorphology::new(lengths, radii).unwrap();
        let reward = CrawlerReward::new(&parse("v - 0.5*ctrl").unwrap()).unwrap();
        let got = simulate(&body, &ctrl, &reward, &cfg).unwrap();
        let (x, ret) = oracle_rollout(lengths, radii, &ctrl, &cfg);
        prop_assert!((got.fitness - x).abs() <= 1e-9 * x.abs().max(1e-6), "{} vs {x}", got.fitness);
        prop_assert!((got.ret - ret).abs() <= 1e-9 * ret.abs().max(1e-6), "{} vs {ret}", got.ret);
    }

    #[test]
    fn doubling_radii_quadruples_volume(
        lengths in prop::array::uniform3(0.05f64..1.0),
        radii in prop::array::uniform3(0.01f64..0.1),
    ) {
        let a = CrawlerMorphology::new(lengths, radii).unwrap().volume();
        let b = CrawlerMorphology::new(lengths, radii.map(|r| 2.0 * r)).unwrap().volume();
        prop_assert!((b - 4.0 * a).abs() <= 1e-12 * b);
    }
}

fn candidates(values: &ParamMap, src: &str) -> (MorphologyCandidate, RewardCandidate) {
    let m = MorphologyCandidate::admit("m1", &crawler::schema(), values, Provenance::Fixture, None).unwrap();
    let r = RewardCandidate::new("r1", src, RewardDialect::BuiltinDsl, Provenance::Fixture, None).unwrap();
    (m, r)
}

fn symmetric() -> ParamMap {
    [
        ("l1", 0.5),
        ("l2", 0.5),
        ("l3", 0.5),
        ("r1", 0.05),
        ("r2", 0.05),
        ("r3", 0.05),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[test]
fn zero_actuation_stays_at_rest() {
    let cfg = SimConfig::default();
    let body = CrawlerMorphology::new([0.5; 3], [0.05; 3]).unwrap();
    let reward = CrawlerReward::new(&parse("dist").unwrap()).unwrap();
    let r = simulate(&body, &ControllerParams::idle(), &reward, &cfg).unwrap();
    assert_eq!(r.fitness, 0.0);
    assert_eq!(r.ret, 0.0);
}

#[test]
fn constant_reward_integrates_to_horizon() {
    let cfg = SimConfig::default();
    let body = CrawlerMorphology::new([0.3, 0.6, 0.9], [0.02, 0.1, 0.15]).unwrap();
    let reward = CrawlerReward::new(&parse("1").unwrap()).unwrap();
    let ctrl = ControllerParams {
        amplitude: [0.7; 3],
        frequency: [1.0; 3],
        phase: [0.0; 3],
    };
    let r = simulate(&body, &ctrl, &reward, &cfg).unwrap();
    assert!((r.ret - 10.0).abs() < 1e-9);
}

#[test]
fn builtin_evaluation_is_reproducible_and_pinned() {
    let (m, r) = candidates(&symmetric(), "v - 0.5*ctrl");
    let cem = CemConfig::default().with_seed(7);
    let a = evaluate_builtin(&m, &r, &cem, &SimConfig::default());
    let b = evaluate_builtin(&m, &r, &cem, &SimConfig::default());
    assert_eq!(a, b);
    assert_eq!(a.status, EvalStatus::Ok);
    let vol = 3.0 * PI * 0.05f64.powi(2) * 0.5;
    assert!((a.volume.unwrap() - vol).abs() < 1e-15);
    assert_eq!(a.efficiency.unwrap(), a.fitness.unwrap() / a.volume.unwrap());
    let golden = GOLDEN_FITNESS;
    assert!(
        (a.fitness.unwrap() - golden).abs() <= 1e-9 * golden.abs(),
        "fitness {:?}",
        a.fitness
    );
}

const GOLDEN_FITNESS: f64 = -2.0464507014634086e-5;

#[test]
fn reward_failures_map_to_statuses() {
    let cem = CemConfig {
        population: 4,
        elites: 1,
        iterations: 1,
        ..CemConfig::default()
    };
    let sim = SimConfig::default();
    let (m, r) = candidates(&symmetric(), "v + height");
    assert_eq!(
        evaluate_builtin(&m, &r, &cem, &sim).status,
        EvalStatus::RewardParseError
    );
    let (m, r) = candidates(&symmetric(), "1/(v - v)");
    assert_eq!(evaluate_builtin(&m, &r, &cem, &sim).status, EvalStatus::Nonfinite);
}
