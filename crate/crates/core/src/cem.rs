//! Cross-entropy method over open-loop controller parameters.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crawler::{simulate, ControllerParams, CrawlerMorphology, CrawlerReward, SimConfig, SimError};

const DIM: usize = ControllerParams::DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_elites")]
    pub elites: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Initial standard deviation as a fraction of each coordinate's range.
    #[serde(default = "default_init_std")]
    pub init_std_fraction: f64,
    /// Lower bound on the standard deviation, as a fraction of the range.
    #[serde(default = "default_std_floor")]
    pub std_floor_fraction: f64,
    /// Overridden per evaluation by the engine's derived seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_population() -> usize {
    32
}
fn default_elites() -> usize {
    8
}
fn default_iterations() -> usize {
    20
}
fn default_init_std() -> f64 {
    0.25
}
fn default_std_floor() -> f64 {
    0.01
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: default_population(),
            elites: default_elites(),
            iterations: default_iterations(),
            init_std_fraction: default_init_std(),
            std_floor_fraction: default_std_floor(),
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.elites == 0 || self.elites >= self.population {
            return Err("cem needs 0 < elites < population");
        }
        if self.iterations == 0 {
            return Err("cem needs at least one iteration");
        }
        if !(self.init_std_fraction > 0.0 && self.std_floor_fraction > 0.0) {
            return Err("cem standard deviations must be positive");
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Population statistics of one CEM iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    /// Mean over individuals whose rollout succeeded; `None` if none did.
    pub mean_return: Option<f64>,
    pub best_return: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub best: ControllerParams,
    pub best_return: f64,
    pub history: Vec<IterationStats>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CemError {
    #[error("invalid cem configuration: {0}")]
    Config(&'static str),
    #[error("every rollout failed; last error: {0}")]
    AllFailed(SimError),
}

/// Maximizes episode return over controller parameters.
///
/// Samples come from a diagonal Gaussian clamped to the parameter bounds;
/// the distribution is refit to the elites each iteration with the standard
/// deviation held above the floor. Failed rollouts score `-inf`. The best
/// controller ever sampled is returned.
pub fn train(
    body: &CrawlerMorphology,
    reward: &CrawlerReward,
    cfg: &CemConfig,
    sim: &SimConfig,
) -> Result<Trained, CemError> {
    cfg.validate().map_err(CemError::Config)?;
    let bounds = ControllerParams::bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = [0.0; DIM];
    let mut std = [0.0; DIM];
    let mut floor = [0.0; DIM];
    for (i, (lo, hi)) in bounds.iter().enumerate() {
        mean[i] = 0.5 * (lo + hi);
        std[i] = cfg.init_std_fraction * (hi - lo);
        floor[i] = cfg.std_floor_fraction * (hi - lo);
    }

    let mut best: Option<([f64; DIM], f64)> = None;
    let mut last_err = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut pop: Vec<([f64; DIM], f64)> = Vec::with_capacity(cfg.population);

    for _ in 0..cfg.iterations {
        pop.clear();
        for _ in 0..cfg.population {
            let mut x = [0.0; DIM];
            for i in 0..DIM {
                let z: f64 = rng.sample(StandardNormal);
                x[i] = (mean[i] + std[i] * z).clamp(bounds[i].0, bounds[i].1);
            }
            let score = match simulate(body, &ControllerParams::from_vector(&x), reward, sim) {
                Ok(r) => r.ret,
                Err(e) => {
                    last_err = Some(e);
                    f64::NEG_INFINITY
                }
            };
            pop.push((x, score));
        }

        let finite: Vec<f64> = pop.iter().map(|p| p.1).filter(|s| s.is_finite()).collect();
        let mean_return = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);

        // Stable sort keeps sampling order among equal scores.
        pop.sort_by(|a, b| b.1.total_cmp(&a.1));
        if pop[0].1.is_finite() && best.is_none_or(|(_, s)| pop[0].1 > s) {
            best = Some(pop[0]);
        }
        history.push(IterationStats {
            mean_return,
            best_return: pop[0].1,
            failures: cfg.population - finite.len(),
        });

        let elites = &pop[..cfg.elites];
        let n = cfg.elites as f64;
        for i in 0..DIM {
            let m = elites.iter().map(|e| e.0[i]).sum::<f64>() / n;
            let var = elites.iter().map(|e| (e.0[i] - m) * (e.0[i] - m)).sum::<f64>() / n;
            mean[i] = m;
            std[i] = libm::sqrt(var).max(floor[i]);
        }
    }

    match best {
        Some((x, ret)) => Ok(Trained {
            best: ControllerParams::from_vector(&x),
            best_return: ret,
            history,
        }),
        None => Err(CemError::AllFailed(last_err.unwrap_or(SimError::NonFinite))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_lang;

    fn setup(src: &str) -> (CrawlerMorphology, CrawlerReward) {
        let body = CrawlerMorphology::new([0.4, 0.3, 0.2], [0.03, 0.04, 0.02]).unwrap();
        let reward = CrawlerReward::new(&reward_lang::parse(src).unwrap()).unwrap();
        (body, reward)
    }

    fn small(seed: u64, iterations: usize) -> CemConfig {
        CemConfig {
            population: 16,
            elites: 4,
            iterations,
            seed,
            ..CemConfig::default()
        }
    }

    #[test]
    fn best_beats_initial_population_mean() {
        let (b, r) = setup("v");
        let t = train(&b, &r, &CemConfig::default().with_seed(42), &SimConfig::default()).unwrap();
        assert_eq!(t.history.len(), 20);
        assert!(t.best_return >= t.history[0].mean_return.unwrap());
        assert!(t.history.iter().all(|h| t.best_return >= h.best_return));
    }

    #[test]
    fn single_iteration_returns_best_of_first_population() {
        let (b, r) = setup("v - 0.5*ctrl");
        let t = train(&b, &r, &small(3, 1), &SimConfig::default()).unwrap();
        assert_eq!(t.history.len(), 1);
        assert_eq!(t.best_return, t.history[0].best_return);
    }

    #[test]
    fn same_seed_same_controller() {
        let (b, r) = setup("speed");
        let a = train(&b, &r, &small(9, 3), &SimConfig::default()).unwrap();
        let c = train(&b, &r, &small(9, 3), &SimConfig::default()).unwrap();
        assert_eq!(a.best, c.best);
        assert_eq!(a.best_return.to_bits(), c.best_return.to_bits());
        let d = train(&b, &r, &small(10, 3), &SimConfig::default()).unwrap();
        assert_ne!(a.best, d.best);
    }

    #[test]
    fn all_failing_rollouts_report_error() {
        let (b, r) = setup("1/(x-x)");
        let err = train(&b, &r, &small(1, 2), &SimConfig::default()).unwrap_err();
        assert!(matches!(err, CemError::AllFailed(_)));
    }

    #[test]
    fn invalid_config_rejected() {
        let (b, r) = setup("v");
        let cfg = CemConfig {
            elites: 32,
            ..CemConfig::default()
        };
        assert!(matches!(
            train(&b, &r, &cfg, &SimConfig::default()),
            Err(CemError::Config(_))
        ));
    }
}
