//! Randomized scripted-provider fixtures for demos and tests.

use std::collections::BTreeMap;

use codesign_core::llm::{render_params_block, PromptTag};
use codesign_core::model::{MorphologySchema, ParamMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    /// Responses per tag.
    pub counts: BTreeMap<PromptTag, usize>,
    /// Probability that a response cannot be parsed.
    pub malformed_rate: f64,
    /// Probability that a morphology value lies outside its bounds.
    pub out_of_bounds_rate: f64,
    /// Variables reward expressions may use.
    pub reward_vars: Vec<String>,
}

impl FixtureSpec {
    pub fn new(seed: u64, proposals: (usize, usize), refinements: usize, reward_vars: &[&str]) -> Self {
        let counts = [
            (PromptTag::MorphPropose, proposals.0),
            (PromptTag::RewardPropose, proposals.1),
            (PromptTag::MorphRefine, refinements),
            (PromptTag::RewardRefine, refinements),
        ]
        .into_iter()
        .collect();
        FixtureSpec {
            seed,
            counts,
            malformed_rate: 0.0,
            out_of_bounds_rate: 0.0,
            reward_vars: reward_vars.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn morphology_reply(rng: &mut ChaCha8Rng, schema: &MorphologySchema, spec: &FixtureSpec) -> String {
    if rng.random_bool(spec.malformed_rate) {
        return "I would make the body a little longer than before.".into();
    }
    let mut values = ParamMap::new();
    for p in schema.params() {
        let span = p.upper - p.lower;
        let v = if rng.random_bool(spec.out_of_bounds_rate) {
            p.upper + rng.random_range(0.01..0.5) * span
        } else {
            p.lower + rng.random::<f64>() * span
        };
        values.insert(p.name.clone(), (v * 1e4).round() / 1e4);
    }
    format!(
        "Here is the design.\n{}\nIt differs from the others.",
        render_params_block(&values)
    )
}

fn reward_term(rng: &mut ChaCha8Rng, vars: &[String]) -> String {
    let v = &vars[rng.random_range(0..vars.len())];
    match rng.random_range(0..6) {
        0 => v.clone(),
        1 => format!("tanh({v})"),
        2 => format!("abs({v})"),
        3 => format!("min({v}, {:.1})", rng.random_range(0.5..3.0)),
        4 => format!("{v} * {v}"),
        _ => format!("clamp({v}, -1, 1)"),
    }
}

fn reward_reply(rng: &mut ChaCha8Rng, spec: &FixtureSpec) -> String {
    if rng.random_bool(spec.malformed_rate) {
        return "```\n```".into();
    }
    let n = rng.random_range(1..=3);
    let mut expr = format!(
        "{:.2} * {}",
        rng.random_range(0.2..2.0),
        reward_term(rng, &spec.reward_vars)
    );
    for _ in 1..n {
        let sign = if rng.random_bool(0.5) { '+' } else { '-' };
        expr.push_str(&format!(
            " {sign} {:.2} * {}",
            rng.random_range(0.01..1.0),
            reward_term(rng, &spec.reward_vars)
        ));
    }
    format!("```python\n{expr}\n```")
}

/// Responses for every tag in `spec.counts`, reproducible from `spec.seed`.
pub fn synthetic(schema: &MorphologySchema, spec: &FixtureSpec) -> BTreeMap<PromptTag, Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = BTreeMap::new();
    for (&tag, &n) in &spec.counts {
        let replies = (0..n)
            .map(|_| match tag {
                PromptTag::MorphPropose | PromptTag::MorphRefine => morphology_reply(&mut rng, schema, spec),
                PromptTag::RewardPropose | PromptTag::RewardRefine => reward_reply(&mut rng, spec),
            })
            .collect();
        out.insert(tag, replies);
    }
    out
}
