//! Prompt assembly: structure masking, proposal prompts with diversity
//! reflection, and refinement prompts carrying ranked prior samples.
//!
//! Every builder is a pure function of its inputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{MorphologySchema, ParamMap};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("parameter `{0}` does not occur in the structure template")]
    MaskMiss(String),
    #[error("prompt exceeds the {budget}-character budget even with a single sample")]
    ContextOverflow { budget: usize },
    #[error("refinement needs at least one ranked sample")]
    EmptyRanking,
    #[error("environment source contains reward marker `{0}`")]
    RewardInEnvironment(String),
    #[error("output format does not mention parameter `{0}`")]
    FormatMissingParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Morphology,
    Reward,
}

fn mask_token(name: &str) -> String {
    format!("<MASKED:{name}>")
}

/// Replaces every `{name}` placeholder of each listed parameter with
/// `<MASKED:name>`. Already-masked occurrences count, so masking twice is a
/// no-op.
pub fn mask_structure(template: &str, parameter_names: &[String]) -> Result<String, PromptError> {
    let mut out = template.to_string();
    for name in parameter_names {
        let placeholder = format!("{{{name}}}");
        let token = mask_token(name);
        if !out.contains(&placeholder) && !out.contains(&token) {
            return Err(PromptError::MaskMiss(name.clone()));
        }
        out = out.replace(&placeholder, &token);
    }
    Ok(out)
}

/// Reward markers that must not appear in environment source by default.
pub const DEFAULT_FORBIDDEN_MARKERS: [&str; 3] = ["def compute_reward", "def _get_rew", "reward ="];

/// Everything a prompt needs to know about the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub task_description: String,
    /// Environment code with the reward definition removed.
    pub environment_source: String,
    /// Structure file with every design parameter masked.
    pub structure_template: String,
    /// Required reply format for morphology proposals.
    pub output_format: String,
    /// Required reply format for reward functions.
    pub reward_format: String,
}

impl TaskContext {
    /// Masks the schema's structure template and derives the parameter
    /// output format from the schema.
    pub fn for_schema(
        schema: &MorphologySchema,
        task_description: &str,
        environment_source: &str,
        reward_format: &str,
    ) -> Result<Self, PromptError> {
        Ok(TaskContext {
            task_description: task_description.to_string(),
            environment_source: environment_source.to_string(),
            structure_template: mask_structure(schema.structure_template(), &schema.param_names())?,
            output_format: morphology_output_format(schema),
            reward_format: reward_format.to_string(),
        })
    }

    pub fn validate(&self, schema: &MorphologySchema, forbidden_markers: &[&str]) -> Result<(), PromptError> {
        if let Some(m) = forbidden_markers.iter().find(|m| self.environment_source.contains(**m)) {
            return Err(PromptError::RewardInEnvironment(m.to_string()));
        }
        for p in schema.params() {
            if !self.output_format.contains(&format!("{}:", p.name)) {
                return Err(PromptError::FormatMissingParam(p.name.clone()));
            }
        }
        Ok(())
    }
}

/// A fenced `name: <value>` listing with bounds and units per parameter.
pub fn morphology_output_format(schema: &MorphologySchema) -> String {
    let mut s = String::from(
        "Reply with one fenced code block containing exactly one line per parameter, \
         `name: value`, with a plain decimal number for each value:\n```\n",
    );
    for p in schema.params() {
        let unit = if p.unit.is_empty() {
            String::new()
        } else {
            format!(" {}", p.unit)
        };
        s.push_str(&format!("{}: <number in [{}, {}]{}>\n", p.name, p.lower, p.upper, unit));
    }
    s.push_str("```");
    s
}

/// Named text templates with `{{placeholder}}` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    templates: BTreeMap<&'static str, String>,
}

pub const TEMPLATE_NAMES: [&str; 9] = [
    "system_morphology",
    "system_reward",
    "morphology_proposal",
    "reward_proposal",
    "diversity_morphology",
    "diversity_reward",
    "refine_morphology",
    "refine_reward",
    "corrective",
];

const DEFAULTS: [(&str, &str); 9] = [
    (
        "system_morphology",
        "You are a robot designer. You choose morphology parameters for a robot so that, \
         after training, it performs the task as efficiently as possible: high fitness per \
         unit of body volume. Always answer in the exact output format requested.",
    ),
    (
        "system_reward",
        "You are a reward engineer. You write reward functions that lead a reinforcement \
         learning agent to solve the task with the given robot. Always answer in the exact \
         output format requested.",
    ),
    (
        "morphology_proposal",
        "Task description:\n{{task_description}}\n\n\
         Robot structure file. Every design parameter is masked as <MASKED:name>:\n\
         {{structure}}\n\n\
         Propose a value for every masked parameter.\n\n\
         Output format:\n{{output_format}}",
    ),
    (
        "reward_proposal",
        "Task description:\n{{task_description}}\n\n\
         Environment code (the reward function has been removed):\n{{environment_source}}\n\n\
         Write a reward function for this task using the variables the environment exposes.\n\n\
         Output format:\n{{output_format}}",
    ),
    (
        "diversity_morphology",
        "\n\nDesigns proposed so far ({{count}}):\n{{archive}}\n\
         Reflect on the designs above. Propose a new design that is as different as possible \
         from all of them while still being a good fit for the task.",
    ),
    (
        "diversity_reward",
        "\n\nReward functions proposed so far ({{count}}):\n{{archive}}\n\
         Reflect on the reward functions above. Write a new reward function that is as \
         different as possible from all of them, encouraging a different behavior, while \
         still solving the task.",
    ),
    (
        "refine_morphology",
        "Task description:\n{{task_description}}\n\n\
         Current best pair (efficiency {{best_score}}):\nMorphology:\n{{best_morphology}}\n\
         Reward function:\n{{best_reward}}\n\n\
         Best samples evaluated so far, ranked by efficiency:\n{{ranked}}\n\
         Study how efficiency changes with the morphology parameters across these samples and \
         continue in the direction that improves it. Improve ONLY the morphology; the reward \
         function stays fixed.\n\n\
         Output format:\n{{output_format}}",
    ),
    (
        "refine_reward",
        "Task description:\n{{task_description}}\n\n\
         Environment code (the reward function has been removed):\n{{environment_source}}\n\n\
         Current best pair (efficiency {{best_score}}):\nMorphology:\n{{best_morphology}}\n\
         Reward function:\n{{best_reward}}\n\n\
         Best samples evaluated so far, ranked by efficiency:\n{{ranked}}\n\
         Study which reward terms led to higher efficiency and refine the reward so the \
         learned behavior suits the current morphology better. Improve ONLY the reward \
         function; the morphology stays fixed.\n\n\
         Output format:\n{{output_format}}",
    ),
    (
        "corrective",
        "\n\nYour previous answer could not be used: {{error}}\n\
         Answer again and follow the output format exactly.",
    ),
];

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            templates: DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }
}

impl PromptTemplates {
    /// Replaces a template. Returns false for unknown names.
    pub fn set(&mut self, name: &str, text: String) -> bool {
        match TEMPLATE_NAMES.iter().find(|n| **n == name) {
            Some(n) => {
                self.templates.insert(n, text);
                true
            }
            None => false,
        }
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates.get(name).map_or("", String::as_str)
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        fill(self.get(name), vars)
    }
}

/// Substitutes `{{key}}` for every pair in `vars`.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// Formats a score the way prompts and reports show it.
pub fn fmt_score(score: f64) -> String {
    format!("{score:.4}")
}

pub fn render_params(values: &ParamMap) -> String {
    let mut s = String::new();
    for (k, v) in values {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveEntry {
    Morphology {
        id: String,
        values: ParamMap,
        efficiency: Option<f64>,
    },
    Reward {
        id: String,
        source: String,
        efficiency: Option<f64>,
    },
}

impl ArchiveEntry {
    fn render(&self) -> String {
        let (id, body, eff) = match self {
            ArchiveEntry::Morphology { id, values, efficiency } => (id, render_params(values), efficiency),
            ArchiveEntry::Reward { id, source, efficiency } => (id, format!("```\n{source}\n```\n"), efficiency),
        };
        let score = eff
            .map(|e| format!(" (efficiency {})", fmt_score(e)))
            .unwrap_or_default();
        format!("--- sample {id}{score} ---\n{body}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.system.chars().count() + self.user.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.system.is_empty() && self.user.is_empty()
    }
}

fn system_for(kind: PromptKind, t: &PromptTemplates) -> String {
    match kind {
        PromptKind::Morphology => t.get("system_morphology").to_string(),
        PromptKind::Reward => t.get("system_reward").to_string(),
    }
}

/// Proposal prompt. An empty archive gives the base prompt; otherwise the
/// diversity section lists every prior sample in archive order, dropping the
/// oldest ones first if the prompt would exceed `budget` characters.
pub fn build_proposal_prompt(
    kind: PromptKind,
    ctx: &TaskContext,
    archive: &[ArchiveEntry],
    templates: &PromptTemplates,
    budget: usize,
) -> Result<Prompt, PromptError> {
    let system = system_for(kind, templates);
    let base = match kind {
        PromptKind::Morphology => templates.render(
            "morphology_proposal",
            &[
                ("task_description", &ctx.task_description),
                ("structure", &ctx.structure_template),
                ("output_format", &ctx.output_format),
            ],
        ),
        PromptKind::Reward => templates.render(
            "reward_proposal",
            &[
                ("task_description", &ctx.task_description),
                ("environment_source", &ctx.environment_source),
                ("output_format", &ctx.reward_format),
            ],
        ),
    };
    if archive.is_empty() {
        return Ok(Prompt { system, user: base });
    }
    let section = match kind {
        PromptKind::Morphology => "diversity_morphology",
        PromptKind::Reward => "diversity_reward",
    };
    let rendered: Vec<String> = archive.iter().map(ArchiveEntry::render).collect();
    for skip in 0..rendered.len() {
        let mut listing = String::new();
        if skip > 0 {
            listing.push_str(&format!("({skip} earlier samples omitted)\n"));
        }
        for r in &rendered[skip..] {
            listing.push_str(r);
        }
        let count = format!("{}", archive.len());
        let user = base.clone() + &templates.render(section, &[("count", &count), ("archive", &listing)]);
        let p = Prompt {
            system: system.clone(),
            user,
        };
        if p.len() <= budget {
            return Ok(p);
        }
    }
    Err(PromptError::ContextOverflow { budget })
}

/// A scored pair shown to refinement prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSample {
    pub morphology_id: String,
    pub values: ParamMap,
    pub reward_id: String,
    pub reward_source: String,
    pub efficiency: f64,
}

/// Refinement prompt for one component of the incumbent pair. `ranked` must
/// be sorted by efficiency descending; the lowest-ranked samples are dropped
/// first when the budget is exceeded.
pub fn build_refine_prompt(
    kind: PromptKind,
    ctx: &TaskContext,
    current: &RankedSample,
    ranked: &[RankedSample],
    templates: &PromptTemplates,
    budget: usize,
) -> Result<Prompt, PromptError> {
    if ranked.is_empty() {
        return Err(PromptError::EmptyRanking);
    }
    let system = system_for(kind, templates);
    let rows: Vec<String> = ranked
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let head = format!(
                "#{} efficiency {} (morphology {}, reward {})\n",
                i + 1,
                fmt_score(s.efficiency),
                s.morphology_id,
                s.reward_id
            );
            match kind {
                PromptKind::Morphology => head + &render_params(&s.values),
                PromptKind::Reward => head + &format!("```\n{}\n```\n", s.reward_source),
            }
        })
        .collect();
    let best_morphology = render_params(&current.values);
    let best_reward = format!("```\n{}\n```", current.reward_source);
    let best_score = fmt_score(current.efficiency);
    let (name, format_) = match kind {
        PromptKind::Morphology => ("refine_morphology", &ctx.output_format),
        PromptKind::Reward => ("refine_reward", &ctx.reward_format),
    };
    for keep in (1..=rows.len()).rev() {
        let listing: String = rows[..keep].concat();
        let user = templates.render(
            name,
            &[
                ("task_description", &ctx.task_description),
                ("environment_source", &ctx.environment_source),
                ("best_score", &best_score),
                ("best_morphology", &best_morphology),
                ("best_reward", &best_reward),
                ("ranked", &listing),
                ("output_format", format_),
            ],
        );
        let p = Prompt {
            system: system.clone(),
            user,
        };
        if p.len() <= budget {
            return Ok(p);
        }
    }
    Err(PromptError::ContextOverflow { budget })
}

/// Appends the corrective instruction used when a reply cannot be parsed.
pub fn with_correction(user_prompt: &str, error: &str, templates: &PromptTemplates) -> String {
    String::from(user_prompt) + &templates.render("corrective", &[("error", error)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSpec;
    use alloc::vec;

    fn names(ns: &[&str]) -> Vec<String> {
        ns.iter().map(|s| s.to_string()).collect()
    }

    fn schema() -> MorphologySchema {
        MorphologySchema::new(
            "s",
            vec![
                ParamSpec::new("l1", 0.05, 1.0, "m"),
                ParamSpec::new("r1", 0.01, 0.2, "m"),
            ],
            "<geom length=\"{l1}\" radius=\"{r1}\"/>",
        )
        .unwrap()
    }

    fn ctx() -> TaskContext {
        TaskContext::for_schema(&schema(), "walk far", "obs = {\"v\": v}", "one expression").unwrap()
    }

    fn params(l1: f64, r1: f64) -> ParamMap {
        [("l1".to_string(), l1), ("r1".to_string(), r1)].into_iter().collect()
    }

    #[test]
    fn masking() {
        assert_eq!(
            mask_structure("len=0.5 {l1}", &names(&["l1"])).unwrap(),
            "len=0.5 <MASKED:l1>"
        );
        assert_eq!(
            mask_structure("{l1}", &names(&["l1", "r1"])),
            Err(PromptError::MaskMiss("r1".into()))
        );
        assert_eq!(
            mask_structure("a={l1} b={l1}", &names(&["l1"])).unwrap(),
            "a=<MASKED:l1> b=<MASKED:l1>"
        );
        let once = mask_structure("{l1}/{r1}", &names(&["l1", "r1"])).unwrap();
        assert_eq!(mask_structure(&once, &names(&["l1", "r1"])).unwrap(), once);
    }

    #[test]
    fn context_validation() {
        let c = ctx();
        assert!(c.validate(&schema(), &DEFAULT_FORBIDDEN_MARKERS).is_ok());
        let mut bad = c.clone();
        bad.environment_source.push_str("\nreward = v");
        assert!(matches!(
            bad.validate(&schema(), &DEFAULT_FORBIDDEN_MARKERS),
            Err(PromptError::RewardInEnvironment(_))
        ));
        let mut bad = c;
        bad.output_format = "l1: x".into();
        assert_eq!(
            bad.validate(&schema(), &[]),
            Err(PromptError::FormatMissingParam("r1".into()))
        );
        assert!(!ctx().structure_template.contains("{l1}"));
    }

    #[test]
    fn base_proposal_has_no_diversity_section() {
        let t = PromptTemplates::default();
        let p = build_proposal_prompt(PromptKind::Morphology, &ctx(), &[], &t, 24_000).unwrap();
        assert!(p.user.contains("<MASKED:l1>"));
        assert!(p.user.contains(&ctx().output_format));
        assert!(!p.user.contains("proposed so far"));
    }

    #[test]
    fn diversity_section_lists_prior_samples() {
        let t = PromptTemplates::default();
        let m1 = ArchiveEntry::Morphology {
            id: "m1".into(),
            values: params(0.5, 0.1),
            efficiency: None,
        };
        let p = build_proposal_prompt(PromptKind::Morphology, &ctx(), &[m1], &t, 24_000).unwrap();
        assert!(p.user.contains("l1: 0.5\nr1: 0.1\n"));
        assert!(p.user.contains("as different as possible"));

        let rs = [
            ArchiveEntry::Reward {
                id: "r1".into(),
                source: "v - ctrl".into(),
                efficiency: Some(2.0),
            },
            ArchiveEntry::Reward {
                id: "r2".into(),
                source: "speed * 3".into(),
                efficiency: None,
            },
        ];
        let p = build_proposal_prompt(PromptKind::Reward, &ctx(), &rs, &t, 24_000).unwrap();
        let a = p.user.find("v - ctrl").unwrap();
        let b = p.user.find("speed * 3").unwrap();
        assert!(a < b);
        assert!(p.user.contains("efficiency 2.0000"));
    }

    #[test]
    fn archive_truncates_oldest_first() {
        let t = PromptTemplates::default();
        let archive: Vec<ArchiveEntry> = (0..50)
            .map(|i| ArchiveEntry::Reward {
                id: format!("r{i}"),
                source: format!("v * {i} + {}", "1 + ".repeat(20)),
                efficiency: None,
            })
            .collect();
        let full = build_proposal_prompt(PromptKind::Reward, &ctx(), &archive, &t, usize::MAX).unwrap();
        let budget = full.len() / 2;
        let p = build_proposal_prompt(PromptKind::Reward, &ctx(), &archive, &t, budget).unwrap();
        assert!(p.len() <= budget);
        assert!(p.user.contains("--- sample r49 ---"));
        assert!(!p.user.contains("--- sample r0 ---"));
        assert!(p.user.contains("earlier samples omitted"));
        assert_eq!(
            build_proposal_prompt(PromptKind::Reward, &ctx(), &archive, &t, 10),
            Err(PromptError::ContextOverflow { budget: 10 })
        );
    }

    fn sample(m: &str, r: &str, eff: f64) -> RankedSample {
        RankedSample {
            morphology_id: m.into(),
            values: params(0.3, 0.02),
            reward_id: r.into(),
            reward_source: format!("v * {eff}"),
            efficiency: eff,
        }
    }

    #[test]
    fn refine_prompt_embeds_ranked_scores_in_order() {
        let t = PromptTemplates::default();
        let ranked = [
            sample("m1", "r1", 30.5),
            sample("m2", "r1", 20.25),
            sample("m3", "r2", 10.125),
        ];
        let p = build_refine_prompt(PromptKind::Morphology, &ctx(), &ranked[0], &ranked, &t, 24_000).unwrap();
        let pos: Vec<usize> = ranked
            .iter()
            .map(|s| p.user.find(&format!("efficiency {}", fmt_score(s.efficiency))).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(p.user.contains("Improve ONLY the morphology"));
        assert!(p.user.contains(&ctx().output_format));
    }

    #[test]
    fn refine_reward_prompt_embeds_current_source() {
        let t = PromptTemplates::default();
        let cur = sample("m1", "r1", 3.0);
        let p = build_refine_prompt(PromptKind::Reward, &ctx(), &cur, std::slice::from_ref(&cur), &t, 24_000).unwrap();
        assert!(p.user.contains("v * 3"));
        assert!(p.user.contains("Improve ONLY the reward"));
        assert_eq!(
            build_refine_prompt(PromptKind::Reward, &ctx(), &cur, &[], &t, 24_000),
            Err(PromptError::EmptyRanking)
        );
    }

    #[test]
    fn templates_can_be_replaced() {
        let mut t = PromptTemplates::default();
        assert!(t.set("corrective", " FIX: {{error}}".into()));
        assert!(!t.set("nope", String::new()));
        assert_eq!(with_correction("ask", "bad", &t), "ask FIX: bad");
    }
}
