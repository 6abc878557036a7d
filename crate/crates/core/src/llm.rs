//! Language-model interface and parsing of structured replies.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{MorphologySchema, ParamMap};

/// Which stage a request belongs to. Scripted providers keep one response
/// queue per tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    MorphPropose,
    RewardPropose,
    MorphRefine,
    RewardRefine,
}

impl PromptTag {
    pub const ALL: [PromptTag; 4] = [
        PromptTag::MorphPropose,
        PromptTag::RewardPropose,
        PromptTag::MorphRefine,
        PromptTag::RewardRefine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptTag::MorphPropose => "morph_propose",
            PromptTag::RewardPropose => "reward_propose",
            PromptTag::MorphRefine => "morph_refine",
            PromptTag::RewardRefine => "reward_refine",
        }
    }
}

impl fmt::Display for PromptTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub tag: PromptTag,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider authentication failed: {0}")]
    Auth(String),
    #[error("provider request failed: {0}")]
    Network(String),
    #[error("provider returned an unusable response: {0}")]
    BadResponse(String),
    #[error("scripted fixture has no more `{0}` responses")]
    FixtureExhausted(PromptTag),
}

/// A completion backend.
pub trait LanguageModel {
    fn complete(&mut self, request: &LlmRequest) -> Result<String, ProviderError>;

    /// Called once when a persisted run is resumed, with the number of
    /// responses already consumed per tag. Scripted providers skip that many
    /// entries so the resumed run sees the same responses.
    fn resume_from(&mut self, _consumed: &BTreeMap<PromptTag, u64>) {}
}

impl<L: LanguageModel + ?Sized> LanguageModel for &mut L {
    fn complete(&mut self, request: &LlmRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }

    fn resume_from(&mut self, consumed: &BTreeMap<PromptTag, u64>) {
        (**self).resume_from(consumed)
    }
}

impl<L: LanguageModel + ?Sized> LanguageModel for Box<L> {
    fn complete(&mut self, request: &LlmRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }

    fn resume_from(&mut self, consumed: &BTreeMap<PromptTag, u64>) {
        (**self).resume_from(consumed)
    }
}

/// Replays fixed responses, in order, per tag. Every request is captured.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    queues: BTreeMap<PromptTag, VecDeque<String>>,
    requests: Vec<LlmRequest>,
}

impl ScriptedProvider {
    pub fn new(responses: BTreeMap<PromptTag, Vec<String>>) -> Self {
        ScriptedProvider {
            queues: responses.into_iter().map(|(k, v)| (k, v.into())).collect(),
            requests: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: PromptTag, response: impl Into<String>) {
        self.queues.entry(tag).or_default().push_back(response.into());
    }

    /// Requests seen so far, in call order.
    pub fn requests(&self) -> &[LlmRequest] {
        &self.requests
    }

    pub fn remaining(&self, tag: PromptTag) -> usize {
        self.queues.get(&tag).map_or(0, VecDeque::len)
    }
}

impl LanguageModel for ScriptedProvider {
    fn complete(&mut self, request: &LlmRequest) -> Result<String, ProviderError> {
        self.requests.push(request.clone());
        self.queues
            .get_mut(&request.tag)
            .and_then(VecDeque::pop_front)
            .ok_or(ProviderError::FixtureExhausted(request.tag))
    }

    fn resume_from(&mut self, consumed: &BTreeMap<PromptTag, u64>) {
        for (tag, n) in consumed {
            if let Some(q) = self.queues.get_mut(tag) {
                let n = (*n as usize).min(q.len());
                q.drain(..n);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResponseError {
    #[error("missing parameter(s): {}", .0.join(", "))]
    MissingParams(Vec<String>),
    #[error("value for `{name}` is not a finite number: `{text}`")]
    NotANumber { name: String, text: String },
    #[error("response contains no code")]
    EmptyCode,
}

/// Contents of every complete ``` fenced block, in order. A leading
/// info-string line such as `python` is dropped.
pub fn fenced_blocks(text: &str) -> Vec<&str> {
    let fences: Vec<usize> = text.match_indices("```").map(|(i, _)| i).collect();
    fences
        .chunks_exact(2)
        .map(|pair| strip_info_string(&text[pair[0] + 3..pair[1]]))
        .collect()
}

fn strip_info_string(block: &str) -> &str {
    match block.split_once('\n') {
        Some((first, rest))
            if !first.is_empty() && first.bytes().all(|b| b.is_ascii_alphanumeric() || b"_+-.".contains(&b)) =>
        {
            rest
        }
        Some(("", rest)) => rest,
        _ => block,
    }
}

fn last_block_or_all(text: &str) -> &str {
    fenced_blocks(text).last().copied().unwrap_or(text)
}

/// Reads `name: number` lines for every schema parameter from the last
/// fenced block (or the whole response when there is none).
pub fn extract_params_block(response: &str, schema: &MorphologySchema) -> Result<ParamMap, ResponseError> {
    let body = last_block_or_all(response);
    let mut out = ParamMap::new();
    for line in body.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((name, rest)) = line.split_once(':') else {
            continue;
        };
        let name = name.trim().trim_matches(['`', '"', '\'']);
        if schema.param(name).is_none() {
            continue;
        }
        let text = rest
            .split_whitespace()
            .next()
            .unwrap_or("")
            .trim_end_matches([',', ';']);
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                out.insert(name.to_string(), v);
            }
            _ => {
                return Err(ResponseError::NotANumber {
                    name: name.to_string(),
                    text: rest.trim().to_string(),
                })
            }
        }
    }
    let missing: Vec<String> = schema
        .params()
        .iter()
        .filter(|p| !out.contains_key(&p.name))
        .map(|p| p.name.clone())
        .collect();
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(ResponseError::MissingParams(missing))
    }
}

/// Contents of the last fenced block, or the whole trimmed response.
pub fn extract_code_block(response: &str) -> Result<String, ResponseError> {
    let code = last_block_or_all(response).trim();
    if code.is_empty() {
        Err(ResponseError::EmptyCode)
    } else {
        Ok(code.to_string())
    }
}

/// Renders a parameter map in the format [`extract_params_block`] reads.
pub fn render_params_block(values: &ParamMap) -> String {
    let mut s = String::from("```\n");
    for (k, v) in values {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s.push_str("```");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSpec;
    use alloc::vec;

    fn schema() -> MorphologySchema {
        MorphologySchema::new(
            "s",
            vec![ParamSpec::new("l1", 0.0, 1.0, "m"), ParamSpec::new("r1", 0.0, 1.0, "m")],
            "{l1} {r1}",
        )
        .unwrap()
    }

    fn req(tag: PromptTag) -> LlmRequest {
        LlmRequest {
            system_prompt: "s".into(),
            user_prompt: "u".into(),
            temperature: 1.0,
            max_retries: 0,
            tag,
        }
    }

    #[test]
    fn scripted_provider_is_a_queue_per_tag() {
        let mut p = ScriptedProvider::default();
        p.push(PromptTag::MorphPropose, "A");
        p.push(PromptTag::MorphPropose, "B");
        p.push(PromptTag::RewardPropose, "R");
        assert_eq!(p.complete(&req(PromptTag::MorphPropose)).unwrap(), "A");
        assert_eq!(p.complete(&req(PromptTag::RewardPropose)).unwrap(), "R");
        assert_eq!(p.complete(&req(PromptTag::MorphPropose)).unwrap(), "B");
        assert_eq!(
            p.complete(&req(PromptTag::MorphPropose)),
            Err(ProviderError::FixtureExhausted(PromptTag::MorphPropose))
        );
        assert_eq!(p.requests().len(), 4);
    }

    #[test]
    fn empty_fixture_is_exhausted() {
        let mut p = ScriptedProvider::default();
        assert!(matches!(
            p.complete(&req(PromptTag::RewardRefine)),
            Err(ProviderError::FixtureExhausted(_))
        ));
    }

    #[test]
    fn resume_skips_consumed_responses() {
        let mut p = ScriptedProvider::default();
        for s in ["A", "B", "C"] {
            p.push(PromptTag::MorphRefine, s);
        }
        p.resume_from(&[(PromptTag::MorphRefine, 2)].into_iter().collect());
        assert_eq!(p.complete(&req(PromptTag::MorphRefine)).unwrap(), "C");
    }

    #[test]
    fn params_from_well_formed_block() {
        let m = extract_params_block("```\nl1: 0.5\nr1: 0.1\n```", &schema()).unwrap();
        assert_eq!(m.get("l1"), Some(&0.5));
        assert_eq!(m.get("r1"), Some(&0.1));
    }

    #[test]
    fn last_fenced_block_wins() {
        let m = extract_params_block("use l1: 0.5 ... ```\nl1: 0.7\nr1: 0.1\n```", &schema()).unwrap();
        assert_eq!(m.get("l1"), Some(&0.7));
        assert_eq!(m.get("r1"), Some(&0.1));
        let m = extract_params_block(
            "first\n```\nl1: 0.2\nr1: 0.2\n```\nthen\n```text\nl1: 0.3\nr1: 0.4, \n```",
            &schema(),
        )
        .unwrap();
        assert_eq!((m["l1"], m["r1"]), (0.3, 0.4));
    }

    #[test]
    fn params_without_fences_and_with_prose() {
        let m = extract_params_block("Here you go:\n- l1: 0.25 # long\n- r1: 0.05\nCheers", &schema()).unwrap();
        assert_eq!((m["l1"], m["r1"]), (0.25, 0.05));
    }

    #[test]
    fn non_numeric_or_missing_values_fail() {
        assert!(matches!(
            extract_params_block("```\nl1: big\n```", &schema()),
            Err(ResponseError::NotANumber { .. })
        ));
        assert_eq!(
            extract_params_block("```\nl1: 0.5\n```", &schema()),
            Err(ResponseError::MissingParams(vec!["r1".into()]))
        );
        assert!(matches!(
            extract_params_block("l1: nan\nr1: 1", &schema()),
            Err(ResponseError::NotANumber { .. })
        ));
    }

    #[test]
    fn code_block_extraction() {
        assert_eq!(
            extract_code_block("here:\n```\nv - 0.5*ctrl\n```").unwrap(),
            "v - 0.5*ctrl"
        );
        assert_eq!(extract_code_block("```a```\ntext\n```b```").unwrap(), "b");
        assert_eq!(extract_code_block("```python\nv * 2\n```").unwrap(), "v * 2");
        assert_eq!(extract_code_block("  v  ").unwrap(), "v");
        assert_eq!(extract_code_block(""), Err(ResponseError::EmptyCode));
        assert_eq!(extract_code_block("```\n\n```"), Err(ResponseError::EmptyCode));
    }

    #[test]
    fn rendered_block_parses_back() {
        let mut m = ParamMap::new();
        m.insert("l1".into(), 0.123456789);
        m.insert("r1".into(), 1e-7);
        assert_eq!(extract_params_block(&render_params_block(&m), &schema()).unwrap(), m);
    }
}
