//! Sample diversity: coefficient of variation over morphology parameters and
//! Self-BLEU over reward sources.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{MorphologySchema, ParamMap};

/// Parameters whose mean magnitude falls below this have no defined CV.
pub const DEGENERATE_MEAN: f64 = 1e-9;
pub const BLEU_ORDER: usize = 4;
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiversityError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("every parameter has a near-zero mean")]
    AllParamsDegenerate,
    #[error("sample {0} lacks parameter `{1}`")]
    IncompleteSample(usize, String),
    #[error("document {0} has no tokens")]
    EmptyDocument(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `None` for parameters excluded because their mean is ~0.
    pub per_param: BTreeMap<String, Option<f64>>,
    pub aggregate: f64,
}

/// Per-parameter `sigma / |mu|` with the population standard deviation, and
/// the mean of the defined values.
pub fn coefficient_of_variation(samples: &[ParamMap], schema: &MorphologySchema) -> Result<CvReport, DiversityError> {
    if samples.len() < 2 {
        return Err(DiversityError::TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let mut per_param = BTreeMap::new();
    let mut defined = Vec::new();
    for p in schema.params() {
        let mut xs = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            xs.push(
                *s.get(&p.name)
                    .ok_or_else(|| DiversityError::IncompleteSample(i, p.name.clone()))?,
            );
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let cv = if libm::fabs(mean) < DEGENERATE_MEAN {
            None
        } else {
            Some(libm::sqrt(var) / libm::fabs(mean))
        };
        if let Some(c) = cv {
            defined.push(c);
        }
        per_param.insert(p.name.clone(), cv);
    }
    if defined.is_empty() {
        return Err(DiversityError::AllParamsDegenerate);
    }
    let aggregate = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(CvReport { per_param, aggregate })
}

/// Splits source into identifiers, numeric literals and single
/// punctuation characters. Whitespace and `#` comment lines are dropped.
pub fn tokenize_code(source: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in source.lines() {
        if line.trim_start().starts_with('#') {
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let start = i;
            if c.is_whitespace() {
                i += 1;
                continue;
            } else if c.is_ascii_alphabetic() || c == '_' {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
            } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i < chars.len() && chars[i] == '.' {
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
            } else {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        }
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 of `hypothesis` against `references` with uniform
/// weights, clipped n-gram precision, the closest-reference brevity penalty
/// and epsilon smoothing of zero numerators.
pub fn bleu(hypothesis: &[String], references: &[&[String]]) -> f64 {
    let hyp_len = hypothesis.len();
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = hyp
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = hyp.values().sum::<usize>().max(1) as f64;
        let p = if clipped == 0 {
            BLEU_EPSILON / total
        } else {
            clipped as f64 / total
        };
        log_sum += libm::log(p) / BLEU_ORDER as f64;
    }
    // Closest reference length, ties to the shorter one.
    let ref_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0);
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    bp * libm::exp(log_sum)
}

/// Mean BLEU of each document against all the others. Lower is more diverse.
pub fn self_bleu<S: AsRef<str>>(corpus: &[S]) -> Result<f64, DiversityError> {
    if corpus.len() < 2 {
        return Err(DiversityError::TooFewSamples(corpus.len()));
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| tokenize_code(d.as_ref())).collect();
    if let Some(i) = docs.iter().position(Vec::is_empty) {
        return Err(DiversityError::EmptyDocument(i));
    }
    let mut total = 0.0;
    for (i, d) in docs.iter().enumerate() {
        let refs: Vec<&[String]> = docs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.as_slice())
            .collect();
        total += bleu(d, &refs);
    }
    Ok(total / docs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_param_cv: BTreeMap<String, Option<f64>>,
    pub aggregate_cv: Option<f64>,
    pub self_bleu: Option<f64>,
    pub morphology_count: usize,
    pub reward_count: usize,
}

/// Both metrics over one batch; a metric that is undefined for the batch
/// (too few samples, all-degenerate parameters) is reported as `None`.
pub fn report<S: AsRef<str>>(morphologies: &[ParamMap], rewards: &[S], schema: &MorphologySchema) -> DiversityReport {
    let cv = coefficient_of_variation(morphologies, schema).ok();
    DiversityReport {
        per_param_cv: cv.as_ref().map(|c| c.per_param.clone()).unwrap_or_default(),
        aggregate_cv: cv.map(|c| c.aggregate),
        self_bleu: self_bleu(rewards).ok(),
        morphology_count: morphologies.len(),
        reward_count: rewards.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSpec;
    use alloc::string::ToString;
    use alloc::vec;

    fn schema(names: &[&str]) -> MorphologySchema {
        let params = names.iter().map(|n| ParamSpec::new(n, -10.0, 10.0, "")).collect();
        let tpl: String = names.iter().map(|n| alloc::format!("{{{n}}}")).collect();
        MorphologySchema::new("s", params, &tpl).unwrap()
    }

    fn sample(pairs: &[(&str, f64)]) -> ParamMap {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn cv_examples() {
        let s = schema(&["l1"]);
        let r = coefficient_of_variation(&[sample(&[("l1", 1.0)]), sample(&[("l1", 1.0)])], &s).unwrap();
        assert_eq!(r.aggregate, 0.0);
        let r = coefficient_of_variation(&[sample(&[("l1", 1.0)]), sample(&[("l1", 2.0)])], &s).unwrap();
        assert!((r.aggregate - 1.0 / 3.0).abs() < 1e-12);
        let s = schema(&["l1", "r1"]);
        let r = coefficient_of_variation(
            &[sample(&[("l1", 1.0), ("r1", 2.0)]), sample(&[("l1", 3.0), ("r1", 2.0)])],
            &s,
        )
        .unwrap();
        assert_eq!(r.per_param["l1"], Some(0.5));
        assert_eq!(r.per_param["r1"], Some(0.0));
        assert_eq!(r.aggregate, 0.25);
    }

    #[test]
    fn cv_errors_and_exclusions() {
        let s = schema(&["a", "b"]);
        assert_eq!(
            coefficient_of_variation(&[sample(&[("a", 1.0), ("b", 1.0)])], &s),
            Err(DiversityError::TooFewSamples(1))
        );
        let r = coefficient_of_variation(
            &[sample(&[("a", 1.0), ("b", -1.0)]), sample(&[("a", 3.0), ("b", 1.0)])],
            &s,
        )
        .unwrap();
        assert_eq!(r.per_param["b"], None);
        assert_eq!(r.aggregate, 0.5);
        assert_eq!(
            coefficient_of_variation(
                &[sample(&[("a", 1.0), ("b", -1.0)]), sample(&[("a", -1.0), ("b", 1.0)])],
                &s
            ),
            Err(DiversityError::AllParamsDegenerate)
        );
        assert!(matches!(
            coefficient_of_variation(&[sample(&[("a", 1.0)]), sample(&[("a", 1.0), ("b", 1.0)])], &s),
            Err(DiversityError::IncompleteSample(0, _))
        ));
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_code("v - 0.5*ctrl"), vec!["v", "-", "0.5", "*", "ctrl"]);
        assert!(tokenize_code("").is_empty());
        assert_eq!(tokenize_code("x1+x1"), vec!["x1", "+", "x1"]);
        assert_eq!(
            tokenize_code("# header\nreward = 1e-3 * speed  \n  # note\nreturn reward"),
            vec!["reward", "=", "1e-3", "*", "speed", "return", "reward"]
        );
    }

    #[test]
    fn self_bleu_extremes() {
        assert_eq!(self_bleu(&["a b c d e", "a b c d e"]).unwrap(), 1.0);
        assert!(self_bleu(&["a b c d e", "v w x y z"]).unwrap() <= 1e-6);
        assert_eq!(self_bleu(&["a"]), Err(DiversityError::TooFewSamples(1)));
        assert_eq!(
            self_bleu(&["a", "# only a comment"]),
            Err(DiversityError::EmptyDocument(1))
        );
    }
}
