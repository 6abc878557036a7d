//! Language-model backends: scripted fixtures and an HTTP chat endpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use codesign_core::llm::{LanguageModel, LlmRequest, PromptTag, ProviderError, ScriptedProvider};
use codesign_core::model::ProviderSpec;
use serde_json::{json, Value};

/// Attempts per HTTP request before a network error is reported.
pub const HTTP_ATTEMPTS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixture {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("fixture {path} is not a map from prompt tag to a list of strings: {message}")]
    Format { path: String, message: String },
}

/// Reads a fixture file: a JSON object mapping tags (`morph_propose`,
/// `reward_propose`, `morph_refine`, `reward_refine`) to ordered response
/// lists. Missing tags have no responses.
pub fn load_fixture(path: &Path) -> Result<BTreeMap<PromptTag, Vec<String>>, FixtureError> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Read {
        path: shown.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| FixtureError::Format {
        path: shown,
        message: e.to_string(),
    })
}

pub fn save_fixture(path: &Path, fixture: &BTreeMap<PromptTag, Vec<String>>) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(fixture).expect("fixture serializes");
    fs::write(path, text + "\n")
}

/// Chat-completion client: POSTs `{model, messages, temperature}` and reads
/// `choices[0].message.content`.
pub struct HttpChat {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
    backoff: Duration,
}

impl HttpChat {
    /// Fails with [`ProviderError::Auth`] when the key variable is unset or
    /// empty, before any request is made.
    pub fn new(endpoint: &str, model: &str, api_key_env: &str) -> Result<Self, ProviderError> {
        let api_key = std::env::var(api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| ProviderError::Auth(format!("environment variable {api_key_env} is not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| ProviderError::Network(e.to_string()))?;
        Ok(HttpChat {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            client,
            backoff: Duration::from_secs(2),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, body: &Value) -> Result<String, (ProviderError, bool)> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| (ProviderError::Network(e.to_string()), true))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (ProviderError::Network(e.to_string()), true))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err((ProviderError::Auth(format!("HTTP {status}")), false));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((ProviderError::Network(format!("HTTP {status}")), true));
        }
        if !status.is_success() {
            return Err((ProviderError::BadResponse(format!("HTTP {status}: {text}")), false));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| (ProviderError::BadResponse(e.to_string()), false))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                (
                    ProviderError::BadResponse("no choices[0].message.content in reply".into()),
                    false,
                )
            })
    }
}

impl LanguageModel for HttpChat {
    fn complete(&mut self, request: &LlmRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        });
        let mut last = ProviderError::Network("no attempt made".into());
        for attempt in 0..HTTP_ATTEMPTS {
            if attempt > 0 {
                thread::sleep(self.backoff * attempt);
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((e, true)) => last = e,
                Err((e, false)) => return Err(e),
            }
        }
        Err(last)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Builds the backend named by `spec`.
pub fn open(spec: &ProviderSpec) -> Result<Box<dyn LanguageModel + Send>, OpenError> {
    match spec {
        ProviderSpec::ScriptedMock { fixture_path } => {
            Ok(Box::new(ScriptedProvider::new(load_fixture(Path::new(fixture_path))?)))
        }
        ProviderSpec::HttpChat {
            endpoint,
            model,
            api_key_env,
        } => Ok(Box::new(HttpChat::new(endpoint, model, api_key_env)?)),
    }
}
