//! Chat-completion backends.

use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{GenBackendConfig, GenBackendKind, GenError};
use crate::http::{api_key_from_env, JsonClient, RetryPolicy};
use crate::text::fnv1a64;

const BUNDLED_FIXTURES: &str = include_str!("../../assets/mock_fixtures.json");

pub trait ChatBackend: Send + Sync {
    /// Send one user message and return the reply text.
    fn complete(&self, prompt: &str) -> Result<String, GenError>;

    fn backend_id(&self) -> String;
}

/// OpenAI-compatible chat-completions client.
pub struct RemoteChat {
    client: JsonClient,
    endpoint_url: String,
    model_name: String,
    temperature: f64,
}

impl RemoteChat {
    pub fn new(cfg: &GenBackendConfig) -> Result<Self, GenError> {
        cfg.validate()?;
        let key = api_key_from_env(&cfg.api_key_env)?;
        let client = JsonClient::new(
            key,
            Duration::from_secs_f64(cfg.timeout_seconds),
            RetryPolicy {
                max_retries: cfg.max_retries,
                backoff: Duration::from_millis(cfg.retry_backoff_ms),
            },
        )?;
        Ok(Self {
            client,
            endpoint_url: cfg.endpoint_url.clone(),
            model_name: cfg.model_name.clone(),
            temperature: cfg.temperature,
        })
    }
}

impl ChatBackend for RemoteChat {
    fn complete(&self, prompt: &str) -> Result<String, GenError> {
        let body = json!({
            "model": self.model_name,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.temperature,
        });
        let resp = self.client.post(&self.endpoint_url, &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| GenError::Response("missing choices[0].message.content".into()))
    }

    fn backend_id(&self) -> String {
        format!("remote:{}", self.model_name)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Patterns {
    One(String),
    All(Vec<String>),
}

fn patterns<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    Ok(match Patterns::deserialize(d)? {
        Patterns::One(p) => vec![p],
        Patterns::All(ps) => ps,
    })
}

#[derive(Debug, Clone, Deserialize)]
pub struct FixtureRule {
    /// Substrings the prompt must all contain; a single string is accepted,
    /// and an empty one matches everything.
    #[serde(rename = "match", deserialize_with = "patterns")]
    pub patterns: Vec<String>,
    pub responses: Vec<String>,
}

impl FixtureRule {
    pub fn matches(&self, prompt: &str) -> bool {
        self.patterns.iter().all(|p| prompt.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct FixtureTable {
    pub version: u32,
    pub rules: Vec<FixtureRule>,
}

impl FixtureTable {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_FIXTURES).expect("bundled fixture table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GenError> {
        let table: FixtureTable = serde_json::from_str(text)
            .map_err(|e| GenError::Config(format!("fixture table: {e}")))?;
        if table.rules.iter().any(|r| r.responses.is_empty()) {
            return Err(GenError::Config("fixture rule without responses".into()));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GenError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Table whose every prompt receives one of `responses`.
    pub fn single(responses: Vec<String>) -> Self {
        Self { version: 1, rules: vec![FixtureRule { patterns: Vec::new(), responses }] }
    }
}

/// Offline backend: the first rule whose patterns all occur in the prompt
/// supplies the candidates, and a stable hash of (seed, prompt) picks one.
pub struct MockChat {
    table: FixtureTable,
    seed: u64,
}

impl MockChat {
    pub fn new(table: FixtureTable, seed: u64) -> Self {
        Self { table, seed }
    }
}

impl ChatBackend for MockChat {
    fn complete(&self, prompt: &str) -> Result<String, GenError> {
        let rule = self
            .table
            .rules
            .iter()
            .find(|r| r.matches(prompt))
            .ok_or_else(|| GenError::Response("no mock fixture matches the prompt".into()))?;
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(prompt.as_bytes());
        let idx = (fnv1a64(&bytes) % rule.responses.len() as u64) as usize;
        Ok(rule.responses[idx].clone())
    }

    fn backend_id(&self) -> String {
        format!("mock:v{}:seed{}", self.table.version, self.seed)
    }
}

pub fn backend_from_config(cfg: &GenBackendConfig) -> Result<Box<dyn ChatBackend>, GenError> {
    match cfg.kind {
        GenBackendKind::Remote => Ok(Box::new(RemoteChat::new(cfg)?)),
        GenBackendKind::Mock => {
            let table = match &cfg.fixtures_path {
                Some(p) => FixtureTable::load(p)?,
                None => FixtureTable::bundled(),
            };
            Ok(Box::new(MockChat::new(table, cfg.seed)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_patterns_must_all_match() {
        let table = FixtureTable::from_json(
            r#"{"version": 1, "rules": [
                {"match": ["alpha", "beta"], "responses": ["both"]},
                {"match": "alpha", "responses": ["one"]},
                {"match": "", "responses": ["fallback"]}
            ]}"#,
        )
        .unwrap();
        let mock = MockChat::new(table, 0);
        assert_eq!(mock.complete("beta then alpha").unwrap(), "both");
        assert_eq!(mock.complete("alpha only").unwrap(), "one");
        assert_eq!(mock.complete("neither").unwrap(), "fallback");
    }

    #[test]
    fn class_one_passages_get_the_reference_pairs() {
        let mock = MockChat::new(FixtureTable::bundled(), 99);
        let reply = mock
            .complete("QUESTION-ANSWER GENERATION\nSection: Station Electrical Systems > Class I Power\n")
            .unwrap();
        assert!(reply.contains("Why are Class I power sources essential in a CANDU NPP?"));
    }
}
