//! Blocking JSON POST with bounded retry, shared by the chat and embedding
//! remote backends.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;
use tracing::warn;

static REQUESTS_SENT: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests issued by remote backends in this process.
pub fn requests_sent() -> u64 {
    REQUESTS_SENT.load(Ordering::SeqCst)
}

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("response is not valid JSON: {0}")]
    Decode(String),
}

impl HttpError {
    fn retryable(&self) -> bool {
        match self {
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Timeout | HttpError::Transport(_) => true,
            HttpError::MissingApiKey(_) | HttpError::Decode(_) => false,
        }
    }
}

/// Look up the API key in the named environment variable.
pub fn api_key_from_env(var: &str) -> Result<String, HttpError> {
    match std::env::var(var) {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(HttpError::MissingApiKey(var.to_string())),
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

pub struct JsonClient {
    client: reqwest::blocking::Client,
    api_key: String,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(api_key: String, timeout: Duration, retry: RetryPolicy) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        Ok(Self { client, api_key, retry })
    }

    /// POST `body` to `url`; retries on 429, 5xx, timeouts and transport
    /// failures up to `max_retries` extra attempts.
    pub fn post(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        let mut attempt = 0;
        loop {
            match self.post_once(url, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < self.retry.max_retries => {
                    attempt += 1;
                    warn!(attempt, error = %e, "retrying request");
                    if !self.retry.backoff.is_zero() {
                        std::thread::sleep(self.retry.backoff * 2u32.pow(attempt - 1));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        REQUESTS_SENT.fetch_add(1, Ordering::SeqCst);
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    HttpError::Timeout
                } else {
                    HttpError::Transport(e.to_string())
                }
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                HttpError::Timeout
            } else {
                HttpError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(HttpError::Status { status: status.as_u16(), body: truncate(&text, 500) });
        }
        serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()))
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
