//! An OpenAI-compatible chat-completions provider.

use std::time::Duration;

use serde_json::{json, Value};

use super::{CompletionBackend, GatewayError, PromptRequest};

pub const ENV_ENDPOINT: &str = "RULEPRESS_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "RULEPRESS_LLM_API_KEY";
pub const ENV_MODEL: &str = "RULEPRESS_LLM_MODEL";
pub const ENV_TIMEOUT_SECS: &str = "RULEPRESS_LLM_TIMEOUT_SECS";
pub const ENV_RATE_PER_MINUTE: &str = "RULEPRESS_LLM_RATE_PER_MINUTE";
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub rate_per_minute: Option<u32>,
}

impl ProviderConfig {
    /// Reads the `RULEPRESS_LLM_*` variables. The endpoint and model are
    /// required.
    pub fn from_env() -> Result<Self, GatewayError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, GatewayError> {
        let required = |k: &str| {
            get(k)
                .filter(|v| !v.trim().is_empty())
                .ok_or_else(|| GatewayError::NotConfigured(format!("{k} is not set")))
        };
        let parse_num = |k: &str| -> Result<Option<u64>, GatewayError> {
            get(k)
                .map(|v| {
                    v.trim().parse::<u64>().map_err(|_| {
                        GatewayError::NotConfigured(format!("{k} must be a whole number, got `{v}`"))
                    })
                })
                .transpose()
        };
        Ok(Self {
            endpoint: required(ENV_ENDPOINT)?,
            api_key: get(ENV_API_KEY).filter(|v| !v.is_empty()),
            model: required(ENV_MODEL)?,
            timeout: Duration::from_secs(parse_num(ENV_TIMEOUT_SECS)?.unwrap_or(DEFAULT_TIMEOUT_SECS)),
            rate_per_minute: parse_num(ENV_RATE_PER_MINUTE)?.map(|n| n.min(u64::from(u32::MAX)) as u32),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::NotConfigured(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }
}

fn classify_status(status: u16, body: String) -> GatewayError {
    match status {
        401 | 403 => GatewayError::Auth { status },
        429 => GatewayError::RateLimited,
        _ => GatewayError::Http { status, body },
    }
}

impl CompletionBackend for HttpProvider {
    fn complete(&self, request: &PromptRequest, prompt: &str) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut call = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, text));
        }
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Protocol(format!("response is not JSON: {e}")))?;
        doc.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::Protocol("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn env_config() {
        let vars: HashMap<&str, &str> = [
            (ENV_ENDPOINT, "http://localhost:9/v1/chat/completions"),
            (ENV_MODEL, "m"),
            (ENV_TIMEOUT_SECS, "5"),
        ]
        .into();
        let cfg = ProviderConfig::from_lookup(|k| vars.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.timeout, Duration::from_secs(5));
        assert_eq!(cfg.api_key, None);
        let err = ProviderConfig::from_lookup(|_| None).unwrap_err();
        assert!(err.to_string().contains(ENV_ENDPOINT));
        let bad = ProviderConfig::from_lookup(|k| match k {
            ENV_TIMEOUT_SECS => Some("soon".into()),
            _ => Some("x".into()),
        });
        assert!(bad.is_err());
    }

    #[test]
    fn status_classes() {
        assert!(matches!(
            classify_status(401, String::new()),
            GatewayError::Auth { status: 401 }
        ));
        assert!(matches!(
            classify_status(429, String::new()),
            GatewayError::RateLimited
        ));
        assert!(classify_status(503, String::new()).is_transient());
        assert!(!classify_status(400, String::new()).is_transient());
    }
}
