//! The boundary to the model that writes rules.
//!
//! [`LlmGateway`] renders one of the four prompt templates, sends it through a
//! [`CompletionBackend`] (HTTP provider, scripted mock or offline), retries a
//! transient failure once, and parses the answer, asking once more if the
//! answer is unusable.

mod http;
mod limiter;
mod mock;
mod parse;
mod prompt;

use std::sync::Arc;

pub use http::{
    HttpProvider, ProviderConfig, DEFAULT_TIMEOUT_SECS, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL,
    ENV_RATE_PER_MINUTE, ENV_TIMEOUT_SECS,
};
pub use limiter::RateLimiter;
pub use mock::{Offline, Recorder, ScriptedMock, TranscriptEntry, ANY_BINDINGS};
pub use parse::{extract_json_object, parse_proposal, parse_single_rule, ParsedProposal, RuleProposal};
pub use prompt::{
    render_prompt, PromptRequest, TemplateId, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, OUTPUT_HEAD_CHARS,
    OUTPUT_TAIL_CHARS, REPAIR_BINDING, SNIPPET_CHARS, TERMINAL_STATE_CHARS,
};

use crate::rule::CompressionRule;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("template {template_id} needs a value for `{{{placeholder}}}`")]
    MissingBinding {
        template_id: TemplateId,
        placeholder: String,
    },
    #[error("proposal_with_cache needs at least one cached rule; use proposal_no_cache")]
    EmptyCache,
    #[error("request timed out")]
    Timeout,
    #[error("provider rejected the credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("provider rate limit reached")]
    RateLimited,
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unexpected provider response: {0}")]
    Protocol(String),
    #[error("unusable response: {message}")]
    Parse { message: String, raw: String },
    #[error("mock transcript has no response for {template_id} with bindings {bindings_hash}")]
    NoScriptedResponse {
        template_id: TemplateId,
        bindings_hash: String,
    },
    #[error("no rule-generation model is available")]
    Unavailable,
    #[error("gateway is not configured: {0}")]
    NotConfigured(String),
}

impl GatewayError {
    /// Worth one more try.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Something that turns a rendered prompt into response text.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &PromptRequest, prompt: &str) -> Result<String, GatewayError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Arc<B> {
    fn complete(&self, request: &PromptRequest, prompt: &str) -> Result<String, GatewayError> {
        (**self).complete(request, prompt)
    }
}

#[derive(Clone)]
pub struct LlmGateway {
    backend: Arc<dyn CompletionBackend>,
    limiter: Option<Arc<RateLimiter>>,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway")
            .field("rate_limited", &self.limiter.is_some())
            .finish_non_exhaustive()
    }
}

impl LlmGateway {
    pub fn new(backend: impl CompletionBackend + 'static) -> Self {
        Self {
            backend: Arc::new(backend),
            limiter: None,
        }
    }

    pub fn offline() -> Self {
        Self::new(Offline)
    }

    pub fn mock(mock: ScriptedMock) -> Self {
        Self::new(mock)
    }

    /// An HTTP provider configured from the `RULEPRESS_LLM_*` variables.
    pub fn from_env() -> Result<Self, GatewayError> {
        let config = ProviderConfig::from_env()?;
        let rate = config.rate_per_minute;
        let gateway = Self::new(HttpProvider::new(config)?);
        Ok(match rate {
            Some(n) => gateway.with_rate_limit(RateLimiter::per_minute(n, 1)),
            None => gateway,
        })
    }

    pub fn with_rate_limit(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(Arc::new(limiter));
        self
    }

    /// Sends one request, retrying once after a transient failure.
    pub fn complete(&self, request: &PromptRequest) -> Result<String, GatewayError> {
        let prompt = render_prompt(request)?;
        let mut retried = false;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.backend.complete(request, &prompt) {
                Err(e) if e.is_transient() && !retried => {
                    log::warn!("{} request failed ({e}); retrying once", request.template_id);
                    retried = true;
                }
                other => return other,
            }
        }
    }

    fn with_repair<T>(
        &self,
        request: &PromptRequest,
        parse: impl Fn(&str) -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let text = self.complete(request)?;
        match parse(&text) {
            Err(GatewayError::Parse { message, .. }) => {
                log::warn!(
                    "{} response unusable ({message}); asking again",
                    request.template_id
                );
                parse(&self.complete(&request.repair(&message))?)
            }
            other => other,
        }
    }

    /// Asks for the task-start rule set.
    pub fn propose(&self, request: &PromptRequest) -> Result<ParsedProposal, GatewayError> {
        let mut parsed = self.with_repair(request, parse_proposal)?;
        if request.template_id == TemplateId::ProposalNoCache {
            let proposal = &mut parsed.proposal;
            if !proposal.selected_rule_ids.is_empty() || !proposal.modified_rules.is_empty() {
                parsed
                    .diagnostics
                    .push("cold-start proposal cannot select or modify rules; ignored".into());
                proposal.selected_rule_ids.clear();
                proposal.modified_rules.clear();
            }
        }
        let count = parsed.proposal.rule_count();
        if !(3..=7).contains(&count) {
            log::info!("proposal has {count} rules; 3 to 7 were requested");
        }
        for d in &parsed.diagnostics {
            log::warn!("proposal: {d}");
        }
        Ok(parsed)
    }

    /// Asks for one rule (a new rule or a replacement).
    pub fn spawn_rule(&self, request: &PromptRequest) -> Result<CompressionRule, GatewayError> {
        self.with_repair(request, parse_single_rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    const RULE: &str = r#"{"rule_id": "make_rule", "trigger_regex": "^make\\b", "strip_patterns": ["^CC "]}"#;

    struct Flaky {
        calls: AtomicUsize,
        failures: Vec<fn() -> GatewayError>,
        answer: String,
    }

    impl CompletionBackend for Flaky {
        fn complete(&self, _r: &PromptRequest, _p: &str) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.failures.get(n) {
                Some(f) => Err(f()),
                None => Ok(self.answer.clone()),
            }
        }
    }

    fn flaky(failures: Vec<fn() -> GatewayError>) -> Arc<Flaky> {
        Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            failures,
            answer: RULE.into(),
        })
    }

    fn req() -> PromptRequest {
        PromptRequest::spawn_new("make", "CC a.o\n", "build")
    }

    #[test]
    fn one_retry_on_transient_failure() {
        let backend = flaky(vec![|| GatewayError::Timeout]);
        let gw = LlmGateway::new(backend.clone());
        assert_eq!(gw.spawn_rule(&req()).unwrap().rule_id, "make_rule");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);

        let backend = flaky(vec![|| GatewayError::Timeout, || {
            GatewayError::Transport("reset".into())
        }]);
        let gw = LlmGateway::new(backend.clone());
        assert!(matches!(gw.complete(&req()), Err(GatewayError::Transport(_))));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn auth_is_not_retried() {
        let backend = flaky(vec![|| GatewayError::Auth { status: 401 }]);
        let gw = LlmGateway::new(backend.clone());
        assert!(matches!(
            gw.complete(&req()),
            Err(GatewayError::Auth { status: 401 })
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn parse_failure_gets_one_repair() {
        let first = PromptRequest::spawn_new("make", "CC a.o\n", "build");
        let mock = ScriptedMock::new(vec![
            TranscriptEntry::exact(&first, "Sorry, here is my thinking."),
            TranscriptEntry::any(TemplateId::SpawnNew, RULE).when_contains("could not be used"),
        ]);
        let gw = LlmGateway::mock(mock);
        assert_eq!(gw.spawn_rule(&first).unwrap().rule_id, "make_rule");

        let stubborn = LlmGateway::mock(ScriptedMock::new(vec![TranscriptEntry::any(
            TemplateId::SpawnNew,
            "no",
        )]));
        assert!(matches!(
            stubborn.spawn_rule(&first),
            Err(GatewayError::Parse { .. })
        ));
    }

    #[test]
    fn cold_start_ignores_selection() {
        let answer =
            format!(r#"{{"selected_rule_ids": ["x"], "modified_rules": [], "new_rules": [{RULE}]}}"#);
        let gw = LlmGateway::mock(ScriptedMock::new(vec![TranscriptEntry::any(
            TemplateId::ProposalNoCache,
            answer,
        )]));
        let parsed = gw.propose(&PromptRequest::proposal("i", "c", "", &[])).unwrap();
        assert!(parsed.proposal.selected_rule_ids.is_empty());
        assert_eq!(parsed.proposal.new_rules.len(), 1);
        assert_eq!(parsed.diagnostics.len(), 1);
        assert!(matches!(
            LlmGateway::offline().propose(&PromptRequest::proposal("i", "c", "", &[])),
            Err(GatewayError::Unavailable)
        ));
    }

    fn read_request(stream: &mut std::net::TcpStream) {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
    }

    fn respond(stream: &mut std::net::TcpStream, status: &str, body: &str) {
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
    }

    fn provider(addr: std::net::SocketAddr, timeout: Duration) -> HttpProvider {
        HttpProvider::new(ProviderConfig {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            api_key: Some("k".into()),
            model: "m".into(),
            timeout,
            rate_per_minute: None,
        })
        .unwrap()
    }

    #[test]
    fn http_401_is_auth_without_retry() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            read_request(&mut s);
            respond(&mut s, "401 Unauthorized", "{}");
            listener.set_nonblocking(true).unwrap();
            std::thread::sleep(Duration::from_millis(300));
            listener.accept().is_ok()
        });
        let gw = LlmGateway::new(provider(addr, Duration::from_secs(5)));
        assert!(matches!(
            gw.complete(&req()),
            Err(GatewayError::Auth { status: 401 })
        ));
        assert!(!server.join().unwrap(), "a second request was made");
    }

    #[test]
    fn http_timeout_then_success() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut slow, _) = listener.accept().unwrap();
            read_request(&mut slow);
            let (mut fast, _) = listener.accept().unwrap();
            read_request(&mut fast);
            let content = serde_json::to_string(RULE).unwrap();
            let body =
                format!(r#"{{"choices": [{{"message": {{"role": "assistant", "content": {content}}}}}]}}"#);
            respond(&mut fast, "200 OK", &body);
            drop(slow);
        });
        let gw = LlmGateway::new(provider(addr, Duration::from_millis(400)));
        let rule = gw.spawn_rule(&req()).unwrap();
        assert_eq!(rule.rule_id, "make_rule");
        server.join().unwrap();
    }
}
