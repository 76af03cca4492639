//! Scripted and recorded backends.
//!
//! A transcript is a JSON array of `{template_id, bindings_hash,
//! response_text}` entries. Lookup tries, in order: an exact
//! `(template_id, bindings_hash)` match; entries with `bindings_hash = "*"`
//! whose optional `when_contains` text occurs in the rendered prompt, in file
//! order; then a bare `"*"` entry for the template.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CompletionBackend, GatewayError, PromptRequest, TemplateId};

pub const ANY_BINDINGS: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template_id: TemplateId,
    pub bindings_hash: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_contains: Option<String>,
}

impl TranscriptEntry {
    pub fn exact(request: &PromptRequest, response_text: impl Into<String>) -> Self {
        Self {
            template_id: request.template_id,
            bindings_hash: request.bindings_hash(),
            response_text: response_text.into(),
            when_contains: None,
        }
    }

    pub fn any(template_id: TemplateId, response_text: impl Into<String>) -> Self {
        Self {
            template_id,
            bindings_hash: ANY_BINDINGS.to_owned(),
            response_text: response_text.into(),
            when_contains: None,
        }
    }

    pub fn when_contains(mut self, needle: impl Into<String>) -> Self {
        self.when_contains = Some(needle.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedMock {
    entries: Vec<TranscriptEntry>,
}

impl ScriptedMock {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self { entries }
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text).map(Self::new)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::NotConfigured(format!("mock transcript {}: {e}", path.display())))?;
        Self::parse(&text)
            .map_err(|e| GatewayError::NotConfigured(format!("mock transcript {}: {e}", path.display())))
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn lookup(&self, request: &PromptRequest, prompt: &str) -> Option<&TranscriptEntry> {
        let id = request.template_id;
        let hash = request.bindings_hash();
        let for_template = || self.entries.iter().filter(move |e| e.template_id == id);
        for_template()
            .find(|e| e.bindings_hash == hash)
            .or_else(|| {
                for_template().find(|e| {
                    e.bindings_hash == ANY_BINDINGS
                        && e.when_contains.as_deref().is_some_and(|n| prompt.contains(n))
                })
            })
            .or_else(|| for_template().find(|e| e.bindings_hash == ANY_BINDINGS && e.when_contains.is_none()))
    }
}

impl CompletionBackend for ScriptedMock {
    fn complete(&self, request: &PromptRequest, prompt: &str) -> Result<String, GatewayError> {
        self.lookup(request, prompt)
            .map(|e| e.response_text.clone())
            .ok_or_else(|| GatewayError::NoScriptedResponse {
                template_id: request.template_id,
                bindings_hash: request.bindings_hash(),
            })
    }
}

/// A backend that is never reachable; sessions run on their pool rules alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct Offline;

impl CompletionBackend for Offline {
    fn complete(&self, _request: &PromptRequest, _prompt: &str) -> Result<String, GatewayError> {
        Err(GatewayError::Unavailable)
    }
}

/// Wraps a backend and keeps every successful exchange as a transcript entry.
pub struct Recorder<B> {
    inner: B,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl<B: CompletionBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("recorder lock poisoned").clone()
    }
}

impl<B: CompletionBackend> CompletionBackend for Recorder<B> {
    fn complete(&self, request: &PromptRequest, prompt: &str) -> Result<String, GatewayError> {
        let text = self.inner.complete(request, prompt)?;
        self.entries
            .lock()
            .expect("recorder lock poisoned")
            .push(TranscriptEntry::exact(request, text.clone()));
        Ok(text)
    }
}
