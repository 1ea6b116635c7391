//! Policy that replays a fixed list of responses, for fixtures and tests.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::policy::{PolicyAdapter, PolicyConfig, PolicyError, PolicyRequest};

/// Returns the scripted responses in order; once exhausted the last one is
/// repeated.
pub struct ReplayPolicy {
    name: String,
    config: PolicyConfig,
    responses: Vec<Result<String, PolicyError>>,
    calls: AtomicUsize,
}

impl ReplayPolicy {
    pub fn new(name: impl Into<String>, responses: Vec<Result<String, PolicyError>>) -> Self {
        assert!(!responses.is_empty(), "replay policy needs at least one response");
        Self { name: name.into(), config: PolicyConfig::default(), responses, calls: AtomicUsize::new(0) }
    }

    pub fn from_texts(name: impl Into<String>, texts: impl IntoIterator<Item = String>) -> Self {
        Self::new(name, texts.into_iter().map(Ok).collect())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl PolicyAdapter for ReplayPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn invoke(&self, _request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses[i.min(self.responses.len() - 1)].clone()
    }
}
