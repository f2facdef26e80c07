//! Chat-completion interface shared by every LLM job.

mod parse;
mod prompt;
mod providers;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use parse::{parse_structured, ParseError, ParseStage, Payload};
pub use prompt::{PromptInputs, PromptSet, Template, BUILTIN_PROMPT_VERSION};
pub(crate) use providers::classify_http_error;
pub use providers::{
    fixture_key, CountingLlm, HttpChatLlm, MockLlm, RecordingLlm, RuleBasedLlm,
};

use crate::clock::{retry, Clock, RetryPolicy};
pub use crate::error::{FailureKind, ProviderError};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobKind {
    Keywords,
    ClaimExtract,
    TopicLabel,
    RelationGen,
}

impl JobKind {
    pub fn tag(self) -> &'static str {
        match self {
            JobKind::Keywords => "keywords",
            JobKind::ClaimExtract => "claim_extract",
            JobKind::TopicLabel => "topic_label",
            JobKind::RelationGen => "relation_gen",
        }
    }

    pub fn required_inputs(self) -> &'static [&'static str] {
        match self {
            JobKind::Keywords => &["topic", "description", "heavy_n", "lesser_n", "exclude"],
            JobKind::ClaimExtract => &["post"],
            JobKind::TopicLabel => &["post", "candidates", "mode"],
            JobKind::RelationGen => &["claim", "relation_verb", "label"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub kind: JobKind,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
    /// The values the prompt was rendered from. Not sent over the wire.
    #[serde(skip)]
    pub inputs: PromptInputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub raw: String,
    /// Present iff parsing succeeded.
    pub payload: Option<Payload>,
    pub parse_error: Option<ParseError>,
    pub attempts: u32,
    pub latency_ms: u128,
}

/// One transport attempt. Retries live in [`complete`].
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn model(&self) -> &str;
    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        (**self).call(req)
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        (**self).call(req)
    }
}

/// Sends `req` with retries and parses the completion for `req.kind`.
///
/// Transport failures are retried with exponential backoff; authentication
/// and fatal errors are not. A completion that fails to parse is still an
/// `Ok` response with `payload == None`.
pub fn complete(
    req: &LlmRequest,
    provider: &dyn LlmProvider,
    policy: &RetryPolicy,
    clock: &dyn Clock,
) -> Result<LlmResponse> {
    let started = Instant::now();
    let outcome = retry(
        policy,
        clock,
        |e: &ProviderError| e.kind == FailureKind::Transient,
        |_| provider.call(req),
    );
    match outcome {
        Ok(done) => {
            let raw = done.value;
            let (payload, parse_error) = match parse_structured(&raw, req.kind) {
                Ok(p) => (Some(p), None),
                Err(e) => (None, Some(e)),
            };
            Ok(LlmResponse {
                raw,
                payload,
                parse_error,
                attempts: done.attempts,
                latency_ms: started.elapsed().as_millis(),
            })
        }
        Err(failed) => Err(Error::stage(
            "llm",
            format!(
                "{} failed after {} attempt(s): {}",
                provider.name(),
                failed.attempts,
                failed.value
            ),
        )),
    }
}

/// A provider bundled with its prompts, decoding settings and retry policy.
#[derive(Clone)]
pub struct LlmClient {
    pub provider: Arc<dyn LlmProvider>,
    pub prompts: PromptSet,
    pub policy: RetryPolicy,
    pub temperature: f64,
    pub max_tokens: u32,
    pub clock: Arc<dyn Clock>,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn LlmProvider>, clock: Arc<dyn Clock>) -> Self {
        Self {
            provider,
            prompts: PromptSet::builtin(),
            policy: RetryPolicy::default(),
            temperature: 0.0,
            max_tokens: 1024,
            clock,
        }
    }

    pub fn request(&self, kind: JobKind, inputs: PromptInputs) -> Result<LlmRequest> {
        let (system, user) = self.prompts.render(kind, &inputs)?;
        Ok(LlmRequest {
            kind,
            system,
            user,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            model: self.provider.model().to_string(),
            inputs,
        })
    }

    pub fn run(&self, kind: JobKind, inputs: PromptInputs) -> Result<LlmResponse> {
        let req = self.request(kind, inputs)?;
        complete(&req, self.provider.as_ref(), &self.policy, self.clock.as_ref())
    }
}
