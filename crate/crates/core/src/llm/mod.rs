//! Model gateway: prompt rendering, provider dispatch with transport
//! retries, and structured extraction of replies.

pub mod extract;
pub mod http;
pub mod scripted;
pub mod templates;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{
    extract_code_block, extract_structured, ExpectedKey, ExtractionError, ExtractionSchema, FieldType,
    StructuredExtraction,
};
pub use templates::{bindings, render, render_prompt, Bindings, RenderedPrompt, TemplateError, TemplateId};

/// Transport-level retries after the first attempt.
pub const TRANSPORT_RETRIES: u32 = 3;

/// Correction attempts each model in the hierarchy gets.
pub const RETRIES_PER_MODEL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Worker,
    Referee,
    Interface,
    Scorer,
    ErrorKeyworder,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelRef {
    pub provider_id: String,
    pub model_id: String,
    pub role: ModelRole,
}

impl ModelRef {
    pub fn new(provider_id: impl Into<String>, model_id: impl Into<String>, role: ModelRole) -> Self {
        ModelRef {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            role,
        }
    }

    pub fn worker(provider_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        ModelRef::new(provider_id, model_id, ModelRole::Worker)
    }
}

impl fmt::Display for ModelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.provider_id, self.model_id)
    }
}

/// Ordered list of models tried during error correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHierarchy {
    pub models: Vec<ModelRef>,
    pub retries_per_model: u32,
}

impl ModelHierarchy {
    pub fn new(models: Vec<ModelRef>) -> Self {
        ModelHierarchy {
            models,
            retries_per_model: RETRIES_PER_MODEL,
        }
    }

    /// The three-tier hierarchy used by the scripted configuration.
    pub fn scripted_default() -> Self {
        ModelHierarchy::new(vec![
            ModelRef::worker("scripted", "model-1"),
            ModelRef::worker("scripted", "model-2"),
            ModelRef::new("scripted", "referee", ModelRole::Referee),
        ])
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Total correction budget across every model.
    pub fn total_budget(&self) -> u32 {
        self.retries_per_model * self.models.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl DecodingParams {
    pub fn for_template(id: TemplateId) -> Self {
        DecodingParams {
            temperature: id.default_temperature(),
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub template_id: TemplateId,
    pub bindings: Bindings,
    pub system: String,
    pub user: String,
    pub decoding: DecodingParams,
}

impl PromptRequest {
    pub fn from_rendered(r: RenderedPrompt) -> Self {
        PromptRequest {
            template_id: r.template_id,
            decoding: DecodingParams::for_template(r.template_id),
            bindings: r.bindings,
            system: r.system,
            user: r.user,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("authentication failed for provider `{0}`")]
    Auth(String),
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("no scripted response for `{0}`")]
    NoScriptedResponse(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            ProviderError::RateLimited | ProviderError::Timeout | ProviderError::Transport(_)
        )
    }
}

/// Backend that turns one prompt into one completion.
pub trait ChatProvider: Send + Sync {
    fn chat(&self, model: &ModelRef, request: &PromptRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("transport failed after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: ProviderError },
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One completed call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_prompt: String,
    pub user_prompt: String,
    pub response_text: String,
    pub token_usage: Option<TokenUsage>,
    pub latency: Duration,
    pub transport_attempts: u32,
}

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    backoff: Duration,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("backoff", &self.backoff).finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Gateway {
            provider,
            backoff: Duration::from_millis(500),
        }
    }

    /// Base delay between transport retries; doubles each retry.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn complete(&self, model: &ModelRef, request: &PromptRequest) -> Result<ChatExchange, GatewayError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            match self.provider.chat(model, request) {
                Ok(text) => {
                    return Ok(ChatExchange {
                        system_prompt: request.system.clone(),
                        user_prompt: request.user.clone(),
                        response_text: text,
                        token_usage: None,
                        latency: started.elapsed(),
                        transport_attempts: attempt,
                    })
                }
                Err(e) if e.is_retriable() => {
                    if attempt > TRANSPORT_RETRIES {
                        return Err(GatewayError::TransportExhausted { attempts: attempt, last: e });
                    }
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    delay *= 2;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Renders `template` and sends it.
    pub fn prompt(&self, model: &ModelRef, template: TemplateId, b: &Bindings) -> Result<String, GatewayError> {
        let request = PromptRequest::from_rendered(render(template, b)?);
        Ok(self.complete(model, &request)?.response_text)
    }

    /// Sends an extraction template and validates the reply against `schema`.
    /// A reply that fails validation is re-asked once.
    pub fn extract(
        &self,
        model: &ModelRef,
        template: TemplateId,
        b: &Bindings,
        schema: &ExtractionSchema,
    ) -> Result<StructuredExtraction, GatewayError> {
        let request = PromptRequest::from_rendered(render(template, b)?);
        let first = self.complete(model, &request)?.response_text;
        match extract_structured(&first, schema) {
            Ok(x) => Ok(x),
            Err(_) => {
                let second = self.complete(model, &request)?.response_text;
                Ok(extract_structured(&second, schema)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Flaky {
        errors: Mutex<Vec<ProviderError>>,
        calls: Mutex<u32>,
    }

    impl ChatProvider for Flaky {
        fn chat(&self, _: &ModelRef, _: &PromptRequest) -> Result<String, ProviderError> {
            *self.calls.lock().unwrap() += 1;
            match self.errors.lock().unwrap().pop() {
                Some(e) => Err(e),
                None => Ok("ok".into()),
            }
        }
    }

    fn gateway(errors: Vec<ProviderError>) -> (Gateway, Arc<Flaky>) {
        let p = Arc::new(Flaky {
            errors: Mutex::new(errors),
            calls: Mutex::new(0),
        });
        (Gateway::new(p.clone()).with_backoff(Duration::ZERO), p)
    }

    fn req() -> PromptRequest {
        PromptRequest::from_rendered(render(TemplateId::ErrorKeywords, &bindings([("error", "x")])).unwrap())
    }

    #[test]
    fn three_transport_failures_then_success() {
        let (g, p) = gateway(vec![ProviderError::Timeout; 3]);
        let x = g.complete(&ModelRef::worker("a", "b"), &req()).unwrap();
        assert_eq!((x.response_text.as_str(), x.transport_attempts), ("ok", 4));
        assert_eq!(*p.calls.lock().unwrap(), 4);
    }

    #[test]
    fn four_transport_failures_exhaust() {
        let (g, p) = gateway(vec![ProviderError::RateLimited; 4]);
        let err = g.complete(&ModelRef::worker("a", "b"), &req()).unwrap_err();
        assert!(matches!(err, GatewayError::TransportExhausted { attempts: 4, .. }));
        assert_eq!(*p.calls.lock().unwrap(), 4);
    }

    #[test]
    fn auth_error_is_not_retried() {
        let (g, p) = gateway(vec![ProviderError::Auth("x".into())]);
        assert!(g.complete(&ModelRef::worker("a", "b"), &req()).is_err());
        assert_eq!(*p.calls.lock().unwrap(), 1);
    }

    #[test]
    fn temperatures_follow_strategy() {
        assert_eq!(DecodingParams::for_template(TemplateId::ConditionExtract).temperature, 0.0);
        assert_eq!(DecodingParams::for_template(TemplateId::ErrorCorrect).temperature, 0.7);
    }
}
