//! OpenAI-compatible chat-completions provider.

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatProvider, ModelRef, PromptRequest, ProviderError};

/// Environment variable holding the API key for `provider`, e.g.
/// `GENIUS_API_KEY_OPENAI`.
pub fn api_key_var(provider: &str) -> String {
    let suffix: String = provider
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("GENIUS_API_KEY_{suffix}")
}

pub fn api_key(provider: &str) -> Option<String> {
    std::env::var(api_key_var(provider)).ok().filter(|k| !k.is_empty())
}

#[derive(Debug)]
pub struct HttpProvider {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(HttpProvider {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }
}

fn map_status(provider: &str, status: u16, body: String) -> ProviderError {
    match status {
        401 | 403 => ProviderError::Auth(provider.to_string()),
        429 => ProviderError::RateLimited,
        500..=599 => ProviderError::Transport(format!("HTTP {status}")),
        _ => ProviderError::Provider(format!("HTTP {status}: {body}")),
    }
}

impl ChatProvider for HttpProvider {
    fn chat(&self, model: &ModelRef, request: &PromptRequest) -> Result<String, ProviderError> {
        let key = api_key(&model.provider_id).ok_or_else(|| ProviderError::Auth(model.provider_id.clone()))?;
        let body = json!({
            "model": model.model_id,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout
                } else {
                    ProviderError::Transport(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        if !resp.status().is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(map_status(&model.provider_id, status, text));
        }
        let v: Value = resp.json().map_err(|e| ProviderError::Provider(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Provider("response has no message content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_variable_names() {
        assert_eq!(api_key_var("openai"), "GENIUS_API_KEY_OPENAI");
        assert_eq!(api_key_var("my-host.ai"), "GENIUS_API_KEY_MY_HOST_AI");
    }

    #[test]
    fn status_mapping() {
        assert_eq!(map_status("p", 401, String::new()), ProviderError::Auth("p".into()));
        assert_eq!(map_status("p", 429, String::new()), ProviderError::RateLimited);
        assert!(map_status("p", 503, String::new()).is_retriable());
        assert!(!map_status("p", 400, "bad".into()).is_retriable());
    }
}
