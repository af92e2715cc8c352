//! Blocking HTTP client for OpenAI-style chat completion endpoints.
//!
//! Speaks `POST {base_url}/chat/completions` with the usual request body
//! and tolerates missing optional response fields. Status codes map onto
//! [`ClientError`]: 429 is a rate limit, 5xx is a transient transport
//! failure, other non-success codes fail fast.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatClient, ChatRequest, ChatResponse, ClientError, Role, TokenUsage};

/// Default per-request timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

pub struct HttpChatClient {
    http: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport {
                message: format!("failed to build http client: {e}"),
                transient: false,
            })?;
        let base_url = base_url.into().trim_end_matches('/').to_string();
        Ok(Self { http, base_url, model: model.into(), api_key })
    }

    fn body_for(&self, request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| {
                json!({
                    "role": match m.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    },
                    "content": m.content,
                })
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "repetition_penalty": request.sampling.repetition_penalty,
            "max_tokens": request.sampling.max_tokens,
            "n": request.n_samples,
        });
        if let Some(top_k) = request.sampling.top_k {
            body["top_k"] = json!(top_k);
        }
        body
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut call = self.http.post(&url).json(&self.body_for(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| ClientError::Transport {
            // connect/timeout failures are worth retrying, request-build bugs are not
            message: format!("request to {url} failed: {e}"),
            transient: e.is_timeout() || e.is_connect() || e.is_request(),
        })?;

        let status = response.status();
        if status.as_u16() == 429 {
            return Err(ClientError::RateLimited {
                message: format!("{url} returned 429"),
            });
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(ClientError::Transport {
                message: format!("{url} returned {status}: {}", truncate(&body, 300)),
                transient: status.is_server_error(),
            });
        }

        let text = response.text().map_err(|e| ClientError::Transport {
            message: format!("failed to read body from {url}: {e}"),
            transient: true,
        })?;
        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| ClientError::Malformed {
            message: format!("unparseable completion body: {e}: {}", truncate(&text, 300)),
        })?;
        let completions: Vec<String> = wire
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect();
        if completions.is_empty() {
            return Err(ClientError::Malformed {
                message: "completion body has no choices".into(),
            });
        }
        Ok(ChatResponse {
            completions,
            model_id: wire.model.unwrap_or_else(|| self.model.clone()),
            usage: wire.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Message, SamplingParams};

    #[test]
    fn body_carries_sampling_and_optional_top_k() {
        let client =
            HttpChatClient::new("http://localhost:9", "test-model", None, DEFAULT_TIMEOUT).unwrap();
        let req = ChatRequest::new(
            vec![Message::system("be brief"), Message::user("hi")],
            SamplingParams::scoring(),
            3,
        )
        .unwrap();
        let body = client.body_for(&req);
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["messages"].as_array().unwrap().len(), 2);
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_k"], 1);
        assert_eq!(body["n"], 3);
        assert_eq!(body["max_tokens"], 512);

        let sampled = ChatRequest::new(vec![Message::user("hi")], SamplingParams::synthesis(), 5).unwrap();
        let body = client.body_for(&sampled);
        assert!(body.get("top_k").is_none());
        assert_eq!(body["repetition_penalty"], 1.05);
    }

    #[test]
    fn trailing_slash_in_base_url_is_tolerated() {
        let client =
            HttpChatClient::new("http://localhost:9/", "m", None, DEFAULT_TIMEOUT).unwrap();
        assert_eq!(client.base_url, "http://localhost:9");
    }

    #[test]
    fn wire_response_tolerates_missing_optionals() {
        let wire: WireResponse =
            serde_json::from_str(r#"{"choices":[{"message":{"content":"hello"}}]}"#).unwrap();
        assert_eq!(wire.choices.len(), 1);
        assert!(wire.model.is_none());
        assert!(wire.usage.is_none());
    }
}
