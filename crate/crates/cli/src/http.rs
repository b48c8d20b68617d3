//! Blocking HTTP transport for the provider-neutral chat contract.
//!
//! Wire shapes come from the core chat module; this file only moves bytes.
//! The bearer credential is read from an environment variable named in the
//! run configuration and never appears in logs, traces, or `Debug` output.

use std::fmt;
use std::time::Duration;

use ureq::Agent;
use vgi_align_core::chat::{
    ChatClient, ChatError, ChatRequest, ChatResponse, WireError, WireRequest, WireResponse,
};

pub struct HttpChatClient {
    agent: Agent,
    url: String,
    model: String,
    credential: String,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, credential: String) -> Self {
        let agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .new_agent();
        HttpChatClient {
            agent,
            url: url.into(),
            model: model.into(),
            credential,
        }
    }

    /// Read the credential from the named environment variable.
    pub fn from_env(
        url: impl Into<String>,
        model: impl Into<String>,
        credential_env: &str,
    ) -> Result<Self, ChatError> {
        let credential = std::env::var(credential_env)
            .map_err(|_| ChatError::MissingCredential(credential_env.to_string()))?;
        Ok(HttpChatClient::new(url, model, credential))
    }
}

impl fmt::Debug for HttpChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatClient")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("credential", &"<redacted>")
            .finish()
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        request.validate()?;
        let wire = WireRequest::from_request(request, &self.model);
        let mut response = self
            .agent
            .post(&self.url)
            .header("Authorization", format!("Bearer {}", self.credential))
            .send_json(&wire)
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        if (200..300).contains(&status) {
            let body: WireResponse = serde_json::from_str(&text).map_err(|e| {
                ChatError::Service {
                    status,
                    message: format!("malformed response body: {e}"),
                }
            })?;
            Ok(ChatResponse { text: body.text })
        } else {
            let message = serde_json::from_str::<WireError>(&text)
                .map(|w| w.error)
                .unwrap_or(text);
            Err(ChatError::Service { status, message })
        }
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}
