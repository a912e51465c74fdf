//! HTTP backends speaking the standard chat-completions and embeddings
//! JSON shapes. Credentials come from an environment variable whose name is
//! declared in the run config, never from the config file itself.

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

use super::{ChatBackend, ChatRequest, EmbedBackend, EmbedRequest};

/// Endpoint settings shared by both backend kinds.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the credential.
    pub credential_env: Option<String>,
    pub timeout_secs: u64,
}

impl HttpBackendConfig {
    fn credential(&self) -> Result<Option<String>> {
        match &self.credential_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                Error::Config(format!("credential environment variable {var} is not set"))
            }),
        }
    }
}

/// Chat-completions backend: messages array in, first choice text out.
pub struct HttpChat {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    name: String,
}

impl HttpChat {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let name = format!("http-chat:{}", config.model);
        Ok(HttpChat {
            config,
            client,
            name,
        })
    }
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl ChatBackend for HttpChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.prompt}));
        let body = json!({
            "model": if req.model.is_empty() { &self.config.model } else { &req.model },
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(credential) = self.config.credential()? {
            request = request.bearer_auth(credential);
        }
        let response = request
            .send()
            .map_err(|e| Error::BadReply(format!("transport: {e}")))?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::BadReply(format!("http status {status}")));
        }
        let reply: ChatCompletionReply = response
            .json()
            .map_err(|e| Error::BadReply(format!("reply not parseable: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::BadReply("chat reply has no choices".into()))
    }
}

/// Embeddings backend: `{model, input: [...]}` in,
/// `{data: [{embedding: [...]}]}` out.
pub struct HttpEmbed {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    name: String,
}

impl HttpEmbed {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let name = format!("http-embed:{}", config.model);
        Ok(HttpEmbed {
            config,
            client,
            name,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbedBackend for HttpEmbed {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f64>>> {
        let body = json!({
            "model": if req.model.is_empty() { &self.config.model } else { &req.model },
            "input": req.texts,
        });
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(credential) = self.config.credential()? {
            request = request.bearer_auth(credential);
        }
        let response = request
            .send()
            .map_err(|e| Error::BadReply(format!("transport: {e}")))?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::BadReply(format!("http status {status}")));
        }
        let reply: EmbeddingReply = response
            .json()
            .map_err(|e| Error::BadReply(format!("reply not parseable: {e}")))?;
        Ok(reply.data.into_iter().map(|d| d.embedding).collect())
    }
}
