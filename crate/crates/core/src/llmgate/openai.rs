//! OpenAI-compatible HTTP client over blocking reqwest.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, CompletionRequest, CompletionResponse, LlmError};

pub const ENV_API_KEY: &str = "ICLNER_API_KEY";
pub const ENV_API_BASE: &str = "ICLNER_API_BASE";
const DEFAULT_BASE: &str = "https://api.openai.com/v1";

/// Endpoint shape: legacy text completions or chat completions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiFlavor {
    #[default]
    Completions,
    Chat,
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub flavor: ApiFlavor,
    pub timeout: Duration,
}

impl OpenAiConfig {
    /// Reads the key from `ICLNER_API_KEY` and the base URL from
    /// `ICLNER_API_BASE` (defaulting to the public OpenAI endpoint).
    pub fn from_env(model: impl Into<String>, flavor: ApiFlavor) -> Result<Self, LlmError> {
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| LlmError::AuthFailure(format!("{ENV_API_KEY} is not set")))?;
        let base_url = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_BASE.to_owned());
        Ok(Self {
            base_url,
            api_key,
            model: model.into(),
            flavor,
            timeout: Duration::from_secs(60),
        })
    }
}

#[derive(Serialize)]
struct CompletionsBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
    best_of: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    text: Option<String>,
    message: Option<ChatReply>,
}

#[derive(Deserialize)]
struct ReplyBody {
    choices: Vec<Choice>,
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let id = format!("openai:{}", config.model);
        Ok(Self { config, client, id })
    }

    fn url(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.config.flavor {
            ApiFlavor::Completions => format!("{base}/completions"),
            ApiFlavor::Chat => format!("{base}/chat/completions"),
        }
    }

    fn body(&self, r: &CompletionRequest) -> serde_json::Value {
        let model = &self.config.model;
        let value = match self.config.flavor {
            ApiFlavor::Completions => serde_json::to_value(CompletionsBody {
                model,
                prompt: &r.prompt,
                max_tokens: r.max_tokens,
                temperature: r.temperature,
                top_p: r.top_p,
                frequency_penalty: r.frequency_penalty,
                presence_penalty: r.presence_penalty,
                best_of: r.best_of,
            }),
            ApiFlavor::Chat => serde_json::to_value(ChatBody {
                model,
                messages: [ChatMessage {
                    role: "user",
                    content: &r.prompt,
                }],
                max_tokens: r.max_tokens,
                temperature: r.temperature,
                top_p: r.top_p,
                frequency_penalty: r.frequency_penalty,
                presence_penalty: r.presence_penalty,
            }),
        };
        value.expect("request body serializes")
    }
}

fn classify(status: u16, body: String) -> LlmError {
    let lower = body.to_lowercase();
    match status {
        401 | 403 => LlmError::AuthFailure(body),
        429 => LlmError::RateLimited,
        408 | 504 => LlmError::Timeout,
        400 | 413 if lower.contains("context_length_exceeded") || lower.contains("maximum context length") => {
            LlmError::ContextOverflow(body)
        }
        _ => LlmError::Http { status, body },
    }
}

impl Backend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        if request.prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let started = Instant::now();
        let reply = self
            .client
            .post(self.url())
            .bearer_auth(&self.config.api_key)
            .json(&self.body(request))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    LlmError::Timeout
                } else {
                    LlmError::Transport(e.to_string())
                }
            })?;
        let status = reply.status().as_u16();
        let text = reply.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify(status, text));
        }
        let body: ReplyBody = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::BadResponse("no choices".into()))?;
        let text = choice
            .text
            .or_else(|| choice.message.and_then(|m| m.content))
            .ok_or_else(|| LlmError::BadResponse("choice has no text".into()))?;
        Ok(CompletionResponse {
            text,
            backend_id: self.id.clone(),
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
