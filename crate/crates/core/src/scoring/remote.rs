//! HTTP client for an embedding service.
//!
//! Protocol:
//! - `GET  {base}/v1/models` returns `[{"id", "dim", "input_resolution"}]`
//! - `POST {base}/v1/embed` with `{"kind", "items", "model"}` returns
//!   `{"embeddings", "dim", "model"}`. Image items are base64 PNG.

use std::thread;
use std::time::Duration;

use base64::Engine;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingKind, ScorerBackend};
use crate::error::{Error, Result};
use crate::imgcore::{encode_png, ImageBuffer};

/// Largest batch the service accepts in one request.
pub const MAX_ITEMS_PER_REQUEST: usize = 256;
const EXCERPT_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub dim: usize,
    #[serde(default)]
    pub input_resolution: Option<u32>,
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    kind: EmbeddingKind,
    items: &'a [String],
    model: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
    dim: usize,
    model: String,
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on every further retry.
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub batch_size: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
            batch_size: super::DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: Client,
    base: String,
    model: ModelInfo,
    options: RemoteOptions,
}

/// Connects to the service and checks that `model` is advertised.
pub fn remote_backend(endpoint: &str, model: &str) -> Result<RemoteBackend> {
    RemoteBackend::connect(endpoint, model, RemoteOptions::default())
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl RemoteBackend {
    pub fn connect(endpoint: &str, model: &str, options: RemoteOptions) -> Result<Self> {
        let client = Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let base = endpoint.trim_end_matches('/').to_string();
        let mut backend = RemoteBackend {
            client,
            base,
            model: ModelInfo {
                id: model.to_string(),
                dim: 0,
                input_resolution: None,
            },
            options,
        };
        let models = backend.models()?;
        backend.model = models
            .into_iter()
            .find(|m| m.id == model)
            .ok_or_else(|| Error::Protocol {
                message: format!("model {model:?} is not advertised by {}", backend.base),
                excerpt: String::new(),
            })?;
        if backend.model.dim == 0 {
            return Err(Error::Protocol {
                message: format!("model {model:?} advertises dim 0"),
                excerpt: String::new(),
            });
        }
        Ok(backend)
    }

    pub fn model(&self) -> &ModelInfo {
        &self.model
    }

    pub fn models(&self) -> Result<Vec<ModelInfo>> {
        let url = format!("{}/v1/models", self.base);
        let body = self.with_retries(|| self.client.get(&url).send())?;
        serde_json::from_str(&body).map_err(|e| Error::Protocol {
            message: format!("bad /v1/models response: {e}"),
            excerpt: excerpt(&body),
        })
    }

    /// Runs `send` until it yields a success body, retrying connection
    /// failures, timeouts, 429 and 5xx with exponential backoff. Other
    /// statuses are protocol errors and are not retried.
    fn with_retries(&self, send: impl Fn() -> reqwest::Result<Response>) -> Result<String> {
        let attempts = self.options.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u32 << (attempt - 1).min(16);
                thread::sleep(self.options.initial_backoff * factor);
            }
            match self.try_once(&send)? {
                Attempt::Done(body) => return Ok(body),
                Attempt::Retry(reason) => {
                    log::warn!("attempt {} of {attempts} failed: {reason}", attempt + 1);
                    last = reason;
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn try_once(&self, send: &impl Fn() -> reqwest::Result<Response>) -> Result<Attempt<String>> {
        let response = match send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        if status.is_success() {
            Ok(Attempt::Done(body))
        } else if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            Ok(Attempt::Retry(format!("HTTP {status}: {}", excerpt(&body))))
        } else {
            Err(Error::Protocol {
                message: format!("HTTP {status}"),
                excerpt: excerpt(&body),
            })
        }
    }

    fn embed_items(&self, kind: EmbeddingKind, items: &[String]) -> Result<Vec<Embedding>> {
        let url = format!("{}/v1/embed", self.base);
        let batch = self.options.batch_size.clamp(1, MAX_ITEMS_PER_REQUEST);
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(batch) {
            let request = EmbedRequest {
                kind,
                items: chunk,
                model: &self.model.id,
            };
            let body = self.with_retries(|| self.client.post(&url).json(&request).send())?;
            let protocol = |message: String| Error::Protocol {
                message,
                excerpt: excerpt(&body),
            };
            let resp: EmbedResponse = serde_json::from_str(&body)
                .map_err(|e| protocol(format!("bad /v1/embed response: {e}")))?;
            if resp.model != self.model.id {
                return Err(protocol(format!(
                    "response is for model {:?}, requested {:?}",
                    resp.model, self.model.id
                )));
            }
            if resp.embeddings.len() != chunk.len() {
                return Err(protocol(format!(
                    "{} embeddings returned for {} items",
                    resp.embeddings.len(),
                    chunk.len()
                )));
            }
            if resp.dim != self.model.dim {
                return Err(protocol(format!(
                    "response dim {} differs from advertised dim {}",
                    resp.dim, self.model.dim
                )));
            }
            for v in resp.embeddings {
                if v.len() != self.model.dim {
                    return Err(protocol(format!(
                        "embedding of length {} but advertised dim {}",
                        v.len(),
                        self.model.dim
                    )));
                }
                out.push(Embedding::normalized(v).map_err(|e| protocol(e.to_string()))?);
            }
        }
        Ok(out)
    }
}

impl ScorerBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.model.id
    }

    fn dim(&self) -> usize {
        self.model.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        self.embed_items(EmbeddingKind::Text, texts)
    }

    fn embed_images(&self, images: &[ImageBuffer]) -> Result<Vec<Embedding>> {
        let engine = base64::engine::general_purpose::STANDARD;
        let items: Vec<String> = images.iter().map(|i| engine.encode(encode_png(i))).collect();
        self.embed_items(EmbeddingKind::Image, &items)
    }
}
