//! Client for an embedding service speaking the `/v1/embed` protocol:
//! `POST {endpoint}/v1/embed` with `{"texts": [...]}` returning
//! `{"embeddings": [[...], ...]}`. Lets a real sentence encoder served
//! elsewhere stand in for the built-in hashing backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use hydradoc_core::embed::{EmbedError, EmbeddingBackend};

/// Maximum texts per request; larger batches are split.
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    name: String,
    dim: usize,
    timeout: Duration,
    retries: u32,
    backoff_base: Duration,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, name: impl Into<String>, dim: usize) -> Self {
        RemoteBackend {
            endpoint: endpoint.into(),
            name: name.into(),
            dim,
            timeout: Duration::from_secs(10),
            retries: 2,
            backoff_base: Duration::from_millis(100),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn post_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        debug_assert!(texts.len() <= MAX_BATCH);
        let url = format!("{}/v1/embed", self.endpoint.trim_end_matches('/'));
        let agent = ureq::AgentBuilder::new()
            .timeout(self.timeout)
            .build();
        let mut last_error = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            match agent
                .post(&url)
                .send_json(EmbedRequest { texts })
            {
                Ok(response) => {
                    let parsed: EmbedResponse = response.into_json().map_err(|e| {
                        EmbedError::Backend {
                            failed_blocks: Vec::new(),
                            message: format!("malformed embedding response: {e}"),
                        }
                    })?;
                    if parsed.embeddings.len() != texts.len() {
                        return Err(EmbedError::Backend {
                            failed_blocks: Vec::new(),
                            message: format!(
                                "service returned {} embeddings for {} texts",
                                parsed.embeddings.len(),
                                texts.len()
                            ),
                        });
                    }
                    for v in &parsed.embeddings {
                        if v.len() != self.dim {
                            return Err(EmbedError::DimensionMismatch {
                                expected: self.dim,
                                got: v.len(),
                            });
                        }
                    }
                    return Ok(parsed.embeddings);
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(EmbedError::Backend {
            failed_blocks: Vec::new(),
            message: format!(
                "embedding service unreachable after {} attempts: {last_error}",
                self.retries + 1
            ),
        })
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn backend_id(&self) -> String {
        format!("remote:v1:d{}:{}", self.dim, self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(MAX_BATCH.max(1)) {
            out.extend(self.post_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Parse a remote backend id of the form `remote:v1:d<dim>:<name>`.
pub fn parse_remote_id(id: &str) -> Option<(usize, String)> {
    let rest = id.strip_prefix("remote:v1:d")?;
    let (dim_str, name) = rest.split_once(':')?;
    Some((dim_str.parse().ok()?, String::from(name)))
}
