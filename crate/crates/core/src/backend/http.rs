//! OpenAI-compatible HTTP client. Chat uses /chat/completions; token
//! scoring uses /completions with echo + logprobs under teacher forcing;
//! embeddings use /embeddings. Response parsing is split into pure
//! functions so it can be tested without a server.

use serde_json::{json, Value};

use super::{
    BackendError, ChatBackend, ChatRequest, EmbedBackend, EmbeddingVector, RetryPolicy,
    ScoreBackend, TokenScoreRow,
};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub embed_model: String,
    pub top_k: usize,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://localhost:8000/v1".into(),
            api_key: None,
            model: "teacher".into(),
            embed_model: "WhereIsAI/UAE-Large-V1".into(),
            top_k: 20,
            retry: RetryPolicy::default(),
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                request: "client-init".into(),
                msg: e.to_string(),
            })?;
        Ok(HttpBackend { config, client })
    }

    fn post(&self, path: &str, request_id: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let mut builder = self.client.post(&url).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Transport {
            request: request_id.to_string(),
            msg: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| BackendError::Transport {
            request: request_id.to_string(),
            msg: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http {
                status,
                request: request_id.to_string(),
                msg: truncate(&text, 400),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Transport {
            request: request_id.to_string(),
            msg: format!("invalid json body: {e}"),
        })
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        let request_id = request.request_id();
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        self.config.retry.run(&request_id, || {
            let value = self.post("chat/completions", &request_id, &body)?;
            parse_chat_response(&value, &request_id)
        })
    }
}

impl ScoreBackend for HttpBackend {
    fn score_tokens(
        &self,
        prompt: &str,
        response: &str,
        k: usize,
    ) -> Result<Vec<TokenScoreRow>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be >= 1".into()));
        }
        let full = format!("{prompt}{response}");
        let request_id = format!("score-{}", &crate::jsonl::sha256_hex(full.as_bytes())[..12]);
        let body = json!({
            "model": self.config.model,
            "prompt": full,
            "max_tokens": 0,
            "echo": true,
            "logprobs": k,
            "temperature": 0,
        });
        self.config.retry.run(&request_id, || {
            let value = self.post("completions", &request_id, &body)?;
            parse_score_response(&value, prompt.len(), &request_id)
        })
    }
}

impl EmbedBackend for HttpBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("empty embed batch".into()));
        }
        let request_id = format!(
            "embed-{}",
            &crate::jsonl::sha256_hex(texts.join("\u{0}").as_bytes())[..12]
        );
        let body = json!({
            "model": self.config.embed_model,
            "input": texts,
        });
        self.config.retry.run(&request_id, || {
            let value = self.post("embeddings", &request_id, &body)?;
            parse_embed_response(&value, texts.len(), &request_id)
        })
    }
}

fn truncate(s: &str, limit: usize) -> String {
    if s.len() <= limit {
        s.to_string()
    } else {
        let mut end = limit;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

pub(crate) fn parse_chat_response(value: &Value, request_id: &str) -> Result<String, BackendError> {
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| BackendError::Transport {
            request: request_id.to_string(),
            msg: "missing choices[0].message.content".into(),
        })
}

/// Extract teacher-forced rows for the response region of an echoed
/// completion: rows whose text offset lies at or past the prompt length.
pub(crate) fn parse_score_response(
    value: &Value,
    prompt_byte_len: usize,
    request_id: &str,
) -> Result<Vec<TokenScoreRow>, BackendError> {
    let logprobs = &value["choices"][0]["logprobs"];
    if logprobs.is_null() {
        return Err(BackendError::Capability(
            "backend did not return logprobs; token scoring unsupported".into(),
        ));
    }
    let tokens = logprobs["tokens"].as_array().ok_or_else(|| missing(request_id, "tokens"))?;
    let token_logprobs = logprobs["token_logprobs"]
        .as_array()
        .ok_or_else(|| missing(request_id, "token_logprobs"))?;
    let top_logprobs = logprobs["top_logprobs"]
        .as_array()
        .ok_or_else(|| missing(request_id, "top_logprobs"))?;
    let offsets = logprobs["text_offset"]
        .as_array()
        .ok_or_else(|| missing(request_id, "text_offset"))?;
    if tokens.len() != offsets.len() || tokens.len() != token_logprobs.len() {
        return Err(BackendError::Transport {
            request: request_id.to_string(),
            msg: "logprob arrays have mismatched lengths".into(),
        });
    }
    let mut rows = Vec::new();
    for i in 0..tokens.len() {
        let offset = offsets[i].as_u64().unwrap_or(0) as usize;
        if offset < prompt_byte_len {
            continue;
        }
        let token = tokens[i].as_str().unwrap_or_default().to_string();
        let target_logprob = token_logprobs[i].as_f64();
        let mut top_k: Vec<(String, f64)> = top_logprobs
            .get(i)
            .and_then(|v| v.as_object())
            .map(|m| {
                m.iter()
                    .filter_map(|(tok, lp)| lp.as_f64().map(|lp| (tok.clone(), lp)))
                    .collect()
            })
            .unwrap_or_default();
        top_k.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        rows.push(TokenScoreRow {
            token,
            target_logprob,
            top_k,
        });
    }
    Ok(rows)
}

pub(crate) fn parse_embed_response(
    value: &Value,
    expected: usize,
    request_id: &str,
) -> Result<Vec<EmbeddingVector>, BackendError> {
    let data = value["data"].as_array().ok_or_else(|| missing(request_id, "data"))?;
    let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
    for item in data {
        let index = item["index"].as_u64().unwrap_or(indexed.len() as u64) as usize;
        let values: Vec<f64> = item["embedding"]
            .as_array()
            .ok_or_else(|| missing(request_id, "embedding"))?
            .iter()
            .filter_map(Value::as_f64)
            .collect();
        indexed.push((index, values));
    }
    indexed.sort_by_key(|(i, _)| *i);
    let vectors: Vec<EmbeddingVector> = indexed
        .into_iter()
        .map(|(_, v)| EmbeddingVector::new(v))
        .collect();
    if vectors.len() != expected {
        return Err(BackendError::Transport {
            request: request_id.to_string(),
            msg: format!("expected {expected} embeddings, got {}", vectors.len()),
        });
    }
    if let Some(first) = vectors.first() {
        if vectors.iter().any(|v| v.dim != first.dim) {
            return Err(BackendError::InvalidRequest(
                "embedding dimension mismatch within batch".into(),
            ));
        }
    }
    Ok(vectors)
}

fn missing(request_id: &str, field: &str) -> BackendError {
    BackendError::Transport {
        request: request_id.to_string(),
        msg: format!("missing field {field} in response"),
    }
}
