//! Backend clients: chat generation, teacher-forced token scoring, and
//! text embedding, behind small traits so stages stay backend-agnostic.

mod http;
mod mock;
mod sidecar;

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::MockBackend;
pub use sidecar::SidecarEmbeddings;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error for request {request}: {msg}")]
    Transport { request: String, msg: String },

    #[error("http {status} for request {request}: {msg}")]
    Http {
        status: u16,
        request: String,
        msg: String,
    },

    #[error("retries exhausted after {attempts} attempts for request {request}: {last}")]
    Exhausted {
        attempts: u32,
        request: String,
        last: String,
    },

    #[error("backend lacks capability: {0}")]
    Capability(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Transient failures are retried; client errors and capability gaps
    /// fail immediately.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Http { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

/// A single chat generation request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        ChatRequest {
            prompt: prompt.into(),
            temperature: 0.7,
            max_tokens: 2048,
        }
    }

    /// Short identifier used in error messages and logs.
    pub fn request_id(&self) -> String {
        let h = crate::jsonl::sha256_hex(self.prompt.as_bytes());
        format!("req-{}", &h[..12])
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        Ok(())
    }
}

/// Teacher-forced scores for one response token: the token, its logprob,
/// and the top-k alternatives at that position (logprob descending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreRow {
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_logprob: Option<f64>,
    pub top_k: Vec<(String, f64)>,
}

impl TokenScoreRow {
    /// Top-k sorted descending, logprobs non-positive, probability mass
    /// not exceeding 1 (within float tolerance).
    pub fn validate(&self) -> Result<(), BackendError> {
        let mut mass = 0.0;
        for window in self.top_k.windows(2) {
            if window[1].1 > window[0].1 {
                return Err(BackendError::InvalidRequest(format!(
                    "top_k not sorted descending at token {:?}",
                    self.token
                )));
            }
        }
        for (_, lp) in &self.top_k {
            if *lp > 0.0 || !lp.is_finite() {
                return Err(BackendError::InvalidRequest(format!(
                    "logprob {lp} out of range for token {:?}",
                    self.token
                )));
            }
            mass += lp.exp();
        }
        if mass > 1.0 + 1e-6 {
            return Err(BackendError::InvalidRequest(format!(
                "top_k probability mass {mass} exceeds 1"
            )));
        }
        Ok(())
    }
}

/// A fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let dim = values.len();
        EmbeddingVector { values, dim }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

pub trait ScoreBackend: Send + Sync {
    /// One row per response token under teacher forcing, in response order,
    /// each carrying the top-k alternatives at that position.
    fn score_tokens(
        &self,
        prompt: &str,
        response: &str,
        k: usize,
    ) -> Result<Vec<TokenScoreRow>, BackendError>;

    /// Token count of `text` under the serving model's tokenizer, when the
    /// backend can report one.
    fn count_tokens(&self, _text: &str) -> Option<usize> {
        None
    }
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

/// Retry schedule for transient backend failures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Run `op`, retrying transient errors with exponential backoff.
    /// Non-transient errors return immediately; exhaustion wraps the last
    /// error with the request id.
    pub fn run<T>(
        &self,
        request_id: &str,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut last: Option<BackendError> = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                let delay = self
                    .base_delay_ms
                    .saturating_mul(1u64 << (attempt - 1).min(16))
                    .min(self.max_delay_ms);
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
            match op() {
                Ok(value) => {
                    if attempt > 0 {
                        log::warn!("request {request_id} succeeded after {attempt} retries");
                    }
                    return Ok(value);
                }
                Err(e) if e.is_transient() => {
                    log::warn!("request {request_id} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Exhausted {
            attempts: self.max_retries + 1,
            request: request_id.to_string(),
            last: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}

/// Apply `f` to every item with at most `concurrency` calls in flight,
/// returning results in input order.
pub fn map_bounded<T, U, E, F>(items: &[T], concurrency: usize, f: F) -> Vec<Result<U, E>>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<U, E> + Sync,
{
    let concurrency = concurrency.max(1).min(items.len().max(1));
    if concurrency <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<U, E>)>();
    std::thread::scope(|scope| {
        for _ in 0..concurrency {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= items.len() {
                    break;
                }
                let result = f(idx, &items[idx]);
                if tx.send((idx, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut slots: Vec<Option<Result<U, E>>> = (0..items.len()).map(|_| None).collect();
        for (idx, result) in rx {
            slots[idx] = Some(result);
        }
        slots.into_iter().map(|s| s.expect("worker sent result")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

    fn transient(msg: &str) -> BackendError {
        BackendError::Transport {
            request: "r".into(),
            msg: msg.into(),
        }
    }

    #[test]
    fn retry_recovers_after_transient_failure() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let calls = AtomicU32::new(0);
        let result = policy.run("req-1", || {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(BackendError::Http {
                    status: 503,
                    request: "req-1".into(),
                    msg: "unavailable".into(),
                })
            } else {
                Ok("ok".to_string())
            }
        });
        assert_eq!(result.unwrap(), "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 2, "exactly one retry");
    }

    #[test]
    fn client_error_is_not_retried() {
        let policy = RetryPolicy {
            max_retries: 5,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let calls = AtomicU32::new(0);
        let result: Result<(), _> = policy.run("req-2", || {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Http {
                status: 401,
                request: "req-2".into(),
                msg: "unauthorized".into(),
            })
        });
        match result.unwrap_err() {
            BackendError::Http { status, .. } => assert_eq!(status, 401),
            other => panic!("unexpected: {other}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1, "zero retries");
    }

    #[test]
    fn exhausted_error_carries_request_id() {
        let policy = RetryPolicy {
            max_retries: 2,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let result: Result<(), _> = policy.run("req-3", || Err(transient("down")));
        match result.unwrap_err() {
            BackendError::Exhausted {
                attempts, request, ..
            } => {
                assert_eq!(attempts, 3);
                assert_eq!(request, "req-3");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn map_bounded_preserves_order_and_limit() {
        let items: Vec<u64> = (0..64).collect();
        let in_flight = AtomicUsize::new(0);
        let high_water = AtomicUsize::new(0);
        let results = map_bounded(&items, 4, |_, &x| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            high_water.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(1));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok::<u64, BackendError>(x * 2)
        });
        let values: Vec<u64> = results.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(values, (0..64).map(|x| x * 2).collect::<Vec<_>>());
        assert!(high_water.load(Ordering::SeqCst) <= 4);
    }

    #[test]
    fn token_row_validation() {
        let good = TokenScoreRow {
            token: "Neg".into(),
            target_logprob: Some(-2.0),
            top_k: vec![("Pos".into(), -0.5), ("Neg".into(), -2.0)],
        };
        good.validate().unwrap();

        let unsorted = TokenScoreRow {
            token: "x".into(),
            target_logprob: None,
            top_k: vec![("a".into(), -2.0), ("b".into(), -0.5)],
        };
        assert!(unsorted.validate().is_err());

        let over_mass = TokenScoreRow {
            token: "x".into(),
            target_logprob: None,
            top_k: vec![("a".into(), -0.01), ("b".into(), -0.01)],
        };
        assert!(over_mass.validate().is_err());
    }
}
