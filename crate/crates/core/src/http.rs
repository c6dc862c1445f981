//! JSON-over-HTTP plumbing shared by the remote embedder, generator and judge.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Connection failure, timeout or a 5xx response. Worth retrying.
    #[error("service unavailable: {0}")]
    Unavailable(String),
    /// The service answered but rejected the request.
    #[error("service returned status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Unavailable(_))
    }
}

pub trait JsonTransport: Send + Sync {
    fn get(&self, path: &str) -> Result<Value, TransportError>;
    fn post(&self, path: &str, body: &Value) -> Result<Value, TransportError>;
}

impl<T: JsonTransport + ?Sized> JsonTransport for std::sync::Arc<T> {
    fn get(&self, path: &str) -> Result<Value, TransportError> {
        (**self).get(path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        (**self).post(path, body)
    }
}

/// Blocking HTTP transport rooted at a base URL.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        HttpTransport { base: base.into().trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path.trim_start_matches('/'))
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Value, TransportError> {
        let mut resp = resp.map_err(|e| TransportError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| TransportError::Unavailable(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&body).map_err(|e| TransportError::Decode(e.to_string())),
            500..=599 => Err(TransportError::Unavailable(format!("status {status}"))),
            _ => Err(TransportError::Rejected { status, body }),
        }
    }
}

impl JsonTransport for HttpTransport {
    fn get(&self, path: &str) -> Result<Value, TransportError> {
        Self::finish(self.agent.get(&self.url(path)).call())
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        Self::finish(self.agent.post(&self.url(path)).send_json(body))
    }
}

/// Replays canned responses keyed by `(method, path, body)`.
///
/// Used to run client code against a recorded exchange instead of a live service.
#[derive(Default)]
pub struct RecordedTransport {
    entries: Mutex<Vec<Recorded>>,
    log: Mutex<Vec<(String, String, Value)>>,
}

struct Recorded {
    method: &'static str,
    path: String,
    body: Option<Value>,
    responses: VecDeque<Result<Value, TransportError>>,
    sticky: Option<Result<Value, TransportError>>,
}

impl RecordedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Always answer `GET path` with `response`.
    pub fn on_get(self, path: &str, response: Result<Value, TransportError>) -> Self {
        self.push("GET", path, None, VecDeque::new(), Some(response))
    }

    /// Always answer `POST path` carrying exactly `body` with `response`.
    pub fn on_post(self, path: &str, body: Value, response: Result<Value, TransportError>) -> Self {
        self.push("POST", path, Some(body), VecDeque::new(), Some(response))
    }

    /// Answer any `POST path` with the queued responses in order, then with the last one.
    pub fn on_post_sequence(self, path: &str, responses: Vec<Result<Value, TransportError>>) -> Self {
        let mut queue: VecDeque<_> = responses.into();
        let sticky = queue.pop_back();
        self.push("POST", path, None, queue, sticky)
    }

    fn push(
        self,
        method: &'static str,
        path: &str,
        body: Option<Value>,
        responses: VecDeque<Result<Value, TransportError>>,
        sticky: Option<Result<Value, TransportError>>,
    ) -> Self {
        self.entries.lock().unwrap().push(Recorded { method, path: path.to_string(), body, responses, sticky });
        self
    }

    /// Requests seen so far, as `(method, path, body)`.
    pub fn requests(&self) -> Vec<(String, String, Value)> {
        self.log.lock().unwrap().clone()
    }

    fn answer(&self, method: &'static str, path: &str, body: Option<&Value>) -> Result<Value, TransportError> {
        self.log.lock().unwrap().push((method.to_string(), path.to_string(), body.cloned().unwrap_or(Value::Null)));
        let mut entries = self.entries.lock().unwrap();
        let entry = entries
            .iter_mut()
            .find(|e| e.method == method && e.path == path && (e.body.is_none() || e.body.as_ref() == body));
        match entry {
            Some(e) => match e.responses.pop_front() {
                Some(r) => r,
                None => e.sticky.clone().unwrap_or_else(|| Err(TransportError::Unavailable("exhausted".into()))),
            },
            None => Err(TransportError::Rejected { status: 404, body: format!("no recording for {method} {path}") }),
        }
    }
}

impl JsonTransport for RecordedTransport {
    fn get(&self, path: &str) -> Result<Value, TransportError> {
        self.answer("GET", path, None)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        self.answer("POST", path, Some(body))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(100) }
    }
}

impl RetryPolicy {
    pub fn no_delay(attempts: u32) -> Self {
        RetryPolicy { attempts, base_delay: Duration::ZERO }
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// The delay doubles after every retryable failure.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, TransportError>) -> Result<T, TransportError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.attempts.max(1) => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}
