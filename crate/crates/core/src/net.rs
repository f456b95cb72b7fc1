//! Outbound HTTP plumbing shared by the embedding and chat clients.
//!
//! Every outbound request passes through [`OutboundGate`], which counts
//! attempts and can refuse them. A pipeline built from mock providers never
//! touches the gate; tests read the counter to prove it.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("outbound request to {0} refused: network access is disabled")]
    Denied(String),
    #[error("request to {url} failed: {message}")]
    Transport {
        url: String,
        message: String,
        retryable: bool,
    },
    #[error("{url} returned HTTP {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("unexpected response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl NetError {
    pub fn is_retryable(&self) -> bool {
        match self {
            NetError::Transport { retryable, .. } => *retryable,
            NetError::Status { status, .. } => *status >= 500 || *status == 429,
            NetError::Denied(_) | NetError::Decode { .. } => false,
        }
    }
}

static PROCESS_ATTEMPTS: AtomicU64 = AtomicU64::new(0);

/// Total outbound attempts made by any gate in this process.
pub fn process_outbound_attempts() -> u64 {
    PROCESS_ATTEMPTS.load(Ordering::SeqCst)
}

#[derive(Debug, Default)]
pub struct OutboundGate {
    deny: AtomicBool,
    attempts: AtomicU64,
}

impl OutboundGate {
    pub fn new(deny: bool) -> Arc<Self> {
        Arc::new(Self {
            deny: AtomicBool::new(deny),
            attempts: AtomicU64::new(0),
        })
    }

    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn set_denied(&self, deny: bool) {
        self.deny.store(deny, Ordering::SeqCst);
    }

    pub(crate) fn check(&self, url: &str) -> Result<(), NetError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        PROCESS_ATTEMPTS.fetch_add(1, Ordering::SeqCst);
        if self.deny.load(Ordering::SeqCst) {
            return Err(NetError::Denied(url.to_string()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests per client.
#[derive(Debug)]
pub struct InFlightLimit {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            free: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        InFlightPermit { limit: self }
    }
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut free = self.limit.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.limit.cv.notify_one();
    }
}

pub(crate) fn client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("HTTP client builds with static settings")
}

/// POSTs a JSON body and decodes the JSON reply.
pub(crate) fn post_json(
    gate: &OutboundGate,
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, NetError> {
    gate.check(url)?;
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| NetError::Transport {
        url: url.to_string(),
        retryable: e.is_connect() || e.is_timeout() || e.is_request(),
        message: e.to_string(),
    })?;
    let status = resp.status();
    let text = resp.text().map_err(|e| NetError::Transport {
        url: url.to_string(),
        retryable: true,
        message: e.to_string(),
    })?;
    if !status.is_success() {
        return Err(NetError::Status {
            url: url.to_string(),
            status: status.as_u16(),
            body: text,
        });
    }
    serde_json::from_str(&text).map_err(|e| NetError::Decode {
        url: url.to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// Reads an API key from the environment variable named in config.
pub(crate) fn api_key_from_env(var: Option<&str>) -> Option<String> {
    var.filter(|v| !v.is_empty())
        .and_then(|v| std::env::var(v).ok())
        .filter(|k| !k.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn gate_counts_and_denies() {
        let gate = OutboundGate::new(true);
        assert!(matches!(gate.check("http://x"), Err(NetError::Denied(_))));
        assert_eq!(gate.attempts(), 1);
        gate.set_denied(false);
        assert!(gate.check("http://x").is_ok());
        assert_eq!(gate.attempts(), 2);
    }

    #[test]
    fn in_flight_limit_bounds_concurrency() {
        let limit = Arc::new(InFlightLimit::new(2));
        let active = Arc::new(AtomicU64::new(0));
        let peak = Arc::new(AtomicU64::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, active, peak) = (limit.clone(), active.clone(), peak.clone());
                thread::spawn(move || {
                    let _permit = limit.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn joins_urls() {
        assert_eq!(join_url("http://h/v1/", "/embeddings"), "http://h/v1/embeddings");
        assert_eq!(join_url("http://h/v1", "chat/completions"), "http://h/v1/chat/completions");
    }
}
