//! Retry, rate limiting and per-attempt call logging shared by every provider.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::error::{ErrorClass, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub backoff_factor: f64,
    pub retryable: BTreeSet<ErrorClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_secs(1),
            backoff_factor: 2.0,
            retryable: [
                ErrorClass::Timeout,
                ErrorClass::RateLimit,
                ErrorClass::Server,
                ErrorClass::Connection,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts < 1 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.base_delay.is_zero() {
            return Err("base_delay must be positive".into());
        }
        if !(self.backoff_factor.is_finite() && self.backoff_factor >= 1.0) {
            return Err("backoff_factor must be >= 1".into());
        }
        Ok(())
    }

    /// Delay slept before retry number `retry` (1-based): `base * factor^(retry-1)`.
    pub fn retry_delay(&self, retry: u32) -> Duration {
        let exp = retry.saturating_sub(1) as i32;
        self.base_delay.mul_f64(self.backoff_factor.powi(exp))
    }

    pub fn is_retryable(&self, err: &ProviderError) -> bool {
        self.retryable.contains(&err.class())
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}

/// Records requested delays without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().unwrap().push(d);
    }
}

/// Enforces a minimum spacing between consecutive requests across threads.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            next_slot: Mutex::new(None),
        }
    }

    pub fn min_interval(&self) -> Duration {
        self.min_interval
    }

    /// Blocks until this caller's reserved slot arrives.
    pub fn acquire(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.min_interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Chat,
    Embedding,
    Search,
    Fetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    Retried,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub provider: ProviderKind,
    pub endpoint: String,
    pub attempt: u32,
    pub latency_ms: f64,
    pub outcome: CallOutcome,
    pub detail: String,
}

/// Append-only record of provider attempts, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct CallLog {
    entries: Mutex<Vec<CallLogEntry>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl CallLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::new(Vec::new()),
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn record(&self, entry: CallLogEntry) {
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap();
            if let Ok(line) = serde_json::to_string(&entry) {
                // Logging must never fail a provider call.
                let _ = writeln!(w, "{line}");
                let _ = w.flush();
            }
        }
        self.entries.lock().unwrap().push(entry);
    }

    pub fn entries(&self) -> Vec<CallLogEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, kind: ProviderKind) -> usize {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.provider == kind)
            .count()
    }
}

/// A successful call and the number of attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Attempted<T> {
    pub value: T,
    pub attempts: u32,
}

/// Retry policy, rate limiter, sleeper and call log bundled for provider clients.
pub struct CallRuntime {
    policy: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    limiter: RateLimiter,
    log: Arc<CallLog>,
}

impl std::fmt::Debug for CallRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CallRuntime")
            .field("policy", &self.policy)
            .field("limiter", &self.limiter)
            .finish_non_exhaustive()
    }
}

impl Default for CallRuntime {
    fn default() -> Self {
        Self::new(
            RetryPolicy::default(),
            Arc::new(ThreadSleeper),
            Duration::ZERO,
            Arc::new(CallLog::in_memory()),
        )
    }
}

impl CallRuntime {
    pub fn new(
        policy: RetryPolicy,
        sleeper: Arc<dyn Sleeper>,
        min_interval: Duration,
        log: Arc<CallLog>,
    ) -> Self {
        Self {
            policy,
            sleeper,
            limiter: RateLimiter::new(min_interval),
            log,
        }
    }

    /// Runtime with the default policy that never actually sleeps.
    pub fn instant() -> Self {
        Self::new(
            RetryPolicy::default(),
            Arc::new(RecordingSleeper::default()),
            Duration::ZERO,
            Arc::new(CallLog::in_memory()),
        )
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }

    /// Runs `op` under the retry policy. Non-retryable errors are returned
    /// as-is after one attempt; exhausting the policy yields
    /// [`ProviderError::Unavailable`].
    pub fn execute<T>(
        &self,
        kind: ProviderKind,
        endpoint: &str,
        mut op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<Attempted<T>, ProviderError> {
        let max = self.policy.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            self.limiter.acquire();
            let started = Instant::now();
            let result = op();
            let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
            match result {
                Ok(value) => {
                    self.log.record(CallLogEntry {
                        provider: kind,
                        endpoint: endpoint.to_string(),
                        attempt,
                        latency_ms,
                        outcome: CallOutcome::Ok,
                        detail: "ok".into(),
                    });
                    return Ok(Attempted {
                        value,
                        attempts: attempt,
                    });
                }
                Err(err) => {
                    let retry = self.policy.is_retryable(&err) && attempt < max;
                    self.log.record(CallLogEntry {
                        provider: kind,
                        endpoint: endpoint.to_string(),
                        attempt,
                        latency_ms,
                        outcome: if retry {
                            CallOutcome::Retried
                        } else {
                            CallOutcome::Failed
                        },
                        detail: err.to_string(),
                    });
                    if !retry {
                        if self.policy.is_retryable(&err) {
                            tracing::warn!(%endpoint, attempts = attempt, error = %err, "provider exhausted retries");
                            return Err(ProviderError::Unavailable {
                                attempts: attempt,
                                last: Box::new(err),
                            });
                        }
                        return Err(err);
                    }
                    tracing::debug!(%endpoint, attempt, error = %err, "retrying provider call");
                    self.sleeper.sleep(self.policy.retry_delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}
