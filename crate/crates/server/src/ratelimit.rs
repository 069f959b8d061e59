//! Per-caller token buckets.

use std::collections::HashMap;
use std::sync::Mutex;

/// Buckets beyond this count trigger a sweep of the ones that have refilled
/// completely, which carry no state worth keeping.
const SWEEP_THRESHOLD: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bucket {
    tokens: f64,
    last_refill_millis: i64,
}

#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_milli: f64,
    buckets: Mutex<HashMap<String, Bucket>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Allowed { remaining: u32 },
    Limited { retry_after_seconds: u64 },
}

impl RateLimiter {
    /// `capacity` requests, refilled linearly over `window_seconds`.
    pub fn new(capacity: u32, window_seconds: u32) -> Self {
        assert!(capacity > 0 && window_seconds > 0);
        RateLimiter {
            capacity: capacity as f64,
            refill_per_milli: capacity as f64 / (window_seconds as f64 * 1000.0),
            buckets: Mutex::new(HashMap::new()),
        }
    }

    pub fn check(&self, caller: &str, now_millis: i64) -> Decision {
        let mut buckets = self.buckets.lock().unwrap_or_else(|e| e.into_inner());
        if buckets.len() > SWEEP_THRESHOLD {
            let (capacity, rate) = (self.capacity, self.refill_per_milli);
            buckets.retain(|_, b| b.tokens + (now_millis - b.last_refill_millis) as f64 * rate < capacity);
        }
        let bucket = buckets.entry(caller.to_owned()).or_insert(Bucket {
            tokens: self.capacity,
            last_refill_millis: now_millis,
        });
        let elapsed = (now_millis - bucket.last_refill_millis).max(0);
        bucket.tokens = (bucket.tokens + elapsed as f64 * self.refill_per_milli).min(self.capacity);
        bucket.last_refill_millis = bucket.last_refill_millis.max(now_millis);
        if bucket.tokens >= 1.0 {
            bucket.tokens -= 1.0;
            Decision::Allowed {
                remaining: bucket.tokens.floor() as u32,
            }
        } else {
            let wait_millis = (1.0 - bucket.tokens) / self.refill_per_milli;
            Decision::Limited {
                retry_after_seconds: (wait_millis / 1000.0).ceil().max(1.0) as u64,
            }
        }
    }
}
