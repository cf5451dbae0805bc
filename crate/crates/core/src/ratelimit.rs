//! Request scheduling: a sliding-window rate limiter, exponential retry
//! delays, and a window audit over recorded request timestamps.
//!
//! Time is a monotone nanosecond counter supplied by the caller, which keeps
//! the scheduler usable from tests with a virtual clock.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Sliding-window request scheduler.
///
/// For a rate `r` the limiter admits at most `ceil(r)` requests in any window
/// of `ceil(r) / r` seconds (plus `slack`). Since `ceil(r) / r >= 1`, no
/// one-second window ever contains more than `ceil(r)` admitted requests, and
/// the long-run rate is `r`.
#[derive(Debug, Clone)]
pub struct SlidingWindowLimiter {
    capacity: usize,
    window_nanos: u64,
    /// Start times of the most recent `capacity` reservations, oldest first.
    recent: VecDeque<u64>,
}

impl SlidingWindowLimiter {
    /// `slack_nanos` widens the window to absorb latency jitter between the
    /// scheduled start and the moment the server observes the request.
    ///
    /// # Panics
    ///
    /// Panics unless `rate_per_sec` is finite and positive.
    pub fn new(rate_per_sec: f64, slack_nanos: u64) -> Self {
        assert!(
            rate_per_sec.is_finite() && rate_per_sec > 0.0,
            "rate must be positive"
        );
        let capacity = libm::ceil(rate_per_sec) as usize;
        let window = libm::ceil(capacity as f64 / rate_per_sec * NANOS_PER_SEC as f64) as u64;
        Self {
            capacity,
            window_nanos: window + slack_nanos,
            recent: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window_nanos(&self) -> u64 {
        self.window_nanos
    }

    /// Reserves the earliest admissible start time at or after `now` and
    /// returns it. Callers must wait until the returned instant before
    /// issuing the request. Successive reservations are non-decreasing as long
    /// as `now` is.
    pub fn reserve(&mut self, now: u64) -> u64 {
        let mut start = now;
        if let Some(last) = self.recent.back() {
            start = start.max(*last);
        }
        if self.recent.len() == self.capacity {
            let oldest = self.recent.pop_front().expect("capacity >= 1");
            start = start.max(oldest + self.window_nanos);
        }
        self.recent.push_back(start);
        start
    }
}

/// Delay before retry number `attempt` (1-based): `base * 2^(attempt-1)`,
/// saturating at `max_nanos`.
pub fn backoff_delay(base_nanos: u64, attempt: u32, max_nanos: u64) -> u64 {
    let shift = attempt.saturating_sub(1).min(63);
    base_nanos.saturating_mul(1u64 << shift)
        .min(max_nanos)
}

/// Largest number of timestamps falling in any half-open window
/// `[t, t + window)`. Input order does not matter.
pub fn max_in_window(timestamps: &[u64], window_nanos: u64) -> usize {
    let mut ts: Vec<u64> = timestamps.to_vec();
    ts.sort_unstable();
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..ts.len() {
        while ts[hi] - ts[lo] >= window_nanos {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best
}
