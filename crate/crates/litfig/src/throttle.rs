//! Wall-clock front end for the core scheduler: a shared request gate and a
//! retry loop with exponential delays.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use litfig_core::ratelimit::{backoff_delay, SlidingWindowLimiter};

/// Default widening of the limiter window, absorbing the gap between the
/// scheduled instant and the moment a server sees the request.
pub const DEFAULT_SLACK: Duration = Duration::from_millis(50);

/// Rate gate shared by every worker that talks to one remote.
#[derive(Debug)]
pub struct RateGate {
    origin: Instant,
    limiter: Mutex<SlidingWindowLimiter>,
}

impl RateGate {
    pub fn new(rate_per_sec: f64, slack: Duration) -> Self {
        Self {
            origin: Instant::now(),
            limiter: Mutex::new(SlidingWindowLimiter::new(rate_per_sec, slack.as_nanos() as u64)),
        }
    }

    /// Blocks until the caller may issue one request.
    pub fn acquire(&self) {
        let now = self.origin.elapsed().as_nanos() as u64;
        let start = self.limiter.lock().expect("rate gate poisoned").reserve(now);
        let target = self.origin + Duration::from_nanos(start);
        let now = Instant::now();
        if target > now {
            thread::sleep(target - now);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_nanos(backoff_delay(
            self.base_delay.as_nanos() as u64,
            attempt,
            self.max_delay.as_nanos() as u64,
        ))
    }
}

/// Whether an error may go away on a later attempt.
pub trait Transient {
    fn is_transient(&self) -> bool;
}

#[derive(Debug)]
pub struct Exhausted<E> {
    pub attempts: u32,
    pub last: E,
}

/// Runs `op` behind `gate`, retrying transient failures up to
/// `policy.max_retries` times. Returns the value and the attempt count.
pub fn with_retries<T, E, F>(gate: &RateGate, policy: &RetryPolicy, mut op: F) -> Result<(T, u32), Exhausted<E>>
where
    E: Transient,
    F: FnMut() -> Result<T, E>,
{
    let mut attempts = 0;
    loop {
        gate.acquire();
        attempts += 1;
        match op() {
            Ok(v) => return Ok((v, attempts)),
            Err(e) if e.is_transient() && attempts <= policy.max_retries => {
                thread::sleep(policy.delay(attempts));
            }
            Err(last) => return Err(Exhausted { attempts, last }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky;
    impl Transient for Flaky {
        fn is_transient(&self) -> bool {
            true
        }
    }

    fn quick(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    #[test]
    fn retries_until_success() {
        let gate = RateGate::new(1000.0, Duration::ZERO);
        let mut calls = 0;
        let (v, attempts) = with_retries(&gate, &quick(3), || {
            calls += 1;
            if calls < 3 {
                Err(Flaky)
            } else {
                Ok(calls)
            }
        })
        .ok()
        .unwrap();
        assert_eq!((v, attempts), (3, 3));
    }

    #[test]
    fn gives_up_after_budget() {
        let gate = RateGate::new(1000.0, Duration::ZERO);
        let err = with_retries::<(), _, _>(&gate, &quick(2), || Err(Flaky)).unwrap_err();
        assert_eq!(err.attempts, 3);
    }

    #[test]
    fn delay_doubles_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(1000));
        assert_eq!(p.delay(20), Duration::from_secs(30));
    }
}
