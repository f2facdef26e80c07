//! Time source, retry with exponential backoff, and a sliding-window rate limiter.
//!
//! All waiting goes through [`Clock::sleep`], so tests drive time with
//! [`ManualClock`] and never block.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// A clock that only moves when slept on.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
    sleeps: Mutex<Vec<Duration>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Mutex::new(start),
            sleeps: Mutex::new(Vec::new()),
        }
    }

    /// Starts at the Unix epoch.
    pub fn epoch() -> Self {
        Self::new(DateTime::UNIX_EPOCH)
    }

    pub fn advance(&self, d: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += TimeDelta::from_std(d).unwrap_or(TimeDelta::MAX);
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.sleeps.lock().unwrap().push(d);
        self.advance(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            multiplier: 2.0,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        let ms = (self.base_delay_ms as f64 * factor).min(self.max_delay_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

/// Outcome of a retried operation, with the number of attempts made.
#[derive(Debug)]
pub struct Attempted<T> {
    pub value: T,
    pub attempts: u32,
}

/// Runs `op` until it succeeds, returns a non-retryable error, or the attempt
/// budget is spent.
pub fn retry<T, E>(
    policy: &RetryPolicy,
    clock: &dyn Clock,
    retryable: impl Fn(&E) -> bool,
    mut op: impl FnMut(u32) -> Result<T, E>,
) -> Result<Attempted<T>, Attempted<E>> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(value) => return Ok(Attempted { value, attempts: attempt }),
            Err(e) if attempt < max && retryable(&e) => {
                clock.sleep(policy.delay_after(attempt));
                attempt += 1;
            }
            Err(e) => return Err(Attempted { value: e, attempts: attempt }),
        }
    }
}

const WINDOW: Duration = Duration::from_secs(60);

/// At most `per_minute` acquisitions in any 60 s window.
pub struct RateLimiter {
    per_minute: usize,
    issued: Mutex<VecDeque<DateTime<Utc>>>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        Self {
            per_minute: per_minute.max(1) as usize,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks (via `clock`) until a request may be issued, then records it.
    pub fn acquire(&self, clock: &dyn Clock) -> DateTime<Utc> {
        let window = TimeDelta::from_std(WINDOW).unwrap();
        let mut issued = self.issued.lock().unwrap();
        loop {
            let now = clock.now();
            while issued.front().is_some_and(|&t| now - t >= window) {
                issued.pop_front();
            }
            if issued.len() < self.per_minute {
                issued.push_back(now);
                return now;
            }
            let wait = (issued[0] + window - now)
                .to_std()
                .unwrap_or(Duration::from_millis(1));
            clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 6,
            base_delay_ms: 100,
            multiplier: 3.0,
            max_delay_ms: 1000,
        };
        let delays: Vec<_> = (1..=4).map(|a| p.delay_after(a).as_millis()).collect();
        assert_eq!(delays, vec![100, 300, 900, 1000]);
    }

    #[test]
    fn retry_counts_attempts() {
        let clock = ManualClock::epoch();
        let policy = RetryPolicy::default();
        let out = retry(&policy, &clock, |_: &()| true, |a| if a < 3 { Err(()) } else { Ok(a) }).unwrap();
        assert_eq!(out.attempts, 3);
        assert_eq!(clock.sleeps().len(), 2);

        let err = retry(&policy, &clock, |_: &()| true, |_| Err::<(), ()>(())).unwrap_err();
        assert_eq!(err.attempts, 4);
    }

    #[test]
    fn non_retryable_stops_immediately() {
        let clock = ManualClock::epoch();
        let err = retry(&RetryPolicy::default(), &clock, |_: &()| false, |_| Err::<(), ()>(())).unwrap_err();
        assert_eq!(err.attempts, 1);
    }

    #[test]
    fn limiter_respects_sliding_window() {
        let clock = ManualClock::epoch();
        let limiter = RateLimiter::new(5);
        let mut stamps = Vec::new();
        for i in 0..23 {
            if i % 4 == 0 {
                clock.advance(Duration::from_secs(7));
            }
            stamps.push(limiter.acquire(&clock));
        }
        let window = TimeDelta::seconds(60);
        for (i, &t) in stamps.iter().enumerate() {
            let in_window = stamps[i..].iter().filter(|&&s| s - t < window).count();
            assert!(in_window <= 5, "window starting at {t} holds {in_window}");
        }
    }
}
