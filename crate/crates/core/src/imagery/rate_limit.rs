use std::collections::VecDeque;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

const WINDOW: Duration = Duration::from_secs(1);

/// Shared limiter admitting at most `limit` calls in any one-second window.
///
/// Keeps the admission times of the last `limit` calls; a new call waits
/// until the oldest of them is a full window in the past.
#[derive(Debug)]
pub struct RateLimiter {
    limit: usize,
    admitted: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    /// `None` or `Some(0)` disables limiting.
    pub fn per_second(limit: Option<u32>) -> Self {
        RateLimiter {
            limit: limit.unwrap_or(0) as usize,
            admitted: Mutex::new(VecDeque::new()),
        }
    }

    pub fn unlimited() -> Self {
        Self::per_second(None)
    }

    /// Blocks until a call is admitted.
    pub fn acquire(&self) {
        if self.limit == 0 {
            return;
        }
        loop {
            let wait = {
                let mut admitted = self.admitted.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                while admitted.front().is_some_and(|t| now.duration_since(*t) >= WINDOW) {
                    admitted.pop_front();
                }
                if admitted.len() < self.limit {
                    admitted.push_back(now);
                    return;
                }
                WINDOW - now.duration_since(*admitted.front().expect("non-empty"))
            };
            thread::sleep(wait);
        }
    }
}
