use std::thread;
use std::time::Duration;

/// Retry count and backoff for reconnecting clients.
#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub retries: u32,
    pub initial_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            initial_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            retries: 0,
            initial_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `attempt` (0-based): doubles each time.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.initial_delay.saturating_mul(1u32 << attempt.min(16))
    }

    pub fn sleep(&self, attempt: u32) {
        thread::sleep(self.delay(attempt));
    }
}
