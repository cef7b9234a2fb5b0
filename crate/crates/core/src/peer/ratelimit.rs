use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Token bucket shared by every session of one node.
///
/// `acquire` reserves tokens immediately, possibly going into debt, and then
/// sleeps until the debt would have been repaid. Concurrent callers therefore
/// queue in arrival order.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    /// `rate` bytes per second; the bucket holds at most `burst` bytes.
    pub fn new(rate: u64, burst: u64) -> Self {
        assert!(rate > 0, "rate must be positive");
        let burst = burst.max(1) as f64;
        TokenBucket {
            rate: rate as f64,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn rate(&self) -> u64 {
        self.rate as u64
    }

    /// Time the caller must wait before sending `n` bytes.
    pub fn reserve(&self, n: usize) -> Duration {
        let mut state = self.state.lock().unwrap();
        let (tokens, last) = &mut *state;
        let now = Instant::now();
        *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.rate).min(self.burst);
        *last = now;
        *tokens -= n as f64;
        if *tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-*tokens / self.rate)
        }
    }

    pub async fn acquire(&self, n: usize) {
        let wait = self.reserve(n);
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}
