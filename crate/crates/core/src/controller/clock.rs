use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Time source for budget accounting. A fake implementation lets budget
/// behaviour run deterministically without sleeping.
pub trait Clock: Send + Sync + std::fmt::Debug {
    /// Time since the clock's origin.
    fn now(&self) -> Duration;

    /// Lets `d` pass: a real sleep, or an instant advance for fake clocks.
    fn sleep(&self, d: Duration);

    /// A clock for one parallel context. Real clocks share the wall time;
    /// a fake clock starts a new timeline at its current reading.
    fn fork(&self) -> Arc<dyn Clock>;

    /// Moves this clock up to `t` if it is behind. No-op for real clocks.
    fn catch_up(&self, t: Duration);
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }

    fn fork(&self) -> Arc<dyn Clock> {
        Arc::new(self.clone())
    }

    fn catch_up(&self, _t: Duration) {}
}

/// Manually advanced clock with nanosecond resolution.
#[derive(Debug, Default)]
pub struct FakeClock {
    nanos: AtomicU64,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(t: Duration) -> Self {
        FakeClock {
            nanos: AtomicU64::new(t.as_nanos() as u64),
        }
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }

    fn fork(&self) -> Arc<dyn Clock> {
        Arc::new(FakeClock::starting_at(self.now()))
    }

    fn catch_up(&self, t: Duration) {
        self.nanos.fetch_max(t.as_nanos() as u64, Ordering::SeqCst);
    }
}

/// Wall-clock budget measured from a start reading of a [`Clock`].
#[derive(Debug, Clone)]
pub struct BudgetClock {
    clock: Arc<dyn Clock>,
    start: Duration,
    total: f64,
}

impl BudgetClock {
    /// Starts a budget of `total_seconds` at the clock's current reading.
    pub fn start(clock: Arc<dyn Clock>, total_seconds: f64) -> Self {
        let start = clock.now();
        BudgetClock {
            clock,
            start,
            total: total_seconds,
        }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn elapsed(&self) -> f64 {
        self.clock.now().saturating_sub(self.start).as_secs_f64()
    }

    /// `total - elapsed`, floored at zero.
    pub fn remaining(&self) -> f64 {
        (self.total - self.elapsed()).max(0.0)
    }

    /// Moves the underlying clock up to `seconds` of elapsed budget.
    pub fn catch_up_elapsed(&self, seconds: f64) {
        self.clock.catch_up(self.start + Duration::from_secs_f64(seconds));
    }

    /// Same budget and start, on a forked clock.
    pub fn fork(&self) -> Self {
        BudgetClock {
            clock: self.clock.fork(),
            start: self.start,
            total: self.total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_budget_accounting() {
        let fake = Arc::new(FakeClock::new());
        let budget = BudgetClock::start(fake.clone(), 10.0);
        fake.advance(Duration::from_secs(4));
        assert_eq!(budget.elapsed(), 4.0);
        assert_eq!(budget.remaining(), 6.0);
        fake.advance(Duration::from_secs(20));
        assert_eq!(budget.remaining(), 0.0);
    }

    #[test]
    fn forks_are_independent_timelines() {
        let fake = Arc::new(FakeClock::new());
        let budget = BudgetClock::start(fake.clone(), 10.0);
        let a = budget.fork();
        let b = budget.fork();
        a.clock().sleep(Duration::from_secs(3));
        assert_eq!(a.elapsed(), 3.0);
        assert_eq!(b.elapsed(), 0.0);
        assert_eq!(budget.elapsed(), 0.0);
        fake.catch_up(a.clock().now());
        assert_eq!(budget.elapsed(), 3.0);
        fake.catch_up(Duration::from_secs(1));
        assert_eq!(budget.elapsed(), 3.0);
    }
}
