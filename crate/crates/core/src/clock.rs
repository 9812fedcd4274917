//! Elapsed-time sources for the sampler and the simulated backend.
//!
//! [`SystemClock`] follows the monotonic OS clock. [`SimClock`] is a virtual
//! clock that only moves when the test (or the `simulate` command) lets it,
//! so sampling sessions of arbitrary length run instantly and deterministically.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// A raisable flag that sleeping threads can wait on.
#[derive(Debug, Default)]
pub struct StopSignal {
    raised: Mutex<bool>,
    cv: Condvar,
}

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        *self.raised.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_raised(&self) -> bool {
        *self.raised.lock().unwrap()
    }

    /// Waits up to `timeout`; returns `true` if the signal is raised.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let guard = self.raised.lock().unwrap();
        let (guard, _) = self
            .cv
            .wait_timeout_while(guard, timeout, |raised| !*raised)
            .unwrap();
        *guard
    }
}

pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;

    /// Blocks until `deadline` is reached or `stop` is raised.
    ///
    /// Returns `false` when interrupted by `stop`.
    fn sleep_until(&self, deadline: Duration, stop: &StopSignal) -> bool;

    /// Wakes any thread blocked in [`Clock::sleep_until`] so it can observe a
    /// raised stop signal.
    fn wake(&self) {}

    /// Registers a thread that will sleep on this clock.
    fn attach(&self) {}

    /// Reverses [`Clock::attach`].
    fn detach(&self) {}
}

/// Monotonic wall-time clock whose origin is its construction instant.
#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
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

    fn sleep_until(&self, deadline: Duration, stop: &StopSignal) -> bool {
        loop {
            let now = self.now();
            if now >= deadline {
                return !stop.is_raised();
            }
            if stop.wait_timeout(deadline - now) {
                return false;
            }
        }
    }
}

#[derive(Debug, Default)]
struct SimState {
    now: Duration,
    horizon: Duration,
    attached: usize,
    /// Sleepers parked beyond the horizon during the current generation.
    parked: usize,
    generation: u64,
}

/// Virtual clock advanced explicitly with [`SimClock::run_until`].
///
/// Sleepers whose deadline is within the horizon return immediately with the
/// clock set to that deadline. Sleepers beyond the horizon park until the
/// horizon moves or they are stopped.
#[derive(Debug, Default)]
pub struct SimClock {
    state: Mutex<SimState>,
    cv: Condvar,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves the horizon to `t`, lets every attached sleeper catch up to it,
    /// then sets the clock to `t`.
    ///
    /// Panics if `t` is earlier than the current time.
    pub fn run_until(&self, t: Duration) {
        let mut st = self.state.lock().unwrap();
        assert!(t >= st.now, "virtual clock cannot move backwards");
        st.horizon = t;
        st.parked = 0;
        st.generation += 1;
        self.cv.notify_all();
        st = self
            .cv
            .wait_while(st, |s| s.attached > 0 && s.parked < s.attached)
            .unwrap();
        st.now = t;
    }

    pub fn run_for(&self, d: Duration) {
        let target = self.now() + d;
        self.run_until(target);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().now
    }

    fn sleep_until(&self, deadline: Duration, stop: &StopSignal) -> bool {
        let mut st = self.state.lock().unwrap();
        let mut parked_in: Option<u64> = None;
        loop {
            let counted = parked_in == Some(st.generation);
            if stop.is_raised() {
                if counted {
                    st.parked -= 1;
                }
                return false;
            }
            if deadline <= st.horizon {
                if counted {
                    st.parked -= 1;
                }
                if deadline > st.now {
                    st.now = deadline;
                }
                return true;
            }
            if !counted {
                st.parked += 1;
                parked_in = Some(st.generation);
                self.cv.notify_all();
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    fn wake(&self) {
        let _guard = self.state.lock().unwrap();
        self.cv.notify_all();
    }

    fn attach(&self) {
        self.state.lock().unwrap().attached += 1;
    }

    fn detach(&self) {
        let mut st = self.state.lock().unwrap();
        st.attached -= 1;
        self.cv.notify_all();
    }
}

/// Converts a duration to whole elapsed milliseconds (truncating).
pub fn as_millis(d: Duration) -> u64 {
    d.as_millis() as u64
}
