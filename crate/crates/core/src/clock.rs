//! Time sources and the periodic timer primitive.
//!
//! A [`Clock`] hides whether time is simulated (advanced explicitly by an
//! event loop) or real (read from the host's monotonic clock, optionally
//! rescaled). Executors poll [`Timer`]s against the clock; the timer itself
//! never sleeps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::registry::CallbackId;
use crate::time::{Duration, Instant};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    /// `advance` is only meaningful on a virtual clock.
    #[error("operation requires a virtual clock")]
    NotVirtual,
}

#[derive(Clone)]
enum ClockInner {
    Virtual(Arc<AtomicU64>),
    Wall {
        origin: std::time::Instant,
        /// Model nanoseconds per wall nanosecond (1/time_scale).
        inv_scale: f64,
    },
}

/// Shareable time source. Clones observe the same time.
#[derive(Clone)]
pub struct Clock {
    inner: ClockInner,
}

impl Clock {
    /// A simulated clock starting at the epoch. Advances only via
    /// [`Clock::advance`] (or the simulation event loop).
    pub fn virtual_clock() -> Self {
        Clock { inner: ClockInner::Virtual(Arc::new(AtomicU64::new(0))) }
    }

    /// A real-time clock anchored at the current host instant.
    pub fn wall_clock() -> Self {
        Self::wall_clock_scaled(1.0)
    }

    /// A real-time clock whose readings are divided by `time_scale`, so a
    /// run executed with all sleeps multiplied by `time_scale` reports
    /// unscaled model time.
    pub fn wall_clock_scaled(time_scale: f64) -> Self {
        assert!(time_scale > 0.0, "time scale must be positive");
        Clock {
            inner: ClockInner::Wall { origin: std::time::Instant::now(), inv_scale: 1.0 / time_scale },
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self.inner, ClockInner::Virtual(_))
    }

    /// Current time. Successive calls never decrease.
    pub fn now(&self) -> Instant {
        match &self.inner {
            ClockInner::Virtual(ns) => Instant::from_nanos(ns.load(Ordering::SeqCst)),
            ClockInner::Wall { origin, inv_scale } => {
                let wall = origin.elapsed().as_nanos() as f64;
                Instant::from_nanos((wall * inv_scale) as u64)
            }
        }
    }

    /// Move a virtual clock forward by `dt` and return the new time.
    pub fn advance(&self, dt: Duration) -> Result<Instant, ClockError> {
        match &self.inner {
            ClockInner::Virtual(ns) => {
                let prev = ns.fetch_add(dt.as_nanos(), Ordering::SeqCst);
                Ok(Instant::from_nanos(prev + dt.as_nanos()))
            }
            ClockInner::Wall { .. } => Err(ClockError::NotVirtual),
        }
    }

    /// Move a virtual clock forward to `t` if `t` is ahead of it.
    pub(crate) fn advance_to(&self, t: Instant) {
        if let ClockInner::Virtual(ns) = &self.inner {
            ns.fetch_max(t.as_nanos(), Ordering::SeqCst);
        }
    }
}

/// A fixed-rate periodic timer.
///
/// The deadline moves forward by exactly one period per acknowledged firing,
/// so firings stay countable even when dispatch lags: a late timer catches up
/// over subsequent dispatches rather than firing in bursts.
#[derive(Debug)]
pub struct Timer {
    id: CallbackId,
    period: Duration,
    next_deadline: AtomicU64,
}

impl Timer {
    pub fn new(id: CallbackId, period: Duration, first_deadline: Instant) -> Self {
        assert!(!period.is_zero(), "timer period must be positive");
        Timer { id, period, next_deadline: AtomicU64::new(first_deadline.as_nanos()) }
    }

    pub fn id(&self) -> CallbackId {
        self.id
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn next_deadline(&self) -> Instant {
        Instant::from_nanos(self.next_deadline.load(Ordering::SeqCst))
    }

    /// True iff `now` has reached the next deadline. Never mutates the timer.
    pub fn is_ready(&self, now: Instant) -> bool {
        now >= self.next_deadline()
    }

    /// Acknowledge one firing: the deadline advances by exactly one period.
    ///
    /// Returns the deadline that fired. Callers must hold exclusive claim of
    /// the owning callback (the executor's busy flag) while firing.
    pub(crate) fn fire(&self) -> Instant {
        let fired = self.next_deadline.fetch_add(self.period.as_nanos(), Ordering::SeqCst);
        Instant::from_nanos(fired)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn fresh_virtual_clock_reads_zero() {
        assert_eq!(Clock::virtual_clock().now(), Instant::EPOCH);
    }

    #[test]
    fn advance_moves_by_exactly_dt() {
        let clock = Clock::virtual_clock();
        assert_eq!(clock.advance(ms(5)).unwrap().as_nanos(), 5_000_000);
        assert_eq!(clock.now().as_nanos(), 5_000_000);
    }

    #[test]
    fn advance_zero_is_identity() {
        let clock = Clock::virtual_clock();
        clock.advance(ms(7)).unwrap();
        let before = clock.now();
        assert_eq!(clock.advance(Duration::ZERO).unwrap(), before);
    }

    #[test]
    fn advances_are_additive() {
        let a = Clock::virtual_clock();
        a.advance(ms(10)).unwrap();
        a.advance(ms(14)).unwrap();
        let b = Clock::virtual_clock();
        b.advance(ms(24)).unwrap();
        assert_eq!(a.now(), b.now());
    }

    #[test]
    fn wall_clock_tracks_host_time() {
        let clock = Clock::wall_clock();
        let t0 = clock.now();
        std::thread::sleep(std::time::Duration::from_millis(1));
        let t1 = clock.now();
        assert!(t1 - t0 >= ms(1), "elapsed {:?}", t1 - t0);
    }

    #[test]
    fn wall_clock_rejects_advance() {
        assert_eq!(Clock::wall_clock().advance(ms(1)), Err(ClockError::NotVirtual));
    }

    #[test]
    fn clones_share_time() {
        let clock = Clock::virtual_clock();
        let other = clock.clone();
        clock.advance(ms(3)).unwrap();
        assert_eq!(other.now().as_nanos(), 3_000_000);
    }

    #[test]
    fn timer_deadline_is_strict() {
        let t = Timer::new(CallbackId::from_raw(0), ms(250), Instant::from_nanos(250_000_000));
        assert!(!t.is_ready(Instant::from_nanos(249_000_000)));
        assert!(t.is_ready(Instant::from_nanos(250_000_000)));
        assert!(t.is_ready(Instant::from_nanos(600_000_000)));
    }

    #[test]
    fn is_ready_has_no_side_effects() {
        let t = Timer::new(CallbackId::from_raw(0), ms(250), Instant::from_nanos(250_000_000));
        let now = Instant::from_nanos(300_000_000);
        for _ in 0..10 {
            assert!(t.is_ready(now));
        }
        assert_eq!(t.next_deadline().as_nanos(), 250_000_000);
    }

    #[test]
    fn late_timer_catches_up_one_period_per_fire() {
        let t = Timer::new(CallbackId::from_raw(0), ms(250), Instant::from_nanos(250_000_000));
        let now = Instant::from_nanos(600_000_000);
        assert_eq!(t.fire().as_nanos(), 250_000_000);
        assert!(t.is_ready(now), "still one missed period pending");
        assert_eq!(t.fire().as_nanos(), 500_000_000);
        assert!(!t.is_ready(now));
    }

    #[test]
    #[should_panic(expected = "period must be positive")]
    fn zero_period_is_rejected() {
        let _ = Timer::new(CallbackId::from_raw(0), Duration::ZERO, Instant::EPOCH);
    }

    proptest! {
        #[test]
        fn now_is_monotonic(steps in proptest::collection::vec(0u64..1_000_000, 1..50)) {
            let clock = Clock::virtual_clock();
            let mut last = clock.now();
            for dt in steps {
                clock.advance(Duration::from_nanos(dt)).unwrap();
                let now = clock.now();
                prop_assert!(now >= last);
                last = now;
            }
        }

        #[test]
        fn fixed_rate_deadlines_never_drift(period_ns in 1u64..10_000_000, k in 1usize..200) {
            let period = Duration::from_nanos(period_ns);
            let first = Instant::from_nanos(period_ns);
            let t = Timer::new(CallbackId::from_raw(0), period, first);
            for _ in 0..k {
                t.fire();
            }
            prop_assert_eq!(t.next_deadline().as_nanos(), period_ns + k as u64 * period_ns);
        }
    }
}
