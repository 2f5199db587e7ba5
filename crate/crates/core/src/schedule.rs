//! Epoch timing: the four sub-intervals, the disclosure delay, and the
//! admissibility rule that makes delayed key disclosure safe under loose
//! clock synchronization.
//!
//! A broadcast authenticated with the session key of sub-interval `i` may
//! only be accepted while that key cannot yet be public knowledge. With
//! `disclosure_time(i) = end(T_i) + d` and a per-node clock error bounded by
//! `sync_error`, the receiver accepts iff
//!
//! ```text
//! local_arrival + sync_error < disclosure_time(i)
//! ```
//!
//! The inequality is strict: a packet landing exactly on the boundary is
//! rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation and protocol timestamps, in microseconds.
pub type Micros = u64;

pub const MS: Micros = 1_000;
pub const SEC: Micros = 1_000_000;

/// Number of sub-intervals per epoch.
pub const SUB_INTERVALS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("timestamp {0} precedes the schedule start")]
    BeforeSchedule(Micros),
    #[error("sub-intervals must be ordered, non-overlapping, and inside the epoch: {0}")]
    InvalidLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubInterval {
    /// Offset from the epoch start, µs.
    pub start_offset: Micros,
    pub duration: Micros,
}

impl SubInterval {
    pub fn end_offset(&self) -> Micros {
        self.start_offset + self.duration
    }
}

/// The periodic epoch layout. Epoch `e` occupies
/// `[epoch_start + e*epoch_duration, epoch_start + (e+1)*epoch_duration)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub epoch_start: Micros,
    /// Full epoch duration (must not exceed the assumed physical-attack time).
    pub epoch_duration: Micros,
    pub intervals: [SubInterval; SUB_INTERVALS],
    /// Disclosure delay `d` after a sub-interval ends.
    pub disclosure_delay: Micros,
    /// Upper bound on any node's clock error.
    pub sync_error: Micros,
}

/// Where a timestamp falls: which epoch, and which sub-interval if any
/// (`None` = the idle tail between the last sub-interval and the next epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub epoch: u64,
    pub interval: Option<u8>,
}

impl EpochSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let mut prev_end = 0;
        for (i, iv) in self.intervals.iter().enumerate() {
            if iv.duration == 0 {
                return Err(ScheduleError::InvalidLayout(format!(
                    "interval {i} has zero duration"
                )));
            }
            if iv.start_offset < prev_end {
                return Err(ScheduleError::InvalidLayout(format!(
                    "interval {i} overlaps its predecessor"
                )));
            }
            prev_end = iv.end_offset();
        }
        if prev_end > self.epoch_duration {
            return Err(ScheduleError::InvalidLayout(
                "sub-intervals extend past the epoch".into(),
            ));
        }
        // A session key must stay undisclosable while its successor interval
        // is still broadcasting, otherwise the layout defeats itself.
        if self.sync_error >= self.disclosure_delay {
            return Err(ScheduleError::InvalidLayout(
                "sync_error must be below disclosure_delay".into(),
            ));
        }
        Ok(())
    }

    pub fn epoch_start_of(&self, epoch: u64) -> Micros {
        self.epoch_start + epoch * self.epoch_duration
    }

    /// Absolute bounds of sub-interval `i` of `epoch`.
    pub fn interval_bounds(&self, epoch: u64, i: u8) -> (Micros, Micros) {
        let iv = &self.intervals[i as usize];
        let base = self.epoch_start_of(epoch);
        (base + iv.start_offset, base + iv.end_offset())
    }

    /// Earliest instant the sub-interval-`i` session key of `epoch` may be
    /// public: the interval's end plus the disclosure delay.
    pub fn disclosure_time(&self, epoch: u64, i: u8) -> Micros {
        let (_, end) = self.interval_bounds(epoch, i);
        end + self.disclosure_delay
    }

    /// Locate `t` in the schedule.
    pub fn current_interval(&self, t: Micros) -> Result<Slot, ScheduleError> {
        if t < self.epoch_start {
            return Err(ScheduleError::BeforeSchedule(t));
        }
        let off = t - self.epoch_start;
        let epoch = off / self.epoch_duration;
        let within = off % self.epoch_duration;
        let interval = self
            .intervals
            .iter()
            .position(|iv| within >= iv.start_offset && within < iv.end_offset())
            .map(|i| i as u8);
        Ok(Slot { epoch, interval })
    }

    /// Delayed-disclosure admissibility for a packet MAC'd with the session
    /// key of `(epoch, key_interval)` arriving at `arrival` (true time);
    /// the receiver judges with its own skewed clock.
    pub fn packet_admissible(
        &self,
        clock: &LocalClock,
        epoch: u64,
        key_interval: u8,
        arrival: Micros,
    ) -> bool {
        let local = clock.local(arrival);
        local + self.sync_error < self.disclosure_time(epoch, key_interval)
    }

    /// Check that a disclosed key is not arriving implausibly early, i.e.
    /// before its scheduled disclosure could have happened even accounting
    /// for clock error.
    pub fn key_arrival_plausible(
        &self,
        clock: &LocalClock,
        epoch: u64,
        key_interval: u8,
        arrival: Micros,
    ) -> bool {
        let local = clock.local(arrival);
        local + self.sync_error >= self.disclosure_time(epoch, key_interval)
    }
}

/// A node's loosely synchronized clock: a fixed skew within ±sync_error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalClock {
    pub skew: i64,
}

impl LocalClock {
    pub const TRUE: LocalClock = LocalClock { skew: 0 };

    pub fn new(skew: i64) -> LocalClock {
        LocalClock { skew }
    }

    /// This node's reading of true time `t`.
    pub fn local(&self, t: Micros) -> Micros {
        t.saturating_add_signed(self.skew)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> EpochSchedule {
        let s = EpochSchedule {
            epoch_start: 1_000 * MS,
            epoch_duration: 2_000 * MS,
            intervals: [
                SubInterval { start_offset: 0, duration: 200 * MS },
                SubInterval { start_offset: 200 * MS, duration: 200 * MS },
                SubInterval { start_offset: 440 * MS, duration: 300 * MS },
                SubInterval { start_offset: 740 * MS, duration: 800 * MS },
            ],
            disclosure_delay: 30 * MS,
            sync_error: 10 * MS,
        };
        s.validate().unwrap();
        s
    }

    #[test]
    fn boundaries_map_to_intervals() {
        let s = sched();
        assert_eq!(
            s.current_interval(1_000 * MS).unwrap(),
            Slot { epoch: 0, interval: Some(0) }
        );
        assert_eq!(
            s.current_interval(3_000 * MS).unwrap(),
            Slot { epoch: 1, interval: Some(0) }
        );
        // Middle of the third sub-interval.
        assert_eq!(
            s.current_interval(1_000 * MS + 590 * MS).unwrap(),
            Slot { epoch: 0, interval: Some(2) }
        );
        // Gap between interval 1 and 2 is idle.
        assert_eq!(
            s.current_interval(1_000 * MS + 420 * MS).unwrap(),
            Slot { epoch: 0, interval: None }
        );
        assert_eq!(
            s.current_interval(0),
            Err(ScheduleError::BeforeSchedule(0))
        );
    }

    #[test]
    fn admissibility_boundary_is_strict() {
        let s = sched();
        let clock = LocalClock::TRUE;
        // Key of sub-interval 1 (the attestation-request key): disclosure at
        // end(T_1) + d = 1000 + 400 + 30 = 1430 ms.
        let disc = s.disclosure_time(0, 1);
        assert_eq!(disc, 1_430 * MS);
        // Arriving during sub-interval 1: admissible.
        assert!(s.packet_admissible(&clock, 0, 1, 1_300 * MS));
        // Arriving after disclosure: rejected.
        assert!(!s.packet_admissible(&clock, 0, 1, disc + MS));
        // Exactly at disclosure_time - sync_error: rejected (strict).
        assert!(!s.packet_admissible(&clock, 0, 1, disc - s.sync_error));
        // One microsecond earlier: admissible.
        assert!(s.packet_admissible(&clock, 0, 1, disc - s.sync_error - 1));
    }

    #[test]
    fn skewed_clock_shifts_judgment() {
        let s = sched();
        let fast = LocalClock::new(10_000); // +10 ms, at the error bound
        let disc = s.disclosure_time(0, 0);
        // True arrival that a true clock would still admit, but the fast
        // clock must reject: the fast node cannot rule out disclosure.
        let t = disc - s.sync_error - 5 * MS;
        assert!(s.packet_admissible(&LocalClock::TRUE, 0, 0, t));
        assert!(!s.packet_admissible(&fast, 0, 0, t));
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut s = sched();
        s.intervals[2].start_offset = 100 * MS;
        assert!(s.validate().is_err());
        let mut s = sched();
        s.intervals[3].duration = 10_000 * MS;
        assert!(s.validate().is_err());
        let mut s = sched();
        s.sync_error = s.disclosure_delay;
        assert!(s.validate().is_err());
    }

    proptest! {
        // The TESLA safety property: whatever the skew within bounds, no
        // packet is admitted at or after the instant its key could be known.
        #[test]
        fn never_admits_after_possible_disclosure(
            skew in -10_000i64..=10_000,
            arrival_off in 0u64..4_000_000,
            interval in 0u8..4,
        ) {
            let s = sched();
            let clock = LocalClock::new(skew);
            let arrival = s.epoch_start + arrival_off;
            if s.packet_admissible(&clock, 0, interval, arrival) {
                // True disclosure can only happen at disclosure_time or later;
                // admission implies arrival strictly precedes it.
                prop_assert!(arrival < s.disclosure_time(0, interval));
            }
        }

        #[test]
        fn current_interval_monotone(t1 in 1_000_000u64..20_000_000,
                                     dt in 0u64..5_000_000) {
            let s = sched();
            let a = s.current_interval(t1).unwrap();
            let b = s.current_interval(t1 + dt).unwrap();
            prop_assert!(b.epoch > a.epoch
                || (b.epoch == a.epoch
                    && b.interval.unwrap_or(SUB_INTERVALS as u8) >= a.interval.unwrap_or(0)));
        }
    }
}
