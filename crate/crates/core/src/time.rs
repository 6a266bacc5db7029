//! Fixed-point simulated time.
//!
//! Every latency in the planner is an integer number of picoseconds. Leaf
//! costs (a collective, a block of FLOPs) are rounded once when they are
//! produced; everything downstream is integer addition, so the pipeline DP,
//! its brute-force oracle and the event simulator agree bit for bit.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Ticks per second.
pub const TICKS_PER_SEC: f64 = 1e12;

/// A non-negative duration measured in picoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Time(u64);

impl Time {
    pub const ZERO: Time = Time(0);
    pub const MAX: Time = Time(u64::MAX);

    pub const fn from_ticks(ticks: u64) -> Self {
        Time(ticks)
    }

    pub const fn ticks(self) -> u64 {
        self.0
    }

    /// Rounds to the nearest picosecond. Negative and NaN inputs clamp to zero;
    /// values beyond the representable range saturate.
    pub fn from_secs_f64(secs: f64) -> Self {
        if !(secs > 0.0) {
            return Time(0);
        }
        Time((secs * TICKS_PER_SEC).round() as u64)
    }

    pub fn from_secs(secs: u64) -> Self {
        Time(secs.saturating_mul(1_000_000_000_000))
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / TICKS_PER_SEC
    }

    pub fn saturating_sub(self, other: Time) -> Time {
        Time(self.0.saturating_sub(other.0))
    }
}

impl Add for Time {
    type Output = Time;
    fn add(self, rhs: Time) -> Time {
        Time(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for Time {
    fn add_assign(&mut self, rhs: Time) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl Sub for Time {
    type Output = Time;
    fn sub(self, rhs: Time) -> Time {
        Time(self.0 - rhs.0)
    }
}

impl Mul<u64> for Time {
    type Output = Time;
    fn mul(self, rhs: u64) -> Time {
        Time(self.0.saturating_mul(rhs))
    }
}

impl Sum for Time {
    fn sum<I: Iterator<Item = Time>>(iter: I) -> Time {
        iter.fold(Time::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Time> for Time {
    fn sum<I: Iterator<Item = &'a Time>>(iter: I) -> Time {
        iter.copied().sum()
    }
}

impl fmt::Display for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:012}s", self.0 / 1_000_000_000_000, self.0 % 1_000_000_000_000)
    }
}
