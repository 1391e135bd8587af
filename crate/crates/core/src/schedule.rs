//! Linear anneal of the interpolation factor γ between `S_start` and
//! `S_final`. Steps count optimizer updates within one task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub start: usize,
    pub end: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(start: usize, end: usize, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(start <= end && end <= total_steps) {
            return Err(Error::Config(format!(
                "schedule requires 0 <= start ({start}) <= end ({end}) <= total ({total_steps})"
            )));
        }
        Ok(Schedule {
            start,
            end,
            total_steps,
        })
    }

    /// `S_start = ⌊start_frac·total⌋`, `S_final = ⌊end_frac·total⌋`.
    pub fn from_fractions(total_steps: usize, start_frac: f64, end_frac: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start_frac) || !(0.0..=1.0).contains(&end_frac) || start_frac > end_frac {
            return Err(Error::Config(format!(
                "schedule fractions must satisfy 0 <= start ({start_frac}) <= end ({end_frac}) <= 1"
            )));
        }
        let start = (start_frac * total_steps as f64).floor() as usize;
        let end = (end_frac * total_steps as f64).floor() as usize;
        Self::new(start, end, total_steps)
    }

    /// `clip((s − S_start)/(S_final − S_start), 0, 1)`; a step at `S_start`
    /// when the interval is empty.
    pub fn gamma(&self, step: usize) -> f64 {
        if self.start == self.end {
            return if step < self.start { 0.0 } else { 1.0 };
        }
        let ratio = (step as f64 - self.start as f64) / (self.end - self.start) as f64;
        ratio.clamp(0.0, 1.0)
    }
}
