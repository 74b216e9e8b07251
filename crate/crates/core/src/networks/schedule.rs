use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant exponential decay: the rate is multiplied by a fixed
/// factor every `decay_interval` steps, with the factor chosen so the rate
/// equals `end_rate` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start_rate: f64,
    pub end_rate: f64,
    pub decay_interval: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(start_rate: f64, end_rate: f64, decay_interval: u64, total_steps: u64) -> Result<Self> {
        let s = Self {
            start_rate,
            end_rate,
            decay_interval,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end_rate > 0.0 && self.start_rate >= self.end_rate && self.start_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rates need start >= end > 0, got {} -> {}",
                self.start_rate, self.end_rate
            )));
        }
        if self.decay_interval == 0 {
            return Err(Error::InvalidArgument("decay interval must be positive".into()));
        }
        if self.decay_events() == 0 && self.start_rate != self.end_rate {
            return Err(Error::InvalidArgument(format!(
                "{} steps contain no decay event at interval {}",
                self.total_steps, self.decay_interval
            )));
        }
        Ok(())
    }

    /// Number of decays between step 0 and `total_steps`.
    pub fn decay_events(&self) -> u64 {
        self.total_steps / self.decay_interval
    }

    pub fn decay_factor(&self) -> f64 {
        match self.decay_events() {
            0 => 1.0,
            n => (self.end_rate / self.start_rate).powf(1.0 / n as f64),
        }
    }

    /// Rate in effect at `step`; steps past the horizon keep `end_rate`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let events = self.decay_events();
        let k = (step / self.decay_interval).min(events);
        if events == 0 || k == 0 {
            return self.start_rate;
        }
        if k == events {
            return self.end_rate;
        }
        self.start_rate * (self.end_rate / self.start_rate).powf(k as f64 / events as f64)
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    schedule.lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_paper_preset_schedule() {
        let s = LrSchedule::new(1e-2, 1e-5, 100, 25_000).unwrap();
        assert_eq!(s.lr_at(0), 1e-2);
        assert_eq!(s.lr_at(99), 1e-2);
        assert_eq!(s.lr_at(25_000), 1e-5);
        let expect = (1e-3f64).powf(1.0 / 250.0);
        assert!((s.decay_factor() - expect).abs() <= 1e-15);
        let r100 = s.lr_at(100);
        assert!((r100 - 1e-2 * expect).abs() <= 1e-17);
    }

    #[test]
    fn monotone_and_bounded() {
        let s = LrSchedule::new(1e-2, 1e-3, 100, 5_000).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=5_000 {
            let r = s.lr_at(step);
            assert!(r <= prev && r >= 1e-3 && r <= 1e-2);
            prev = r;
        }
        assert_eq!(s.lr_at(10_000), 1e-3);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(LrSchedule::new(1e-5, 1e-2, 100, 1000).is_err());
        assert!(LrSchedule::new(1e-2, 0.0, 100, 1000).is_err());
        assert!(LrSchedule::new(1e-2, 1e-3, 0, 1000).is_err());
        assert!(LrSchedule::new(1e-2, 1e-3, 100, 50).is_err());
        assert!(LrSchedule::new(1e-2, 1e-2, 100, 50).is_ok());
    }
}
