use super::KernelError;

/// Position of the virtual clock, in ticks since t=0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn as_secs(self, tick_duration: f64) -> f64 {
        self.0 as f64 * tick_duration
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, ticks: u64) -> SimTime {
        SimTime(self.0 + ticks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Seconds per tick.
    pub tick_duration: f64,
    pub seed: u64,
    /// Simulation end time in seconds.
    pub length: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick_duration: 1e-6,
            seed: 0,
            length: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.tick_duration.is_finite() && self.tick_duration > 0.0) {
            return Err(KernelError::Argument(format!(
                "tick_duration must be positive, got {}",
                self.tick_duration
            )));
        }
        if !(self.length.is_finite() && self.length >= 0.0) {
            return Err(KernelError::Argument(format!(
                "length must be non-negative, got {}",
                self.length
            )));
        }
        Ok(())
    }
}
