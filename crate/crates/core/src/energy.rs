//! Per-radio power-state accounting.
//!
//! A [`PowerConsumer`] integrates a piecewise-constant power draw over
//! virtual time. Every call to [`PowerConsumer::set_power`] closes the open
//! interval and appends a [`PowerEvent`], even when the wattage is unchanged.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::kernel::{Kernel, SimTime};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnergyError {
    #[error("power draw must be a finite non-negative wattage, got {0}")]
    NegativePower(f64),
}

/// One power-state transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEvent {
    pub time: SimTime,
    pub power_w: f64,
    /// Energy consumed before this transition, in joules.
    pub cumulative_j: f64,
}

/// Radio power draw per state.
///
/// Defaults are representative sub-GHz transceiver figures: 1.5 µW sleep,
/// 1.6 mW standby, 14.4 mW receive and 120 mW transmitting at 14 dBm.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerProfile {
    pub sleep_w: f64,
    pub standby_w: f64,
    pub rx_w: f64,
    /// Transmit draw keyed by output power in dBm.
    pub tx_w: BTreeMap<i8, f64>,
}

impl Default for PowerProfile {
    fn default() -> Self {
        PowerProfile {
            sleep_w: 1.5e-6,
            standby_w: 1.6e-3,
            rx_w: 14.4e-3,
            tx_w: BTreeMap::from([(14, 0.120)]),
        }
    }
}

impl PowerProfile {
    pub fn validate(&self) -> Result<(), EnergyError> {
        for w in [self.sleep_w, self.standby_w, self.rx_w]
            .into_iter()
            .chain(self.tx_w.values().copied())
        {
            check_watts(w)?;
        }
        Ok(())
    }

    /// Transmit draw at `dbm`; uses the closest tabulated power level
    /// (the higher one on ties).
    pub fn tx_power_w(&self, dbm: i8) -> f64 {
        if let Some(w) = self.tx_w.get(&dbm) {
            return *w;
        }
        self.tx_w
            .iter()
            .min_by_key(|(level, _)| ((**level as i16 - dbm as i16).abs(), -(**level as i16)))
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }
}

fn check_watts(w: f64) -> Result<(), EnergyError> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(EnergyError::NegativePower(w))
    }
}

#[derive(Debug)]
struct ConsumerState {
    power_w: f64,
    since: SimTime,
    cumulative_j: f64,
    events: Vec<PowerEvent>,
}

/// Integrates power over virtual time. Clones share the same record.
#[derive(Clone)]
pub struct PowerConsumer {
    kernel: Kernel,
    state: Rc<RefCell<ConsumerState>>,
}

impl std::fmt::Debug for PowerConsumer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PowerConsumer")
            .field("power_w", &self.state.borrow().power_w)
            .field("cumulative_j", &self.state.borrow().cumulative_j)
            .finish()
    }
}

impl PowerConsumer {
    pub fn new(kernel: &Kernel) -> Self {
        PowerConsumer {
            kernel: kernel.clone(),
            state: Rc::new(RefCell::new(ConsumerState {
                power_w: 0.0,
                since: kernel.now(),
                cumulative_j: 0.0,
                events: Vec::new(),
            })),
        }
    }

    pub fn set_power(&self, power_w: f64) -> Result<(), EnergyError> {
        check_watts(power_w)?;
        let now = self.kernel.now();
        let tick = self.kernel.tick_duration();
        let mut st = self.state.borrow_mut();
        let dt = now.saturating_sub(st.since) as f64 * tick;
        st.cumulative_j += st.power_w * dt;
        st.power_w = power_w;
        st.since = now;
        let cumulative_j = st.cumulative_j;
        st.events.push(PowerEvent {
            time: now,
            power_w,
            cumulative_j,
        });
        Ok(())
    }

    pub fn power_w(&self) -> f64 {
        self.state.borrow().power_w
    }

    /// Energy through now, including the interval since the last transition.
    pub fn total_energy(&self) -> f64 {
        let st = self.state.borrow();
        let dt = self.kernel.now().saturating_sub(st.since) as f64 * self.kernel.tick_duration();
        st.cumulative_j + st.power_w * dt
    }

    pub fn events(&self) -> Vec<PowerEvent> {
        self.state.borrow().events.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SimConfig;
    use std::cell::Cell;

    fn kernel() -> Kernel {
        Kernel::new(SimConfig::default()).unwrap()
    }

    #[test]
    fn fresh_consumer_has_no_energy() {
        let k = kernel();
        let c = PowerConsumer::new(&k);
        assert_eq!(c.total_energy(), 0.0);
        assert!(c.events().is_empty());
    }

    #[test]
    fn rectangle_integral() {
        let k = kernel();
        let c = PowerConsumer::new(&k);
        let (k2, c2) = (k.clone(), c.clone());
        let mid = Rc::new(Cell::new(0.0));
        let m2 = mid.clone();
        k.spawn_root(async move {
            c2.set_power(0.1).unwrap();
            k2.sleep(1.0).await.unwrap();
            m2.set(c2.total_energy());
            k2.sleep(1.0).await.unwrap();
            c2.set_power(0.0).unwrap();
        })
        .unwrap();
        k.run(3.0).unwrap();
        assert!((mid.get() - 0.1).abs() < 1e-12);
        let ev = c.events();
        assert_eq!(ev.len(), 2);
        assert!((ev[1].cumulative_j - 0.2).abs() < 1e-12);
        assert!((c.total_energy() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn negative_power_rejected() {
        let c = PowerConsumer::new(&kernel());
        assert!(matches!(c.set_power(-0.5), Err(EnergyError::NegativePower(_))));
        assert!(c.set_power(f64::NAN).is_err());
        assert!(c.events().is_empty());
    }

    #[test]
    fn redundant_transitions_are_recorded() {
        let c = PowerConsumer::new(&kernel());
        c.set_power(0.01).unwrap();
        c.set_power(0.01).unwrap();
        assert_eq!(c.events().len(), 2);
    }

    #[test]
    fn tx_lookup_uses_nearest_level() {
        let mut p = PowerProfile::default();
        p.tx_w.insert(20, 0.4);
        assert_eq!(p.tx_power_w(14), 0.12);
        assert_eq!(p.tx_power_w(12), 0.12);
        assert_eq!(p.tx_power_w(17), 0.4);
        assert_eq!(p.tx_power_w(22), 0.4);
    }
}
