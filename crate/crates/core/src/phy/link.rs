use std::collections::BTreeMap;

use super::{Location, PhyError, BANDWIDTHS_HZ};

/// Log-distance path loss with optional lognormal shadowing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    pub pl0_db: f64,
    pub d0_m: f64,
    pub gamma: f64,
    pub sigma_db: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        PathLossParams {
            pl0_db: 127.41,
            d0_m: 40.0,
            gamma: 2.08,
            sigma_db: 0.0,
        }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<(), PhyError> {
        let ok = self.pl0_db.is_finite()
            && self.d0_m.is_finite()
            && self.d0_m > 0.0
            && self.gamma.is_finite()
            && self.gamma > 0.0
            && self.sigma_db.is_finite()
            && self.sigma_db >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(PhyError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Mean loss in dB at `distance_m`. Distances below `d0` use `d0`.
    pub fn loss_db(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(self.d0_m);
        self.pl0_db + 10.0 * self.gamma * (d / self.d0_m).log10()
    }
}

/// Receiver and capture-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionParams {
    pub capture_threshold_db: f64,
    /// Trailing preamble symbols that must be free of interference.
    pub critical_preamble_symbols: u16,
    pub noise_figure_db: f64,
    /// Sensitivity in dBm keyed by (sf, bandwidth Hz).
    pub sensitivity_dbm: BTreeMap<(u8, u32), f64>,
}

const SENSITIVITY_125K: [(u8, f64); 6] = [
    (7, -123.0),
    (8, -126.0),
    (9, -129.0),
    (10, -132.0),
    (11, -134.5),
    (12, -137.0),
];

impl Default for CollisionParams {
    fn default() -> Self {
        let mut sensitivity_dbm = BTreeMap::new();
        for (sf, s) in SENSITIVITY_125K {
            // Each doubling of bandwidth costs 3 dB.
            sensitivity_dbm.insert((sf, 125_000), s);
            sensitivity_dbm.insert((sf, 250_000), s + 3.0);
            sensitivity_dbm.insert((sf, 500_000), s + 6.0);
        }
        CollisionParams {
            capture_threshold_db: 6.0,
            critical_preamble_symbols: 5,
            noise_figure_db: 6.0,
            sensitivity_dbm,
        }
    }
}

impl CollisionParams {
    pub fn validate(&self) -> Result<(), PhyError> {
        if !(self.capture_threshold_db.is_finite() && self.capture_threshold_db >= 0.0) {
            return Err(PhyError::InvalidParams(format!(
                "capture_threshold_db must be >= 0, got {}",
                self.capture_threshold_db
            )));
        }
        if !self.noise_figure_db.is_finite() {
            return Err(PhyError::InvalidParams("noise_figure_db must be finite".into()));
        }
        for sf in 7..=12u8 {
            for bw in BANDWIDTHS_HZ {
                if !self.sensitivity_dbm.contains_key(&(sf, bw)) {
                    return Err(PhyError::InvalidParams(format!(
                        "sensitivity table lacks sf{sf} at {bw} Hz"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sensitivity(&self, sf: u8, bw_hz: u32) -> f64 {
        self.sensitivity_dbm
            .get(&(sf, bw_hz))
            .copied()
            .unwrap_or(f64::INFINITY)
    }
}

/// Thermal noise floor plus receiver noise figure, in dBm.
pub fn noise_floor_dbm(bw_hz: u32, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * (bw_hz as f64).log10() + noise_figure_db
}

/// Received power and SNR for one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub rssi_dbm: f64,
    pub snr_db: f64,
}

/// `shadow_db` is the shadowing sample for this packet/receiver pair.
pub fn link_budget(
    tx_power_dbm: f64,
    tx: &Location,
    rx: &Location,
    bw_hz: u32,
    params: &PathLossParams,
    noise_figure_db: f64,
    shadow_db: f64,
) -> LinkBudget {
    let rssi_dbm = tx_power_dbm - (params.loss_db(tx.distance(rx)) + shadow_db);
    LinkBudget {
        rssi_dbm,
        snr_db: rssi_dbm - noise_floor_dbm(bw_hz, noise_figure_db),
    }
}
