//! EU868-style regional parameters, reduced to a single uplink channel.

use crate::phy::RadioConfig;

use super::LorawanError;

pub const UPLINK_FREQUENCY_HZ: u32 = 868_100_000;
pub const RX2_FREQUENCY_HZ: u32 = 869_525_000;
pub const BANDWIDTH_HZ: u32 = 125_000;
/// Gateway downlink output power.
pub const DOWNLINK_POWER_DBM: i8 = 14;

/// Receive window timing and RX2 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxWindowParams {
    pub rx1_delay_s: f64,
    pub rx2_delay_s: f64,
    pub rx2_frequency_hz: u32,
    pub rx2_sf: u8,
    pub join_accept_delay1_s: f64,
    pub join_accept_delay2_s: f64,
}

impl Default for RxWindowParams {
    fn default() -> Self {
        RxWindowParams {
            rx1_delay_s: 1.0,
            rx2_delay_s: 2.0,
            rx2_frequency_hz: RX2_FREQUENCY_HZ,
            rx2_sf: 12,
            join_accept_delay1_s: 5.0,
            join_accept_delay2_s: 6.0,
        }
    }
}

impl RxWindowParams {
    pub fn validate(&self) -> Result<(), LorawanError> {
        let positive = [
            self.rx1_delay_s,
            self.rx2_delay_s,
            self.join_accept_delay1_s,
            self.join_accept_delay2_s,
        ]
        .iter()
        .all(|d| d.is_finite() && *d > 0.0);
        if !positive {
            return Err(LorawanError::Argument("receive delays must be positive".into()));
        }
        if self.rx2_delay_s <= self.rx1_delay_s || self.join_accept_delay2_s <= self.join_accept_delay1_s {
            return Err(LorawanError::Argument(
                "the second receive window must open after the first".into(),
            ));
        }
        if !(7..=12).contains(&self.rx2_sf) {
            return Err(LorawanError::Argument(format!("rx2_sf {} not in 7..=12", self.rx2_sf)));
        }
        Ok(())
    }

    pub fn rx2_config(&self) -> RadioConfig {
        RadioConfig::new(self.rx2_frequency_hz, self.rx2_sf, BANDWIDTH_HZ)
            .with_iq_inverted(true)
            .with_tx_power(DOWNLINK_POWER_DBM)
    }
}

/// DR0..=DR5 map to SF12..=SF7 at 125 kHz.
pub fn dr_to_sf(dr: u8) -> Option<u8> {
    (dr <= 5).then(|| 12 - dr)
}

pub fn sf_to_dr(sf: u8) -> Option<u8> {
    (7..=12).contains(&sf).then(|| 12 - sf)
}

/// TXPower index 0..=7 maps to 16 dBm minus 2 dB per step.
pub fn tx_power_dbm(index: u8) -> Option<i8> {
    (index <= 7).then(|| 16 - 2 * index as i8)
}

pub fn tx_power_index(dbm: i8) -> u8 {
    ((16 - dbm.clamp(2, 16)) / 2) as u8
}

/// Lowest SNR at which a frame can be demodulated.
pub fn demod_floor_db(sf: u8) -> f64 {
    match sf {
        7 => -7.5,
        8 => -10.0,
        9 => -12.5,
        10 => -15.0,
        11 => -17.5,
        _ => -20.0,
    }
}

pub fn uplink_config(sf: u8, tx_power_dbm: i8) -> RadioConfig {
    RadioConfig::new(UPLINK_FREQUENCY_HZ, sf, BANDWIDTH_HZ).with_tx_power(tx_power_dbm)
}

/// RX1 mirrors the uplink channel and data rate with inverted IQ.
pub fn rx1_config(uplink: &RadioConfig) -> RadioConfig {
    uplink.with_iq_inverted(true).with_tx_power(DOWNLINK_POWER_DBM)
}

/// How long a receive window stays open waiting for a preamble.
pub fn window_timeout(cfg: &RadioConfig) -> f64 {
    (cfg.preamble_symbols as f64 + 4.25) * cfg.symbol_time()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_rates() {
        assert_eq!(dr_to_sf(0), Some(12));
        assert_eq!(dr_to_sf(5), Some(7));
        assert_eq!(dr_to_sf(6), None);
        assert_eq!(sf_to_dr(9), Some(3));
        assert_eq!(tx_power_dbm(1), Some(14));
        assert_eq!(tx_power_index(14), 1);
    }

    #[test]
    fn defaults_valid() {
        RxWindowParams::default().validate().unwrap();
        let bad = RxWindowParams {
            rx2_delay_s: 0.5,
            ..RxWindowParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
