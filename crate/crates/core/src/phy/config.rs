use super::PhyError;

/// Position in metres.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Location {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Location { x, y, z }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

pub const BANDWIDTHS_HZ: [u32; 3] = [125_000, 250_000, 500_000];

/// LoRa modulation and transmit parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioConfig {
    pub frequency_hz: u32,
    /// Spreading factor, 7..=12.
    pub sf: u8,
    pub bw_hz: u32,
    /// Coding rate index 1..=4, meaning 4/(4+cr).
    pub cr: u8,
    pub preamble_symbols: u16,
    pub iq_inverted: bool,
    pub explicit_header: bool,
    pub crc_on: bool,
    /// Low data rate optimization. Always on for SF11/12 at 125 kHz
    /// regardless of this flag, see [`RadioConfig::ldro`].
    pub ldro: bool,
    pub tx_power_dbm: i8,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig::new(868_100_000, 7, 125_000)
    }
}

impl RadioConfig {
    pub const fn new(frequency_hz: u32, sf: u8, bw_hz: u32) -> Self {
        RadioConfig {
            frequency_hz,
            sf,
            bw_hz,
            cr: 1,
            preamble_symbols: 8,
            iq_inverted: false,
            explicit_header: true,
            crc_on: true,
            ldro: false,
            tx_power_dbm: 14,
        }
    }

    pub fn with_sf(mut self, sf: u8) -> Self {
        self.sf = sf;
        self
    }

    pub fn with_iq_inverted(mut self, inverted: bool) -> Self {
        self.iq_inverted = inverted;
        self
    }

    pub fn with_tx_power(mut self, dbm: i8) -> Self {
        self.tx_power_dbm = dbm;
        self
    }

    /// Effective LDRO setting.
    pub fn ldro(&self) -> bool {
        self.ldro || (self.sf >= 11 && self.bw_hz == 125_000)
    }

    pub fn symbol_time(&self) -> f64 {
        (1u32 << self.sf) as f64 / self.bw_hz as f64
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        let bad = |what: String| Err(PhyError::InvalidConfig(what));
        if !(7..=12).contains(&self.sf) {
            return bad(format!("spreading factor {} not in 7..=12", self.sf));
        }
        if !BANDWIDTHS_HZ.contains(&self.bw_hz) {
            return bad(format!("bandwidth {} Hz not one of 125000, 250000, 500000", self.bw_hz));
        }
        if !(1..=4).contains(&self.cr) {
            return bad(format!("coding rate index {} not in 1..=4", self.cr));
        }
        if self.preamble_symbols == 0 {
            return bad("preamble_symbols must be at least 1".into());
        }
        if self.frequency_hz == 0 {
            return bad("frequency must be positive".into());
        }
        Ok(())
    }
}

/// Whether a receiver tuned to `rx` can demodulate a transmission sent with
/// `tx`. Frequency, SF, bandwidth, coding rate and IQ polarity must agree.
pub fn config_match(tx: &RadioConfig, rx: &RadioConfig) -> bool {
    tx.frequency_hz == rx.frequency_hz
        && tx.sf == rx.sf
        && tx.bw_hz == rx.bw_hz
        && tx.cr == rx.cr
        && tx.iq_inverted == rx.iq_inverted
}
