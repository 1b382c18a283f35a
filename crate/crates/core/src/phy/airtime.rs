use super::{PhyError, RadioConfig};

pub const MAX_PAYLOAD: usize = 255;

/// Time on air of one LoRa frame, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Airtime {
    pub symbol: f64,
    pub preamble: f64,
    pub payload_symbols: u32,
    pub total: f64,
}

/// Semtech closed-form time on air.
pub fn airtime(config: &RadioConfig, payload_len: usize) -> Result<Airtime, PhyError> {
    if payload_len > MAX_PAYLOAD {
        return Err(PhyError::PayloadTooLong(payload_len));
    }
    config.validate()?;
    let sf = config.sf as i64;
    let de = config.ldro() as i64;
    let crc = config.crc_on as i64;
    let ih = (!config.explicit_header) as i64;
    let num = 8 * payload_len as i64 - 4 * sf + 28 + 16 * crc - 20 * ih;
    let den = 4 * (sf - 2 * de);
    // Integer ceiling for a possibly negative numerator.
    let blocks = if num <= 0 { 0 } else { (num + den - 1) / den };
    let payload_symbols = 8 + (blocks * (config.cr as i64 + 4)) as u32;
    let symbol = config.symbol_time();
    let preamble = (config.preamble_symbols as f64 + 4.25) * symbol;
    Ok(Airtime {
        symbol,
        preamble,
        payload_symbols,
        total: preamble + payload_symbols as f64 * symbol,
    })
}
