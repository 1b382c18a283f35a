use std::io::Write;
use std::path::{Path, PathBuf};

use super::run::{RadioSummary, RunOutputs};

pub const PHY_PACKETS: &str = "phy_packets.csv";
pub const RADIO_RECEPTIONS: &str = "radio_receptions.csv";
pub const ENERGY_EVENTS: &str = "energy_events.csv";

pub const PHY_PACKETS_HEADER: [&str; 12] = [
    "time_s",
    "sender_id",
    "frequency_hz",
    "sf",
    "bw_hz",
    "cr",
    "preamble_symbols",
    "airtime_s",
    "tx_power_dbm",
    "tx_x_m",
    "tx_y_m",
    "payload_hex",
];
pub const RADIO_RECEPTIONS_HEADER: [&str; 9] = [
    "time_s",
    "radio_id",
    "sender_id",
    "rssi_dbm",
    "snr_db",
    "delivered",
    "collided",
    "preamble_missed",
    "interrupted",
];
pub const ENERGY_EVENTS_HEADER: [&str; 4] = ["time_s", "radio_id", "power_w", "cumulative_j"];

/// Formats with 6 significant digits, like C's `%g`.
pub fn fmt_g6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // Exponent after rounding to 6 digits decides the notation.
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let fixed = format!("{x:.*}", (5 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_table<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl Iterator<Item = [String; N]>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()
}

/// Writes the three tables into `dir`, creating it if needed.
pub fn export_tables(out: &RunOutputs, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let t = |time: crate::kernel::SimTime| fmt_g6(time.as_secs(out.tick_s));
    let packets = dir.join(PHY_PACKETS);
    write_table(
        &packets,
        PHY_PACKETS_HEADER,
        out.packets.iter().map(|p| {
            [
                t(p.time),
                p.sender_id.clone(),
                p.config.frequency_hz.to_string(),
                p.config.sf.to_string(),
                p.config.bw_hz.to_string(),
                p.config.cr.to_string(),
                p.config.preamble_symbols.to_string(),
                fmt_g6(p.airtime_s),
                p.config.tx_power_dbm.to_string(),
                fmt_g6(p.tx_location.x),
                fmt_g6(p.tx_location.y),
                hex::encode(&p.payload),
            ]
        }),
    )?;
    let receptions = dir.join(RADIO_RECEPTIONS);
    write_table(
        &receptions,
        RADIO_RECEPTIONS_HEADER,
        out.receptions.iter().map(|r| {
            [
                t(r.time),
                r.radio_id.clone(),
                r.sender_id.clone(),
                fmt_g6(r.rssi_dbm),
                fmt_g6(r.snr_db),
                r.delivered.to_string(),
                r.collided.to_string(),
                r.preamble_missed.to_string(),
                r.interrupted.to_string(),
            ]
        }),
    )?;
    let energy = dir.join(ENERGY_EVENTS);
    write_table(
        &energy,
        ENERGY_EVENTS_HEADER,
        out.energy.iter().map(|e| {
            [
                t(e.event.time),
                e.radio_id.clone(),
                fmt_g6(e.event.power_w),
                fmt_g6(e.event.cumulative_j),
            ]
        }),
    )?;
    Ok(vec![packets, receptions, energy])
}

/// Plain-text summary table, one line per radio.
pub fn write_summary(summary: &[RadioSummary], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{:<16} {:>6} {:>9} {:>7} {:>12} {:>12}", "radio", "sent", "delivered", "pdr", "mean_snr_db", "energy_j")?;
    let opt = |v: Option<f64>| v.map(fmt_g6).unwrap_or_else(|| "-".into());
    for s in summary {
        writeln!(
            w,
            "{:<16} {:>6} {:>9} {:>7} {:>12} {:>12}",
            s.radio_id,
            s.sent,
            s.delivered,
            opt(s.pdr),
            opt(s.mean_snr_db),
            fmt_g6(s.energy_j)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::fmt_g6;

    #[test]
    fn six_significant_digits() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (999999.5, "1e+06"),
            (0.000123456789, "0.000123457"),
            (0.0001, "0.0001"),
            (0.0000123456789, "1.23457e-05"),
            (0.056576, "0.056576"),
            (86399.123456, "86399.1"),
            (6.789e-3, "0.006789"),
            (-107.12345, "-107.123"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g6(x), want, "{x}");
        }
    }
}
