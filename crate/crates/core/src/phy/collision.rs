//! Capture model.
//!
//! A packet survives at a receiver if, from the start of its last
//! `critical_preamble_symbols` preamble symbols until its end, every
//! overlapping co-channel packet is at least `capture_threshold_db` weaker.
//! Overlap confined to the earlier preamble symbols is harmless.

use super::CollisionParams;

/// One packet as seen by one receiver. Times are ticks; intervals are
/// half-open, so a packet ending at tick `t` does not overlap one starting
/// at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub tx_start: u64,
    /// First tick of the critical preamble section.
    pub critical_start: u64,
    pub preamble_end: u64,
    pub rx_end: u64,
    pub rssi_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Received,
    LostPreamble,
    LostPayload,
}

impl Outcome {
    pub fn is_received(self) -> bool {
        self == Outcome::Received
    }
}

/// Decides the fate of `candidate` given the co-channel packets that were on
/// air at the same receiver. Packets on a different SF or frequency must not
/// be passed in.
pub fn resolve_collision(
    candidate: &Arrival,
    interferers: &[Arrival],
    params: &CollisionParams,
) -> Outcome {
    let window_start = candidate.critical_start;
    let window_end = candidate.rx_end;
    let first_violation = interferers
        .iter()
        .filter(|i| i.tx_start < window_end && window_start < i.rx_end)
        .filter(|i| candidate.rssi_dbm - i.rssi_dbm < params.capture_threshold_db)
        .map(|i| i.tx_start.max(window_start))
        .min();
    match first_violation {
        None => Outcome::Received,
        Some(t) if t < candidate.preamble_end => Outcome::LostPreamble,
        Some(_) => Outcome::LostPayload,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrival(start: u64, rssi: f64) -> Arrival {
        Arrival {
            tx_start: start,
            critical_start: start + 8,
            preamble_end: start + 13,
            rx_end: start + 40,
            rssi_dbm: rssi,
        }
    }

    #[test]
    fn stronger_packet_captures() {
        let p = CollisionParams::default();
        let (a, b) = (arrival(0, -80.0), arrival(0, -90.0));
        assert_eq!(resolve_collision(&a, &[b], &p), Outcome::Received);
        assert_eq!(resolve_collision(&b, &[a], &p), Outcome::LostPreamble);
    }

    #[test]
    fn late_interferer_breaks_payload() {
        let p = CollisionParams::default();
        let (a, b) = (arrival(0, -90.0), arrival(20, -90.0));
        assert_eq!(resolve_collision(&a, &[b], &p), Outcome::LostPayload);
    }

    #[test]
    fn touching_intervals_do_not_overlap() {
        let p = CollisionParams::default();
        let (a, b) = (arrival(0, -90.0), arrival(40, -90.0));
        assert_eq!(resolve_collision(&a, &[b], &p), Outcome::Received);
        assert_eq!(resolve_collision(&b, &[a], &p), Outcome::Received);
    }
}
