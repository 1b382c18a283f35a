//! The MAC command subset: LinkCheck, LinkADR and DevStatus.

use super::crypto::Direction;

pub const CID_LINK_CHECK: u8 = 0x02;
pub const CID_LINK_ADR: u8 = 0x03;
pub const CID_DEV_STATUS: u8 = 0x06;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacCommand {
    LinkCheckReq,
    /// `margin` is the demodulation margin in dB of the request as received.
    LinkCheckAns { margin: u8, gw_cnt: u8 },
    LinkAdrReq {
        data_rate: u8,
        tx_power: u8,
        ch_mask: u16,
        redundancy: u8,
    },
    LinkAdrAns {
        power_ack: bool,
        data_rate_ack: bool,
        channel_mask_ack: bool,
    },
    DevStatusReq,
    /// `margin` is a 6-bit signed SNR in dB (-32..=31).
    DevStatusAns { battery: u8, margin: i8 },
}

impl MacCommand {
    pub fn cid(&self) -> u8 {
        match self {
            MacCommand::LinkCheckReq | MacCommand::LinkCheckAns { .. } => CID_LINK_CHECK,
            MacCommand::LinkAdrReq { .. } | MacCommand::LinkAdrAns { .. } => CID_LINK_ADR,
            MacCommand::DevStatusReq | MacCommand::DevStatusAns { .. } => CID_DEV_STATUS,
        }
    }

    pub fn encoded_len(&self) -> usize {
        1 + match self {
            MacCommand::LinkCheckReq | MacCommand::DevStatusReq => 0,
            MacCommand::LinkAdrAns { .. } => 1,
            MacCommand::LinkCheckAns { .. } | MacCommand::DevStatusAns { .. } => 2,
            MacCommand::LinkAdrReq { .. } => 4,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.cid());
        match *self {
            MacCommand::LinkCheckReq | MacCommand::DevStatusReq => {}
            MacCommand::LinkCheckAns { margin, gw_cnt } => out.extend([margin, gw_cnt]),
            MacCommand::LinkAdrReq {
                data_rate,
                tx_power,
                ch_mask,
                redundancy,
            } => {
                out.push(data_rate << 4 | (tx_power & 0x0f));
                out.extend(ch_mask.to_le_bytes());
                out.push(redundancy);
            }
            MacCommand::LinkAdrAns {
                power_ack,
                data_rate_ack,
                channel_mask_ack,
            } => out.push((power_ack as u8) << 2 | (data_rate_ack as u8) << 1 | channel_mask_ack as u8),
            MacCommand::DevStatusAns { battery, margin } => {
                out.extend([battery, (margin.clamp(-32, 31) as u8) & 0x3f])
            }
        }
    }
}

pub fn encode_commands(cmds: &[MacCommand]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in cmds {
        c.encode_into(&mut out);
    }
    out
}

/// Parses a command list sent in `dir`. Parsing stops at the first unknown
/// or truncated command, since its length cannot be known; the offending
/// CID is returned alongside the commands read so far.
pub fn decode_commands(bytes: &[u8], dir: Direction) -> (Vec<MacCommand>, Option<u8>) {
    let mut cmds = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let cid = bytes[i];
        let rest = &bytes[i + 1..];
        let parsed = match (dir, cid) {
            (Direction::Up, CID_LINK_CHECK) => Some((MacCommand::LinkCheckReq, 0)),
            (Direction::Down, CID_LINK_CHECK) if rest.len() >= 2 => Some((
                MacCommand::LinkCheckAns {
                    margin: rest[0],
                    gw_cnt: rest[1],
                },
                2,
            )),
            (Direction::Down, CID_LINK_ADR) if rest.len() >= 4 => Some((
                MacCommand::LinkAdrReq {
                    data_rate: rest[0] >> 4,
                    tx_power: rest[0] & 0x0f,
                    ch_mask: u16::from_le_bytes([rest[1], rest[2]]),
                    redundancy: rest[3],
                },
                4,
            )),
            (Direction::Up, CID_LINK_ADR) if !rest.is_empty() => Some((
                MacCommand::LinkAdrAns {
                    power_ack: rest[0] & 0x04 != 0,
                    data_rate_ack: rest[0] & 0x02 != 0,
                    channel_mask_ack: rest[0] & 0x01 != 0,
                },
                1,
            )),
            (Direction::Down, CID_DEV_STATUS) => Some((MacCommand::DevStatusReq, 0)),
            (Direction::Up, CID_DEV_STATUS) if rest.len() >= 2 => {
                // Sign-extend the 6-bit margin.
                let m = ((rest[1] << 2) as i8) >> 2;
                Some((
                    MacCommand::DevStatusAns {
                        battery: rest[0],
                        margin: m,
                    },
                    2,
                ))
            }
            _ => None,
        };
        match parsed {
            Some((cmd, len)) => {
                cmds.push(cmd);
                i += 1 + len;
            }
            None => return (cmds, Some(cid)),
        }
    }
    (cmds, None)
}
