//! LoRaWAN 1.0.4 PHYPayload codec. Multi-byte fields are little-endian.

use super::crypto::{self, Direction, Key, Mic};
use super::LorawanError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MType {
    JoinRequest,
    JoinAccept,
    UnconfirmedDataUp,
    UnconfirmedDataDown,
    ConfirmedDataUp,
    ConfirmedDataDown,
}

impl MType {
    pub fn bits(self) -> u8 {
        match self {
            MType::JoinRequest => 0,
            MType::JoinAccept => 1,
            MType::UnconfirmedDataUp => 2,
            MType::UnconfirmedDataDown => 3,
            MType::ConfirmedDataUp => 4,
            MType::ConfirmedDataDown => 5,
        }
    }

    pub fn from_bits(b: u8) -> Option<MType> {
        Some(match b {
            0 => MType::JoinRequest,
            1 => MType::JoinAccept,
            2 => MType::UnconfirmedDataUp,
            3 => MType::UnconfirmedDataDown,
            4 => MType::ConfirmedDataUp,
            5 => MType::ConfirmedDataDown,
            _ => return None,
        })
    }

    pub fn mhdr(self) -> u8 {
        self.bits() << 5
    }

    pub fn is_data(self) -> bool {
        !matches!(self, MType::JoinRequest | MType::JoinAccept)
    }

    pub fn is_confirmed(self) -> bool {
        matches!(self, MType::ConfirmedDataUp | MType::ConfirmedDataDown)
    }

    pub fn direction(self) -> Direction {
        match self {
            MType::JoinRequest | MType::UnconfirmedDataUp | MType::ConfirmedDataUp => Direction::Up,
            _ => Direction::Down,
        }
    }
}

/// FCtrl bits other than FOptsLen, which is derived from the FOpts field.
/// Bit 4 is FPending on downlinks and ClassB on uplinks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FCtrl {
    pub adr: bool,
    pub adr_ack_req: bool,
    pub ack: bool,
    pub fpending: bool,
}

impl FCtrl {
    fn encode(&self, fopts_len: usize) -> u8 {
        (self.adr as u8) << 7
            | (self.adr_ack_req as u8) << 6
            | (self.ack as u8) << 5
            | (self.fpending as u8) << 4
            | fopts_len as u8
    }

    fn decode(b: u8) -> (FCtrl, usize) {
        (
            FCtrl {
                adr: b & 0x80 != 0,
                adr_ack_req: b & 0x40 != 0,
                ack: b & 0x20 != 0,
                fpending: b & 0x10 != 0,
            },
            (b & 0x0f) as usize,
        )
    }
}

/// A data frame as it appears on the wire: `frm_payload` is ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub mtype: MType,
    pub dev_addr: u32,
    pub fctrl: FCtrl,
    pub fcnt: u16,
    pub fopts: Vec<u8>,
    pub fport: Option<u8>,
    pub frm_payload: Vec<u8>,
    pub mic: Mic,
}

/// Everything needed to build a data frame; the payload is plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrameSpec<'a> {
    pub mtype: MType,
    pub dev_addr: u32,
    pub fctrl: FCtrl,
    pub fcnt: u32,
    pub fopts: &'a [u8],
    pub fport: Option<u8>,
    pub payload: &'a [u8],
}

impl DataFrame {
    /// Encrypts the payload (with the network key on port 0, the
    /// application key otherwise) and computes the MIC.
    pub fn seal(spec: &DataFrameSpec<'_>, nwk_skey: &Key, app_skey: &Key) -> Result<DataFrame, LorawanError> {
        if !spec.mtype.is_data() {
            return Err(LorawanError::Argument("not a data frame type".into()));
        }
        if spec.fopts.len() > 15 {
            return Err(LorawanError::Length {
                field: "FOpts",
                len: spec.fopts.len(),
            });
        }
        if !spec.payload.is_empty() && spec.fport.is_none() {
            return Err(LorawanError::Argument("payload requires an FPort".into()));
        }
        if spec.fport == Some(0) && !spec.fopts.is_empty() {
            return Err(LorawanError::Argument(
                "MAC commands cannot be in both FOpts and an FPort 0 payload".into(),
            ));
        }
        let dir = spec.mtype.direction();
        let key = if spec.fport == Some(0) { nwk_skey } else { app_skey };
        let mut frame = DataFrame {
            mtype: spec.mtype,
            dev_addr: spec.dev_addr,
            fctrl: spec.fctrl,
            fcnt: spec.fcnt as u16,
            fopts: spec.fopts.to_vec(),
            fport: spec.fport,
            frm_payload: crypto::crypt_payload(key, spec.payload, dir, spec.dev_addr, spec.fcnt),
            mic: [0; 4],
        };
        frame.mic = crypto::compute_mic(nwk_skey, &frame.mic_input(), dir, spec.dev_addr, spec.fcnt);
        Ok(frame)
    }

    pub fn direction(&self) -> Direction {
        self.mtype.direction()
    }

    /// MHDR through FRMPayload: the bytes covered by the MIC.
    pub fn mic_input(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.fopts.len() + 1 + self.frm_payload.len());
        out.push(self.mtype.mhdr());
        out.extend_from_slice(&self.dev_addr.to_le_bytes());
        out.push(self.fctrl.encode(self.fopts.len()));
        out.extend_from_slice(&self.fcnt.to_le_bytes());
        out.extend_from_slice(&self.fopts);
        if let Some(port) = self.fport {
            out.push(port);
            out.extend_from_slice(&self.frm_payload);
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.mic_input();
        out.extend_from_slice(&self.mic);
        out
    }

    pub fn verify_mic(&self, nwk_skey: &Key, fcnt: u32) -> bool {
        crypto::compute_mic(nwk_skey, &self.mic_input(), self.direction(), self.dev_addr, fcnt)
            == self.mic
    }

    pub fn decrypt_payload(&self, key: &Key, fcnt: u32) -> Vec<u8> {
        crypto::crypt_payload(key, &self.frm_payload, self.direction(), self.dev_addr, fcnt)
    }

    fn decode_body(mtype: MType, b: &[u8]) -> Result<DataFrame, LorawanError> {
        // MHDR(1) DevAddr(4) FCtrl(1) FCnt(2) ... MIC(4)
        if b.len() < 12 {
            return Err(LorawanError::Length {
                field: "FHDR",
                len: b.len(),
            });
        }
        let (fctrl, fopts_len) = FCtrl::decode(b[5]);
        let body_end = b.len() - 4;
        let fopts_end = 8 + fopts_len;
        if fopts_end > body_end {
            return Err(LorawanError::Decode {
                field: "FOpts",
                reason: format!("FOptsLen {fopts_len} exceeds the {} bytes available", body_end - 8),
            });
        }
        let (fport, frm_payload) = if fopts_end < body_end {
            let port = b[fopts_end];
            if port > 223 {
                return Err(LorawanError::Decode {
                    field: "FPort",
                    reason: format!("port {port} outside 0..=223"),
                });
            }
            if port == 0 && fopts_len > 0 {
                return Err(LorawanError::Decode {
                    field: "FPort",
                    reason: "port 0 payload together with FOpts".into(),
                });
            }
            (Some(port), b[fopts_end + 1..body_end].to_vec())
        } else {
            (None, Vec::new())
        };
        Ok(DataFrame {
            mtype,
            dev_addr: u32::from_le_bytes(b[1..5].try_into().unwrap()),
            fctrl,
            fcnt: u16::from_le_bytes([b[6], b[7]]),
            fopts: b[8..fopts_end].to_vec(),
            fport,
            frm_payload,
            mic: b[body_end..].try_into().unwrap(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinRequest {
    pub join_eui: u64,
    pub dev_eui: u64,
    pub dev_nonce: u16,
    pub mic: Mic,
}

impl JoinRequest {
    pub const LEN: usize = 23;

    pub fn seal(join_eui: u64, dev_eui: u64, dev_nonce: u16, app_key: &Key) -> JoinRequest {
        let mut jr = JoinRequest {
            join_eui,
            dev_eui,
            dev_nonce,
            mic: [0; 4],
        };
        jr.mic = crypto::join_mic(app_key, &jr.mic_input());
        jr
    }

    pub fn mic_input(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19);
        out.push(MType::JoinRequest.mhdr());
        out.extend_from_slice(&self.join_eui.to_le_bytes());
        out.extend_from_slice(&self.dev_eui.to_le_bytes());
        out.extend_from_slice(&self.dev_nonce.to_le_bytes());
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.mic_input();
        out.extend_from_slice(&self.mic);
        out
    }

    pub fn verify_mic(&self, app_key: &Key) -> bool {
        crypto::join_mic(app_key, &self.mic_input()) == self.mic
    }
}

/// Decrypted join-accept fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinAccept {
    /// 24-bit value.
    pub app_nonce: u32,
    /// 24-bit value.
    pub net_id: u32,
    pub dev_addr: u32,
    pub dl_settings: u8,
    /// RX1 delay in seconds; 0 means 1.
    pub rx_delay: u8,
    pub cflist: Option<[u8; 16]>,
}

impl JoinAccept {
    fn fields(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28);
        out.extend_from_slice(&self.app_nonce.to_le_bytes()[..3]);
        out.extend_from_slice(&self.net_id.to_le_bytes()[..3]);
        out.extend_from_slice(&self.dev_addr.to_le_bytes());
        out.push(self.dl_settings);
        out.push(self.rx_delay);
        if let Some(cf) = &self.cflist {
            out.extend_from_slice(cf);
        }
        out
    }

    /// Full wire frame: MHDR followed by the encrypted body.
    pub fn seal(&self, app_key: &Key) -> Vec<u8> {
        let mhdr = MType::JoinAccept.mhdr();
        let mut body = self.fields();
        let mut mic_input = vec![mhdr];
        mic_input.extend_from_slice(&body);
        body.extend_from_slice(&crypto::join_mic(app_key, &mic_input));
        let mut out = vec![mhdr];
        out.extend(crypto::join_accept_encrypt(app_key, &body).expect("16 or 32 bytes"));
        out
    }

    /// Decrypts and checks a wire join-accept.
    pub fn open(wire: &[u8], app_key: &Key) -> Result<JoinAccept, LorawanError> {
        if wire.first().map(|b| b >> 5) != Some(MType::JoinAccept.bits()) {
            return Err(LorawanError::Decode {
                field: "MHDR",
                reason: "not a join accept".into(),
            });
        }
        let body = crypto::join_accept_decrypt(app_key, &wire[1..])?;
        let (fields, mic) = body.split_at(body.len() - 4);
        let mut mic_input = vec![wire[0]];
        mic_input.extend_from_slice(fields);
        if crypto::join_mic(app_key, &mic_input) != mic {
            return Err(LorawanError::Mic);
        }
        let u24 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], 0]);
        Ok(JoinAccept {
            app_nonce: u24(&fields[0..3]),
            net_id: u24(&fields[3..6]),
            dev_addr: u32::from_le_bytes(fields[6..10].try_into().unwrap()),
            dl_settings: fields[10],
            rx_delay: fields[11],
            cflist: (fields.len() == 28).then(|| fields[12..28].try_into().unwrap()),
        })
    }
}

/// A decoded PHYPayload. Join accepts stay encrypted until opened with
/// the device's root key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PhyPayload {
    JoinRequest(JoinRequest),
    JoinAccept(Vec<u8>),
    Data(DataFrame),
}

impl PhyPayload {
    pub fn decode(b: &[u8]) -> Result<PhyPayload, LorawanError> {
        let Some(&mhdr) = b.first() else {
            return Err(LorawanError::Length { field: "MHDR", len: 0 });
        };
        if mhdr & 0x03 != 0 {
            return Err(LorawanError::Decode {
                field: "MHDR",
                reason: format!("unsupported major version {}", mhdr & 0x03),
            });
        }
        if mhdr & 0x1c != 0 {
            return Err(LorawanError::Decode {
                field: "MHDR",
                reason: format!("RFU bits set in {mhdr:#04x}"),
            });
        }
        let mtype = MType::from_bits(mhdr >> 5).ok_or_else(|| LorawanError::Decode {
            field: "MHDR",
            reason: format!("unsupported message type {}", mhdr >> 5),
        })?;
        match mtype {
            MType::JoinRequest => {
                if b.len() != JoinRequest::LEN {
                    return Err(LorawanError::Length {
                        field: "JoinRequest",
                        len: b.len(),
                    });
                }
                Ok(PhyPayload::JoinRequest(JoinRequest {
                    join_eui: u64::from_le_bytes(b[1..9].try_into().unwrap()),
                    dev_eui: u64::from_le_bytes(b[9..17].try_into().unwrap()),
                    dev_nonce: u16::from_le_bytes([b[17], b[18]]),
                    mic: b[19..23].try_into().unwrap(),
                }))
            }
            MType::JoinAccept => {
                if b.len() != 17 && b.len() != 33 {
                    return Err(LorawanError::Length {
                        field: "JoinAccept",
                        len: b.len(),
                    });
                }
                Ok(PhyPayload::JoinAccept(b.to_vec()))
            }
            _ => Ok(PhyPayload::Data(DataFrame::decode_body(mtype, b)?)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            PhyPayload::JoinRequest(j) => j.encode(),
            PhyPayload::JoinAccept(b) => b.clone(),
            PhyPayload::Data(d) => d.encode(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_uplink_is_twelve_bytes() {
        let f = DataFrame {
            mtype: MType::UnconfirmedDataUp,
            dev_addr: 0x2601_1bda,
            fctrl: FCtrl::default(),
            fcnt: 1,
            fopts: vec![],
            fport: None,
            frm_payload: vec![],
            mic: [1, 2, 3, 4],
        };
        let wire = f.encode();
        assert_eq!(wire.len(), 12);
        assert_eq!(PhyPayload::decode(&wire).unwrap(), PhyPayload::Data(f));
    }

    #[test]
    fn fopts_len_contradiction() {
        // FOptsLen 3 but only 2 bytes before the MIC.
        let wire = [0x40, 1, 2, 3, 4, 0x03, 0, 0, 0xaa, 0xbb, 9, 9, 9, 9];
        match PhyPayload::decode(&wire) {
            Err(LorawanError::Decode { field, .. }) => assert_eq!(field, "FOpts"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_bad_mhdr() {
        assert!(PhyPayload::decode(&[]).is_err());
        assert!(PhyPayload::decode(&[0x40, 1, 2]).is_err());
        assert!(PhyPayload::decode(&[0xe0; 12]).is_err());
        assert!(PhyPayload::decode(&[0x41; 12]).is_err());
    }
}
