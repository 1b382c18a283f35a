//! LoRaWAN 1.0.x cryptography on top of AES-128.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use cmac::{Cmac, Mac};

use super::LorawanError;

pub type Key = [u8; 16];
pub type Mic = [u8; 4];

/// Frame direction as encoded in the B0 and Ai blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up = 0,
    Down = 1,
}

pub fn aes_cmac(key: &Key, data: &[u8]) -> [u8; 16] {
    let mut mac = <Cmac<Aes128> as Mac>::new_from_slice(key).expect("16-byte key");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

pub fn aes_encrypt_block(key: &Key, block: &[u8; 16]) -> [u8; 16] {
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut b = GenericArray::clone_from_slice(block);
    cipher.encrypt_block(&mut b);
    b.into()
}

pub fn aes_decrypt_block(key: &Key, block: &[u8; 16]) -> [u8; 16] {
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut b = GenericArray::clone_from_slice(block);
    cipher.decrypt_block(&mut b);
    b.into()
}

fn block(first: u8, dir: Direction, dev_addr: u32, fcnt: u32, last: u8) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0] = first;
    b[5] = dir as u8;
    b[6..10].copy_from_slice(&dev_addr.to_le_bytes());
    b[10..14].copy_from_slice(&fcnt.to_le_bytes());
    b[15] = last;
    b
}

/// MIC of a data frame: CMAC over B0 followed by `msg` (MHDR through
/// FRMPayload), truncated to four bytes.
pub fn compute_mic(key: &Key, msg: &[u8], dir: Direction, dev_addr: u32, fcnt: u32) -> Mic {
    let b0 = block(0x49, dir, dev_addr, fcnt, msg.len() as u8);
    let mut mac = <Cmac<Aes128> as Mac>::new_from_slice(key).expect("16-byte key");
    mac.update(&b0);
    mac.update(msg);
    let tag = mac.finalize().into_bytes();
    [tag[0], tag[1], tag[2], tag[3]]
}

/// MIC of join messages: plain CMAC over the message, truncated.
pub fn join_mic(key: &Key, msg: &[u8]) -> Mic {
    let tag = aes_cmac(key, msg);
    [tag[0], tag[1], tag[2], tag[3]]
}

/// CTR-style FRMPayload encryption; applying it twice restores the input.
pub fn crypt_payload(key: &Key, payload: &[u8], dir: Direction, dev_addr: u32, fcnt: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len());
    for (i, chunk) in payload.chunks(16).enumerate() {
        let a = block(0x01, dir, dev_addr, fcnt, (i + 1) as u8);
        let s = aes_encrypt_block(key, &a);
        out.extend(chunk.iter().zip(s.iter()).map(|(p, k)| p ^ k));
    }
    out
}

/// Session keys from a join exchange. Nonces and the net id are passed as
/// integers and serialized little-endian.
pub fn derive_session_keys(app_key: &Key, app_nonce: u32, net_id: u32, dev_nonce: u16) -> (Key, Key) {
    let make = |prefix: u8| {
        let mut b = [0u8; 16];
        b[0] = prefix;
        b[1..4].copy_from_slice(&app_nonce.to_le_bytes()[..3]);
        b[4..7].copy_from_slice(&net_id.to_le_bytes()[..3]);
        b[7..9].copy_from_slice(&dev_nonce.to_le_bytes());
        aes_encrypt_block(app_key, &b)
    };
    (make(0x01), make(0x02))
}

fn check_accept_len(len: usize) -> Result<(), LorawanError> {
    if len == 16 || len == 32 {
        Ok(())
    } else {
        Err(LorawanError::Length {
            field: "join accept body",
            len,
        })
    }
}

/// Network side: "encrypts" the accept body (fields plus MIC) with the AES
/// decrypt primitive so devices only need AES encryption.
pub fn join_accept_encrypt(app_key: &Key, body: &[u8]) -> Result<Vec<u8>, LorawanError> {
    check_accept_len(body.len())?;
    Ok(body
        .chunks(16)
        .flat_map(|c| aes_decrypt_block(app_key, c.try_into().unwrap()))
        .collect())
}

/// Device side inverse of [`join_accept_encrypt`].
pub fn join_accept_decrypt(app_key: &Key, wire: &[u8]) -> Result<Vec<u8>, LorawanError> {
    check_accept_len(wire.len())?;
    Ok(wire
        .chunks(16)
        .flat_map(|c| aes_encrypt_block(app_key, c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const K: Key = [
        0x2b, 0x7e, 0x15, 0x16, 0x28, 0xae, 0xd2, 0xa6, 0xab, 0xf7, 0x15, 0x88, 0x09, 0xcf, 0x4f,
        0x3c,
    ];

    #[test]
    fn rfc4493_empty() {
        assert_eq!(
            hex::encode(aes_cmac(&K, &[])),
            "bb1d6929e95937287fa37d129b756746"
        );
    }

    #[test]
    fn crypt_is_involution() {
        let p: Vec<u8> = (0..40).collect();
        let c = crypt_payload(&K, &p, Direction::Up, 7, 9);
        assert_ne!(c, p);
        assert_eq!(crypt_payload(&K, &c, Direction::Up, 7, 9), p);
        assert!(crypt_payload(&K, &[], Direction::Down, 1, 1).is_empty());
    }

    #[test]
    fn accept_length_checked() {
        assert!(join_accept_encrypt(&K, &[0u8; 17]).is_err());
        assert!(join_accept_decrypt(&K, &[0u8; 15]).is_err());
    }
}
