//! 64-bit message authentication tag: HMAC-SHA-256 truncated to its leading
//! eight bytes, keyed with a pre-shared 128-bit secret.

use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;

use crate::bits::BitString;

pub const MAC_BITS: u32 = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MacKey(pub [u8; 16]);

impl MacKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // never print key material
        f.write_str("MacKey(..)")
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("MAC key must be 32 hex digits (128 bits): {0}")]
pub struct KeyParseError(String);

impl FromStr for MacKey {
    type Err = KeyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s.trim()).map_err(|e| KeyParseError(e.to_string()))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| KeyParseError(format!("got {} bytes", b.len())))?;
        Ok(MacKey(arr))
    }
}

impl Serialize for MacKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for MacKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tag over `payload`, zero-padded to a byte boundary before hashing.
pub fn compute_mac(payload: &BitString, key: &MacKey) -> u64 {
    let mut mac = Hmac::<Sha256>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    mac.update(payload.as_bytes());
    let digest = mac.finalize().into_bytes();
    u64::from_be_bytes(digest[..8].try_into().expect("SHA-256 digest is 32 bytes"))
}

/// Constant-time comparison of a received tag against the recomputed one.
pub fn verify_mac(payload: &BitString, key: &MacKey, tag: u64) -> bool {
    let mut mac = Hmac::<Sha256>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    mac.update(payload.as_bytes());
    mac.verify_truncated_left(&tag.to_be_bytes()).is_ok()
}
