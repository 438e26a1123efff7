//! Compact Collective Perception Message codec.
//!
//! Wire layout, MSB-first within each field and no alignment between fields:
//!
//! | field                      | bits |
//! |----------------------------|------|
//! | psid                       | 16   |
//! | generation_time (µs)       | 64   |
//! | protocol_version           | 8    |
//! | message_id                 | 8    |
//! | station_id                 | 32   |
//! | latitude (0.1 µdeg)        | 32   |
//! | longitude (0.1 µdeg)       | 32   |
//! | reference_time (ms mod 2¹⁶) | 16   |
//! | n × perceived object       | 74 n |
//! | MAC                        | 64   |
//!
//! Each perceived object is x, y (16 bits each, 0.1 m), vx, vy (15-bit two's
//! complement, 0.01 m/s) and Δt (12 bits, ms from sensing to generation).
//! The object count is implied by the frame length, so a message is always
//! exactly `272 + 74 n` bits.

pub mod mac;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{sign_extend, to_twos, BitString};
pub use mac::{compute_mac, verify_mac, MacKey, MAC_BITS};

pub const FIXED_BITS: usize = 272;
pub const OBJECT_BITS: usize = 74;
pub const MAX_OBJECTS: usize = 255;

const LAT_LIMIT: i64 = 900_000_000;
const LON_LIMIT: i64 = 1_800_000_000;
const VEL_MIN: i64 = -16_384;
const VEL_MAX: i64 = 16_383;
const DT_MAX: i64 = 4095;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("field `{field}` = {value} outside allowed range [{min}, {max}]")]
    Range {
        field: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("framing error: {len} bits is not of the form 272 + 74n (n <= 255)")]
    Framing { len: usize },
    #[error("authentication error: MAC does not verify")]
    Authentication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpmHeader {
    pub psid: u16,
    pub generation_time: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItsPduHeader {
    pub protocol_version: u8,
    pub message_id: u8,
    pub station_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagementContainer {
    /// 0.1 microdegree units.
    pub latitude: i32,
    /// 0.1 microdegree units.
    pub longitude: i32,
    pub reference_time: u16,
}

impl ManagementContainer {
    /// Millisecond value of a microsecond generation time, modulo 2¹⁶.
    pub fn reference_time_for(generation_time_us: u64) -> u16 {
        ((generation_time_us / 1000) % 65_536) as u16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceivedObject {
    /// East offset from the reference position, 0.1 m.
    pub x: i16,
    /// North offset, 0.1 m.
    pub y: i16,
    /// 0.01 m/s, 15-bit signed.
    pub vx: i16,
    /// 0.01 m/s, 15-bit signed.
    pub vy: i16,
    /// Milliseconds between sensing and generation time, 12-bit.
    pub delta_t: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectivePerceptionMessage {
    pub header: CpmHeader,
    pub pdu: ItsPduHeader,
    pub management: ManagementContainer,
    #[serde(default)]
    pub objects: Vec<PerceivedObject>,
    /// Recomputed on encode; set from the wire on decode.
    #[serde(default)]
    pub mac: u64,
}

/// Encoded length of the compact message with `n` perceived objects.
pub const fn cpm_size_bits(n: usize) -> usize {
    FIXED_BITS + OBJECT_BITS * n
}

/// Size of the equivalent ETSI CPM with `n` objects and `m` sensor descriptions.
pub const fn etsi_cpm_size_bits(n: usize, m: usize) -> usize {
    1560 + 280 * (m + n)
}

fn check(field: &'static str, value: i64, min: i64, max: i64) -> Result<(), CodecError> {
    if (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(CodecError::Range {
            field,
            value,
            min,
            max,
        })
    }
}

impl CollectivePerceptionMessage {
    pub fn validate(&self) -> Result<(), CodecError> {
        check("objects", self.objects.len() as i64, 0, MAX_OBJECTS as i64)?;
        let m = &self.management;
        check("latitude", m.latitude.into(), -LAT_LIMIT, LAT_LIMIT)?;
        check("longitude", m.longitude.into(), -LON_LIMIT, LON_LIMIT)?;
        for o in &self.objects {
            check("vx", o.vx.into(), VEL_MIN, VEL_MAX)?;
            check("vy", o.vy.into(), VEL_MIN, VEL_MAX)?;
            check("delta_t", o.delta_t.into(), 0, DT_MAX)?;
        }
        Ok(())
    }

    fn body_bits(&self) -> BitString {
        let mut b = BitString::with_capacity(cpm_size_bits(self.objects.len()));
        b.push_bits(self.header.psid.into(), 16);
        b.push_bits(self.header.generation_time, 64);
        b.push_bits(self.pdu.protocol_version.into(), 8);
        b.push_bits(self.pdu.message_id.into(), 8);
        b.push_bits(self.pdu.station_id.into(), 32);
        b.push_bits(to_twos(self.management.latitude.into(), 32), 32);
        b.push_bits(to_twos(self.management.longitude.into(), 32), 32);
        b.push_bits(self.management.reference_time.into(), 16);
        for o in &self.objects {
            b.push_bits(to_twos(o.x.into(), 16), 16);
            b.push_bits(to_twos(o.y.into(), 16), 16);
            b.push_bits(to_twos(o.vx.into(), 15), 15);
            b.push_bits(to_twos(o.vy.into(), 15), 15);
            b.push_bits(o.delta_t.into(), 12);
        }
        b
    }
}

/// Packs `msg` and appends the MAC computed over every preceding bit.
/// The `mac` field of the input is ignored.
pub fn encode_cpm(msg: &CollectivePerceptionMessage, key: &MacKey) -> Result<BitString, CodecError> {
    msg.validate()?;
    let mut bits = msg.body_bits();
    let tag = compute_mac(&bits, key);
    bits.push_bits(tag, MAC_BITS);
    debug_assert_eq!(bits.len(), cpm_size_bits(msg.objects.len()));
    Ok(bits)
}

/// Object count implied by a frame length, if the length is well-formed.
pub fn object_count_for_len(len: usize) -> Option<usize> {
    if len < FIXED_BITS || (len - FIXED_BITS) % OBJECT_BITS != 0 {
        return None;
    }
    let n = (len - FIXED_BITS) / OBJECT_BITS;
    (n <= MAX_OBJECTS).then_some(n)
}

/// Unpacks a frame, verifying its MAC before returning.
pub fn decode_cpm(bits: &BitString, key: &MacKey) -> Result<CollectivePerceptionMessage, CodecError> {
    let n = object_count_for_len(bits.len()).ok_or(CodecError::Framing { len: bits.len() })?;
    let body_len = bits.len() - MAC_BITS as usize;
    let body = bits.slice(0, body_len);
    let tag = bits
        .read_bits(body_len, MAC_BITS)
        .expect("length checked above");
    if !verify_mac(&body, key, tag) {
        return Err(CodecError::Authentication);
    }

    let mut at = 0usize;
    let mut take = |width: u32| {
        let v = bits.read_bits(at, width).expect("length checked above");
        at += width as usize;
        v
    };
    let header = CpmHeader {
        psid: take(16) as u16,
        generation_time: take(64),
    };
    let pdu = ItsPduHeader {
        protocol_version: take(8) as u8,
        message_id: take(8) as u8,
        station_id: take(32) as u32,
    };
    let management = ManagementContainer {
        latitude: sign_extend(take(32), 32) as i32,
        longitude: sign_extend(take(32), 32) as i32,
        reference_time: take(16) as u16,
    };
    let objects = (0..n)
        .map(|_| PerceivedObject {
            x: sign_extend(take(16), 16) as i16,
            y: sign_extend(take(16), 16) as i16,
            vx: sign_extend(take(15), 15) as i16,
            vy: sign_extend(take(15), 15) as i16,
            delta_t: take(12) as u16,
        })
        .collect();
    let msg = CollectivePerceptionMessage {
        header,
        pdu,
        management,
        objects,
        mac: tag,
    };
    // Decoded fields can still violate declared ranges (e.g. latitude) even
    // under a valid tag if the sender was faulty.
    msg.validate()?;
    Ok(msg)
}

/// One field of the wire layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpan {
    pub name: &'static str,
    /// Index of the perceived object, for object fields.
    pub object: Option<usize>,
    pub offset: usize,
    pub width: u32,
    pub signed: bool,
}

impl FieldSpan {
    /// Reads this field's value out of a frame.
    pub fn read(&self, bits: &BitString) -> Option<i128> {
        let raw = bits.read_bits(self.offset, self.width).ok()?;
        Some(if self.signed {
            sign_extend(raw, self.width).into()
        } else {
            raw.into()
        })
    }
}

/// Field-by-field layout of a message with `n` perceived objects, MAC last.
pub fn field_layout(n: usize) -> Vec<FieldSpan> {
    const FIXED: [(&str, u32, bool); 8] = [
        ("psid", 16, false),
        ("generation_time", 64, false),
        ("protocol_version", 8, false),
        ("message_id", 8, false),
        ("station_id", 32, false),
        ("latitude", 32, true),
        ("longitude", 32, true),
        ("reference_time", 16, false),
    ];
    const OBJECT: [(&str, u32, bool); 5] = [
        ("x", 16, true),
        ("y", 16, true),
        ("vx", 15, true),
        ("vy", 15, true),
        ("delta_t", 12, false),
    ];
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |name, object, width, signed| {
        out.push(FieldSpan {
            name,
            object,
            offset,
            width,
            signed,
        });
        offset += width as usize;
    };
    for (name, w, s) in FIXED {
        push(name, None, w, s);
    }
    for i in 0..n {
        for (name, w, s) in OBJECT {
            push(name, Some(i), w, s);
        }
    }
    push("mac", None, MAC_BITS, false);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> MacKey {
        MacKey(*b"0123456789abcdef")
    }

    pub(crate) fn sample(n: usize) -> CollectivePerceptionMessage {
        let gt = 1_700_000_000_123_456;
        CollectivePerceptionMessage {
            header: CpmHeader {
                psid: 0x27,
                generation_time: gt,
            },
            pdu: ItsPduHeader {
                protocol_version: 2,
                message_id: 14,
                station_id: 0xDEAD_BEEF,
            },
            management: ManagementContainer {
                latitude: 351_234_567,
                longitude: 1_369_876_543,
                reference_time: ManagementContainer::reference_time_for(gt),
            },
            objects: (0..n)
                .map(|i| PerceivedObject {
                    x: 120 - 37 * i as i16,
                    y: -55 + 11 * i as i16,
                    vx: -1389,
                    vy: 250,
                    delta_t: 40 + i as u16,
                })
                .collect(),
            mac: 0,
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(cpm_size_bits(0), 272);
        assert_eq!(cpm_size_bits(2), 420);
        assert_eq!(cpm_size_bits(2).div_ceil(8), 53);
        assert_eq!(etsi_cpm_size_bits(0, 0), 1560);
        assert_eq!(etsi_cpm_size_bits(1, 1), 2120);
        assert_eq!(etsi_cpm_size_bits(2, 0), etsi_cpm_size_bits(0, 2));
    }

    #[test]
    fn encode_lengths() {
        assert_eq!(encode_cpm(&sample(0), &key()).unwrap().len(), 272);
        assert_eq!(encode_cpm(&sample(2), &key()).unwrap().len(), 420);
    }

    #[test]
    fn decode_two_objects() {
        let bits = encode_cpm(&sample(2), &key()).unwrap();
        let msg = decode_cpm(&bits, &key()).unwrap();
        assert_eq!(msg.objects.len(), 2);
        let mut expect = sample(2);
        expect.mac = msg.mac;
        assert_eq!(msg, expect);
    }

    #[test]
    fn field_order_on_the_wire() {
        let bits = encode_cpm(&sample(1), &key()).unwrap();
        assert_eq!(bits.read_bits(0, 16).unwrap(), 0x27);
        assert_eq!(bits.read_bits(96, 32).unwrap(), 0xDEAD_BEEF);
        // first object starts right after the 208-bit fixed body
        assert_eq!(sign_extend(bits.read_bits(208, 16).unwrap(), 16), 120);
        assert_eq!(sign_extend(bits.read_bits(240, 15).unwrap(), 15), -1389);
    }

    #[test]
    fn framing_errors() {
        let bits = encode_cpm(&sample(2), &key()).unwrap();
        let short = bits.slice(0, 419);
        assert_eq!(decode_cpm(&short, &key()), Err(CodecError::Framing { len: 419 }));
        assert!(matches!(
            decode_cpm(&BitString::new(), &key()),
            Err(CodecError::Framing { .. })
        ));
        assert_eq!(object_count_for_len(cpm_size_bits(256)), None);
    }

    #[test]
    fn wrong_key_fails_authentication() {
        let bits = encode_cpm(&sample(2), &key()).unwrap();
        assert_eq!(
            decode_cpm(&bits, &MacKey([0; 16])),
            Err(CodecError::Authentication)
        );
    }

    #[test]
    fn range_errors_name_the_field() {
        let mut m = sample(1);
        m.objects[0].vx = 16_384;
        let err = encode_cpm(&m, &key()).unwrap_err();
        assert!(matches!(err, CodecError::Range { field: "vx", .. }));
        assert!(err.to_string().contains("vx"));

        let mut m = sample(1);
        m.objects[0].delta_t = 4096;
        assert!(matches!(
            encode_cpm(&m, &key()),
            Err(CodecError::Range { field: "delta_t", .. })
        ));

        let mut m = sample(0);
        m.management.latitude = 900_000_001;
        assert!(matches!(
            encode_cpm(&m, &key()),
            Err(CodecError::Range { field: "latitude", .. })
        ));

        let m = sample(256);
        assert!(matches!(
            encode_cpm(&m, &key()),
            Err(CodecError::Range { field: "objects", .. })
        ));
    }

    #[test]
    fn reference_time_wraps() {
        assert_eq!(ManagementContainer::reference_time_for(65_536_000), 0);
        assert_eq!(ManagementContainer::reference_time_for(65_535_999), 65_535);
    }

    #[test]
    fn layout_reads_back_the_fields() {
        let msg = sample(2);
        let bits = encode_cpm(&msg, &key()).unwrap();
        let layout = field_layout(2);
        let last = layout.last().unwrap();
        assert_eq!(last.offset + last.width as usize, bits.len());
        let get = |name: &str, object: Option<usize>| {
            layout
                .iter()
                .find(|f| f.name == name && f.object == object)
                .and_then(|f| f.read(&bits))
                .unwrap()
        };
        assert_eq!(get("latitude", None), msg.management.latitude.into());
        assert_eq!(get("station_id", None), msg.pdu.station_id.into());
        assert_eq!(get("vx", Some(1)), msg.objects[1].vx.into());
        assert_eq!(get("mac", None), decode_cpm(&bits, &key()).unwrap().mac.into());
    }
}
