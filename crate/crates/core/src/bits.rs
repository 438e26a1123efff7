//! Packed MSB-first bit strings.
//!
//! Bits are stored in a byte vector, most significant bit of byte 0 first.
//! Unused trailing bits of the final byte are always zero, so the canonical
//! byte form of a bit string is simply its backing buffer.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitError {
    #[error("read of {want} bits at offset {at} overruns {len}-bit string")]
    Overrun { at: usize, want: usize, len: usize },
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("bit length {bits} does not fit in {bytes} bytes")]
    Length { bits: usize, bytes: usize },
}

#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            len: 0,
        }
    }

    /// Builds a bit string from whole bytes.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            bytes: bytes.to_vec(),
            len: bytes.len() * 8,
        }
    }

    /// Takes the leading `bits` bits of `bytes`. Bits past `bits` must be zero
    /// if they fall inside the last byte; they are cleared otherwise.
    pub fn from_bytes_truncated(bytes: &[u8], bits: usize) -> Result<Self, BitError> {
        if bits > bytes.len() * 8 {
            return Err(BitError::Length {
                bits,
                bytes: bytes.len(),
            });
        }
        let mut out = Self {
            bytes: bytes[..bits.div_ceil(8)].to_vec(),
            len: bits,
        };
        out.clear_tail();
        Ok(out)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut out = Self::with_capacity(bits.len());
        for &b in bits {
            out.push(b);
        }
        out
    }

    /// Parses hex into whole bytes; the result length is a multiple of 8.
    pub fn from_hex(s: &str) -> Result<Self, BitError> {
        let clean: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bytes = hex::decode(clean).map_err(|e| BitError::Hex(e.to_string()))?;
        Ok(Self::from_bytes(&bytes))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        (i < self.len).then(|| self.bytes[i / 8] & (0x80 >> (i % 8)) != 0)
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[self.len / 8] |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for shift in (0..width).rev() {
            self.push((value >> shift) & 1 == 1);
        }
    }

    pub fn extend(&mut self, other: &BitString) {
        for i in 0..other.len {
            self.push(other.get(i).unwrap_or(false));
        }
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        self.bytes[i / 8] ^= 0x80 >> (i % 8);
    }

    /// Reads `width` bits starting at `at` as an unsigned big-endian value.
    pub fn read_bits(&self, at: usize, width: u32) -> Result<u64, BitError> {
        let want = width as usize;
        if at + want > self.len {
            return Err(BitError::Overrun {
                at,
                want,
                len: self.len,
            });
        }
        let mut v = 0u64;
        for i in at..at + want {
            v = (v << 1) | u64::from(self.bytes[i / 8] & (0x80 >> (i % 8)) != 0);
        }
        Ok(v)
    }

    pub fn slice(&self, start: usize, end: usize) -> BitString {
        let mut out = BitString::with_capacity(end - start);
        for i in start..end.min(self.len) {
            out.push(self.get(i).unwrap_or(false));
        }
        out
    }

    /// Canonical byte form: zero-padded to a byte boundary, big-endian.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Returns a copy padded with zero bits up to the next byte boundary.
    pub fn padded_to_byte(&self) -> BitString {
        BitString {
            bytes: self.bytes.clone(),
            len: self.bytes.len() * 8,
        }
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.bytes[i / 8] & (0x80 >> (i % 8)) != 0)
    }

    /// Number of positions at which the two strings differ; `None` on length mismatch.
    pub fn hamming(&self, other: &BitString) -> Option<usize> {
        if self.len != other.len {
            return None;
        }
        Some(
            self.bytes
                .iter()
                .zip(&other.bytes)
                .map(|(a, b)| (a ^ b).count_ones() as usize)
                .sum(),
        )
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 8;
        if rem != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= 0xFFu8 << (8 - rem);
            }
        }
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({} bits, 0x{})", self.len, self.to_hex())
    }
}

/// Sign-extends the low `width` bits of `raw`.
pub fn sign_extend(raw: u64, width: u32) -> i64 {
    let shift = 64 - width;
    ((raw << shift) as i64) >> shift
}

/// Two's-complement encoding of `v` in `width` bits.
pub fn to_twos(v: i64, width: u32) -> u64 {
    (v as u64) & (u64::MAX >> (64 - width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_read_msb_first() {
        let mut b = BitString::new();
        b.push_bits(0b101, 3);
        b.push_bits(0xA5, 8);
        assert_eq!(b.len(), 11);
        assert_eq!(b.read_bits(0, 3).unwrap(), 0b101);
        assert_eq!(b.read_bits(3, 8).unwrap(), 0xA5);
        assert_eq!(b.as_bytes(), &[0b1011_0100, 0b1010_0000]);
    }

    #[test]
    fn overrun_is_reported() {
        let b = BitString::from_bytes(&[0xFF]);
        assert!(matches!(b.read_bits(4, 8), Err(BitError::Overrun { .. })));
    }

    #[test]
    fn twos_complement_15_bit() {
        assert_eq!(to_twos(-1, 15), 0x7FFF);
        assert_eq!(sign_extend(0x7FFF, 15), -1);
        assert_eq!(sign_extend(to_twos(-16384, 15), 15), -16384);
        assert_eq!(sign_extend(to_twos(16383, 15), 15), 16383);
    }

    #[test]
    fn truncated_clears_tail() {
        let b = BitString::from_bytes_truncated(&[0xFF, 0xFF], 9).unwrap();
        assert_eq!(b.as_bytes(), &[0xFF, 0x80]);
        assert_eq!(b.padded_to_byte().len(), 16);
    }

    #[test]
    fn hamming_counts_flips() {
        let a = BitString::from_bytes(&[0x00, 0xF0]);
        let mut b = a.clone();
        b.flip(3);
        b.flip(15);
        assert_eq!(a.hamming(&b), Some(2));
        assert_eq!(a.hamming(&BitString::from_bytes(&[0])), None);
    }

    #[test]
    fn hex_round_trip() {
        let b = BitString::from_hex("a5 80").unwrap();
        assert_eq!(b.to_hex(), "a580");
        assert!(BitString::from_hex("zz").is_err());
    }
}
