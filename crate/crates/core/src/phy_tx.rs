//! LED-bar block OOK transmitter.
//!
//! The bar has 96 LEDs grouped into 12 blocks of 8. Blocks 0, 1, 10 and 11
//! carry a tracking pattern; blocks 2..=9 carry one data byte per frame with
//! bit 7 on block 2. Blocks 0 and 11 are ON on even symbols and OFF on odd
//! ones, blocks 1 and 10 the complement, so every frame shows an ON and an
//! OFF reference at each end and every tracking block toggles every frame.
//!
//! A packet on air is `idle_gap` idle frames (data byte 0x00), one 0xFF
//! delimiter, then the data bytes.

use std::fmt::Write as _;

use crate::bits::BitString;

pub const LEDS: usize = 96;
pub const BLOCKS: usize = 12;
pub const LEDS_PER_BLOCK: usize = 8;
pub const DATA_BLOCKS: std::ops::RangeInclusive<usize> = 2..=9;
/// Tracking blocks lit on even symbols.
pub const EVEN_TRACK: [usize; 2] = [0, 11];
/// Tracking blocks lit on odd symbols.
pub const ODD_TRACK: [usize; 2] = [1, 10];

pub const SYNC_BYTE: u8 = 0xFF;
pub const IDLE_BYTE: u8 = 0x00;
pub const MIN_IDLE_GAP: usize = 2;

/// One transmitted frame: 96 on/off LED values, index 0 leftmost.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LedBarState {
    leds: [bool; LEDS],
}

impl LedBarState {
    pub fn all_off() -> Self {
        Self { leds: [false; LEDS] }
    }

    pub fn from_blocks(blocks: [bool; BLOCKS]) -> Self {
        Self {
            leds: std::array::from_fn(|i| blocks[i / LEDS_PER_BLOCK]),
        }
    }

    pub fn leds(&self) -> &[bool; LEDS] {
        &self.leds
    }

    pub fn led(&self, i: usize) -> bool {
        self.leds[i]
    }

    /// Value of a block; `None` if its LEDs disagree.
    pub fn block(&self, b: usize) -> Option<bool> {
        let chunk = &self.leds[b * LEDS_PER_BLOCK..(b + 1) * LEDS_PER_BLOCK];
        let first = chunk[0];
        chunk.iter().all(|&v| v == first).then_some(first)
    }

    pub fn blocks(&self) -> Option<[bool; BLOCKS]> {
        let mut out = [false; BLOCKS];
        for (b, slot) in out.iter_mut().enumerate() {
            *slot = self.block(b)?;
        }
        Some(out)
    }

    /// Data byte carried by blocks 2..=9, MSB on block 2.
    pub fn data_byte(&self) -> Option<u8> {
        let mut v = 0u8;
        for b in DATA_BLOCKS {
            v = (v << 1) | u8::from(self.block(b)?);
        }
        Some(v)
    }

    /// True when blocks 0 and 11 are lit.
    pub fn even_parity(&self) -> bool {
        self.leds[0]
    }

    /// `0`/`1` characters, one per LED.
    pub fn to_line(&self) -> String {
        self.leds.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_line(line: &str) -> Option<Self> {
        let chars: Vec<char> = line.chars().collect();
        if chars.len() != LEDS {
            return None;
        }
        let mut leds = [false; LEDS];
        for (slot, c) in leds.iter_mut().zip(chars) {
            *slot = match c {
                '1' => true,
                '0' => false,
                _ => return None,
            };
        }
        Some(Self { leds })
    }
}

impl std::fmt::Debug for LedBarState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LedBarState({})", self.to_line())
    }
}

pub fn frame_to_ledbar(data_byte: u8, symbol_index: u64) -> LedBarState {
    let even = symbol_index % 2 == 0;
    let mut blocks = [false; BLOCKS];
    for b in EVEN_TRACK {
        blocks[b] = even;
    }
    for b in ODD_TRACK {
        blocks[b] = !even;
    }
    for (k, b) in DATA_BLOCKS.enumerate() {
        blocks[b] = data_byte & (0x80 >> k) != 0;
    }
    LedBarState::from_blocks(blocks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxPacket {
    pub data_frames: Vec<u8>,
    pub sync_frame: u8,
    pub idle_gap: usize,
}

impl TxPacket {
    pub fn n_frame(&self) -> usize {
        self.data_frames.len()
    }

    /// Frames on air including idle gap and delimiter.
    pub fn total_frames(&self) -> usize {
        self.idle_gap + 1 + self.data_frames.len()
    }

    pub fn payload_bits(&self) -> BitString {
        BitString::from_bytes(&self.data_frames)
    }
}

/// Zero-pads `payload` to whole bytes, one byte per data frame.
pub fn packetize(payload: &BitString) -> TxPacket {
    packetize_with_gap(payload, MIN_IDLE_GAP)
}

pub fn packetize_with_gap(payload: &BitString, idle_gap: usize) -> TxPacket {
    assert!(!payload.is_empty(), "payload must be non-empty");
    TxPacket {
        data_frames: payload.padded_to_byte().as_bytes().to_vec(),
        sync_frame: SYNC_BYTE,
        idle_gap: idle_gap.max(MIN_IDLE_GAP),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    Idle,
    Sync,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledFrame {
    pub time: f64,
    pub state: LedBarState,
    pub role: FrameRole,
    /// Index of the packet this frame belongs to, if any.
    pub packet: Option<usize>,
}

/// Transmission bookkeeping for one packet inside a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketTiming {
    /// Start of the first idle frame.
    pub idle_start: f64,
    /// Instant the first data byte is written to the bar.
    pub first_data: f64,
    /// End of the last data frame.
    pub data_end: f64,
    pub n_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxSchedule {
    pub frame_rate_tx: f64,
    pub start_time: f64,
    pub frames: Vec<ScheduledFrame>,
    pub packets: Vec<PacketTiming>,
}

impl TxSchedule {
    pub fn frame_interval(&self) -> f64 {
        1.0 / self.frame_rate_tx
    }

    pub fn end_time(&self) -> f64 {
        self.time_of(self.frames.len())
    }

    fn time_of(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.frame_rate_tx
    }

    /// Frame index on air at time `t`, if any.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        if t < self.start_time {
            return None;
        }
        // nudge so captures landing exactly on a boundary see the new frame
        let idx = ((t - self.start_time) * self.frame_rate_tx + 1e-9).floor() as usize;
        (idx < self.frames.len()).then_some(idx)
    }

    pub fn state_at(&self, t: f64) -> Option<&ScheduledFrame> {
        self.index_at(t).map(|i| &self.frames[i])
    }

    /// Transmission timestamp of the first data frame of the first packet.
    pub fn first_data_time(&self) -> Option<f64> {
        self.packets.first().map(|p| p.first_data)
    }

    /// One line per frame: timestamp, a space, then 96 `0`/`1` characters.
    pub fn to_dump(&self) -> String {
        let mut out = String::with_capacity(self.frames.len() * 112);
        for f in &self.frames {
            let _ = writeln!(out, "{:.9} {}", f.time, f.state.to_line());
        }
        out
    }
}

/// Parses a frame dump back into `(timestamp, state)` pairs.
pub fn parse_dump(text: &str) -> Option<Vec<(f64, LedBarState)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (t, bits) = l.trim().split_once(' ')?;
            Some((t.parse().ok()?, LedBarState::from_line(bits.trim())?))
        })
        .collect()
}

pub fn schedule(packet: &TxPacket, frame_rate_tx: f64, start_time: f64) -> TxSchedule {
    schedule_stream(std::slice::from_ref(packet), frame_rate_tx, start_time, MIN_IDLE_GAP)
}

/// Back-to-back packets followed by `trailing_idle` idle frames. The symbol
/// counter (tracking parity) runs continuously across the whole stream.
pub fn schedule_stream(
    packets: &[TxPacket],
    frame_rate_tx: f64,
    start_time: f64,
    trailing_idle: usize,
) -> TxSchedule {
    assert!(frame_rate_tx > 0.0, "frame rate must be positive");
    let mut sched = TxSchedule {
        frame_rate_tx,
        start_time,
        frames: Vec::with_capacity(packets.iter().map(TxPacket::total_frames).sum::<usize>() + trailing_idle),
        packets: Vec::with_capacity(packets.len()),
    };
    let push = |sched: &mut TxSchedule, byte: u8, role: FrameRole, packet: Option<usize>| {
        let idx = sched.frames.len();
        let time = sched.time_of(idx);
        sched.frames.push(ScheduledFrame {
            time,
            state: frame_to_ledbar(byte, idx as u64),
            role,
            packet,
        });
    };
    for (p, pkt) in packets.iter().enumerate() {
        let idle_start = sched.time_of(sched.frames.len());
        for _ in 0..pkt.idle_gap {
            push(&mut sched, IDLE_BYTE, FrameRole::Idle, Some(p));
        }
        push(&mut sched, pkt.sync_frame, FrameRole::Sync, Some(p));
        let first_data = sched.time_of(sched.frames.len());
        for &b in &pkt.data_frames {
            push(&mut sched, b, FrameRole::Data, Some(p));
        }
        sched.packets.push(PacketTiming {
            idle_start,
            first_data,
            data_end: sched.time_of(sched.frames.len()),
            n_frame: pkt.n_frame(),
        });
    }
    for _ in 0..trailing_idle {
        push(&mut sched, IDLE_BYTE, FrameRole::Idle, None);
    }
    sched
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blocks(s: &LedBarState) -> [bool; BLOCKS] {
        s.blocks().expect("block-coherent")
    }

    #[test]
    fn zero_byte_even_symbol() {
        let b = blocks(&frame_to_ledbar(0x00, 0));
        assert!(b[0] && b[11]);
        assert!(!b[1] && !b[10]);
        assert!(b[2..=9].iter().all(|&v| !v));
    }

    #[test]
    fn full_byte_odd_symbol() {
        let b = blocks(&frame_to_ledbar(0xFF, 1));
        assert!(b[1] && b[10]);
        assert!(!b[0] && !b[11]);
        assert!(b[2..=9].iter().all(|&v| v));
    }

    #[test]
    fn a5_expansion() {
        let b = blocks(&frame_to_ledbar(0xA5, 0));
        assert_eq!(&b[2..=9], &[true, false, true, false, false, true, false, true]);
    }

    #[test]
    fn every_byte_inverts() {
        for v in 0..=255u8 {
            for idx in [0u64, 1, 7] {
                assert_eq!(frame_to_ledbar(v, idx).data_byte(), Some(v));
            }
        }
    }

    #[test]
    fn packetize_cpm_sized_payload() {
        let mut p = BitString::new();
        for i in 0..420 {
            p.push(i % 3 == 0);
        }
        let pkt = packetize(&p);
        assert_eq!(pkt.n_frame(), 53);
        assert_eq!(pkt.sync_frame, 0xFF);
        assert!(pkt.idle_gap >= 2);
    }

    #[test]
    fn packetize_small_payloads() {
        assert_eq!(packetize(&BitString::from_bytes(&[0xA5])).data_frames, vec![0xA5]);
        let mut nine = BitString::from_bytes(&[0xA5]);
        nine.push(true);
        assert_eq!(packetize(&nine).data_frames, vec![0xA5, 0x80]);
    }

    #[test]
    fn schedule_spans() {
        let pkt = TxPacket {
            data_frames: vec![0x11; 53],
            sync_frame: SYNC_BYTE,
            idle_gap: 2,
        };
        let s = schedule(&pkt, 500.0, 0.0);
        let t = s.packets[0];
        assert!((t.data_end - t.first_data - 0.106).abs() < 1e-12);
        assert!((t.first_data - 3.0 / 500.0).abs() < 1e-12);
        assert_eq!(s.frames[2].role, FrameRole::Sync);
        assert_eq!(s.frames[2].state.data_byte(), Some(0xFF));

        let one = TxPacket {
            data_frames: vec![0x42],
            sync_frame: SYNC_BYTE,
            idle_gap: 2,
        };
        let s = schedule(&one, 100.0, 1.5);
        let t = s.packets[0];
        assert!((t.data_end - t.first_data - 0.010).abs() < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let pkt = packetize(&BitString::from_bytes(&[0xA5, 0x3C]));
        let s = schedule(&pkt, 250.0, 0.25);
        let parsed = parse_dump(&s.to_dump()).unwrap();
        assert_eq!(parsed.len(), s.frames.len());
        for (f, (t, st)) in s.frames.iter().zip(parsed) {
            assert!((f.time - t).abs() < 1e-9);
            assert_eq!(f.state, st);
        }
        assert!(parse_dump("0.0 0101").is_none());
    }

    proptest! {
        #[test]
        fn schedule_law(rate in 1.0f64..2000.0, n in 1usize..40, start in 0.0f64..10.0) {
            let pkt = TxPacket { data_frames: vec![0x5A; n], sync_frame: SYNC_BYTE, idle_gap: 2 };
            let s = schedule_stream(&[pkt.clone(), pkt], rate, start, 1);
            let step = 1.0 / rate;
            for w in s.frames.windows(2) {
                prop_assert!(w[1].time > w[0].time);
                prop_assert!((w[1].time - w[0].time - step).abs() < 1e-9 * (1.0 + start));
            }
        }

        #[test]
        fn tracking_toggles_and_blocks_cohere(bytes in proptest::collection::vec(any::<u8>(), 1..64)) {
            let pkt = packetize(&BitString::from_bytes(&bytes));
            let s = schedule(&pkt, 500.0, 0.0);
            for w in s.frames.windows(2) {
                let a = w[0].state.blocks();
                let b = w[1].state.blocks();
                prop_assert!(a.is_some() && b.is_some());
                let (a, b) = (a.unwrap(), b.unwrap());
                for t in [0, 1, 10, 11] {
                    prop_assert_ne!(a[t], b[t]);
                }
                prop_assert_ne!(a[0], a[1]);
                prop_assert_ne!(a[10], a[11]);
            }
        }
    }
}
