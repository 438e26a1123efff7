//! End-to-end link simulation over one capture stream.

use rand::Rng;

use crate::bits::BitString;
use crate::channel::{render_rows, sample_clock, step_motion, CameraFrame, CameraModel, SceneState};
use crate::cpm::{
    CollectivePerceptionMessage, CpmHeader, ItsPduHeader, ManagementContainer, PerceivedObject,
};
use crate::phy_rx::{AssemblerStats, Receiver, RxConfig, RxPacket};
use crate::phy_tx::{packetize_with_gap, schedule_stream, FrameRole, TxSchedule, MIN_IDLE_GAP};

/// A random but valid message with `n_objects` perceived objects.
pub fn random_cpm<R: Rng>(rng: &mut R, n_objects: usize, generation_time: u64) -> CollectivePerceptionMessage {
    CollectivePerceptionMessage {
        header: CpmHeader {
            psid: rng.gen(),
            generation_time,
        },
        pdu: ItsPduHeader {
            protocol_version: 2,
            message_id: 14,
            station_id: rng.gen(),
        },
        management: ManagementContainer {
            latitude: rng.gen_range(-900_000_000..=900_000_000),
            longitude: rng.gen_range(-1_800_000_000..=1_800_000_000),
            reference_time: ManagementContainer::reference_time_for(generation_time),
        },
        objects: (0..n_objects)
            .map(|_| PerceivedObject {
                x: rng.gen(),
                y: rng.gen(),
                vx: rng.gen_range(-16384..=16383),
                vy: rng.gen_range(-16384..=16383),
                delta_t: rng.gen_range(0..=4095),
            })
            .collect(),
        mac: 0,
    }
}

/// Everything needed to simulate one continuous capture stream.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    /// Byte-aligned payloads, one per packet.
    pub payloads: Vec<BitString>,
    pub frame_rate_tx: f64,
    pub camera: CameraModel,
    /// Scene at the stream start; `rng_seed` keys the pixel noise.
    pub scene: SceneState,
    pub rx: RxConfig,
    /// Idle frames before the first packet.
    pub lead_in: usize,
    pub trailing_idle: usize,
    /// Render only the rows the receiver asks for while it is tracking.
    pub partial_render: bool,
}

impl StreamSpec {
    pub fn schedule(&self) -> TxSchedule {
        let packets: Vec<_> = self
            .payloads
            .iter()
            .enumerate()
            .map(|(i, p)| packetize_with_gap(p, if i == 0 { self.lead_in.max(MIN_IDLE_GAP) } else { MIN_IDLE_GAP }))
            .collect();
        schedule_stream(&packets, self.frame_rate_tx, 0.0, self.trailing_idle)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketOutcome {
    pub tx_bits: BitString,
    /// Transmission timestamp of the first data frame.
    pub first_data: f64,
    pub rx: Option<RxPacket>,
}

impl PacketOutcome {
    pub fn bit_errors(&self) -> Option<usize> {
        self.rx.as_ref().and_then(|r| self.tx_bits.hamming(&r.payload_bits))
    }

    /// Demodulation time minus the first data frame's transmission time.
    pub fn latency(&self) -> Option<f64> {
        self.rx.as_ref().map(|r| r.demod_complete_time - self.first_data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub outcomes: Vec<PacketOutcome>,
    /// Packets reassembled at a time that matches no transmitted packet start.
    pub spurious: usize,
    pub captures: usize,
    pub acquisitions: u64,
    pub stats: AssemblerStats,
    pub frame_rate_tx: f64,
    /// The scene ended (vehicle reached the bar) before the schedule did.
    pub ended_early: bool,
}

impl StreamResult {
    /// Latency of each completed packet, transmission of the first data frame
    /// to demodulation.
    pub fn latencies(&self) -> Vec<f64> {
        self.outcomes.iter().filter_map(PacketOutcome::latency).collect()
    }

    /// Latency including the idle gap and delimiter that precede each packet.
    pub fn latencies_with_sync(&self) -> Vec<f64> {
        let overhead = (MIN_IDLE_GAP + 1) as f64 / self.frame_rate_tx;
        self.latencies().into_iter().map(|l| l + overhead).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no completed packet in trace")]
pub struct NoMeasurement;

/// Mean latency over the completed packets of a stream.
pub fn measure_latency(run: &StreamResult) -> Result<f64, NoMeasurement> {
    let l = run.latencies();
    if l.is_empty() {
        return Err(NoMeasurement);
    }
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Renders what the camera sees for one capture.
pub fn capture_frame(
    spec: &StreamSpec,
    state: &crate::phy_tx::LedBarState,
    scene: &SceneState,
    t: f64,
    index: u64,
    rows: Option<std::ops::Range<usize>>,
) -> CameraFrame {
    let rows = rows.unwrap_or(0..spec.camera.height);
    render_rows(state, scene, &spec.camera, t, index, rows)
}

/// Runs transmitter, channel and receiver over the whole stream.
pub fn run_stream(spec: &StreamSpec) -> StreamResult {
    run_stream_observed(spec, |_, _| {})
}

/// As [`run_stream`], handing every rendered capture to `observe`.
pub fn run_stream_observed(spec: &StreamSpec, mut observe: impl FnMut(u64, &CameraFrame)) -> StreamResult {
    let sched = spec.schedule();
    let captures = sample_clock(&spec.camera, &sched);
    let rx_cfg = RxConfig {
        frame_interval: spec.camera.frame_interval(),
        ..spec.rx
    };
    let mut rx = Receiver::new(rx_cfg);
    let mut received = Vec::new();
    let mut ended_early = false;
    let mut n = 0;
    for c in &captures {
        let scene = match step_motion(&spec.scene, c.time - sched.start_time) {
            Ok(s) => s,
            Err(_) => {
                ended_early = true;
                break;
            }
        };
        let rows = if spec.partial_render { rx.rows_needed() } else { None };
        let frame = capture_frame(spec, &c.state, &scene, c.time, c.index, rows);
        observe(c.index, &frame);
        n += 1;
        if let Some(p) = rx.push(frame) {
            received.push(p);
        }
    }
    received.extend(rx.finish());

    let mut outcomes: Vec<PacketOutcome> = spec
        .payloads
        .iter()
        .zip(&sched.packets)
        .map(|(bits, timing)| PacketOutcome {
            tx_bits: bits.clone(),
            first_data: timing.first_data,
            rx: None,
        })
        .collect();
    let mut spurious = 0;
    for p in received {
        let slot = sched.index_at(p.first_frame_time).and_then(|i| {
            let f = &sched.frames[i];
            let pkt = f.packet?;
            let aligned = f.role == FrameRole::Data && (f.time - sched.packets[pkt].first_data).abs() < 1e-9;
            aligned.then_some(pkt)
        });
        match slot {
            Some(i) if outcomes[i].rx.is_none() && p.payload_bits.len() == outcomes[i].tx_bits.len() => {
                outcomes[i].rx = Some(p)
            }
            _ => spurious += 1,
        }
    }
    StreamResult {
        outcomes,
        spurious,
        captures: n,
        acquisitions: rx.acquisitions,
        stats: rx.stats(),
        frame_rate_tx: spec.frame_rate_tx,
        ended_early,
    }
}
