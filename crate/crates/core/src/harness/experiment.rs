//! Experiment sweeps over configuration points, result aggregation and CSV
//! output.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::link::{random_cpm, run_stream, StreamResult, StreamSpec};
use super::stats::{cp_lower_95, cp_upper_95, latency_eq1, CI_METHOD};
use crate::channel::{derive_seed, kmh_to_ms, CameraModel, SceneState};
use crate::config::{Preset, RunConfig};
use crate::cpm::{cpm_size_bits, encode_cpm, MAX_OBJECTS};
use crate::phy_rx::RxConfig;
use crate::phy_tx::MIN_IDLE_GAP;

const TRAILING_IDLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// One configuration point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub fps: f64,
    pub tx_rate: f64,
    pub distance_m: f64,
    pub speed_kmh: f64,
}

impl Point {
    /// Seed for this point, derived from the master seed and the point's
    /// parameters so the same point gets the same streams in any sweep.
    pub fn seed(&self, master: u64) -> u64 {
        let key = self.fps.to_bits() ^ self.distance_m.to_bits().rotate_left(21) ^ self.speed_kmh.to_bits().rotate_left(42);
        derive_seed(master, key)
    }
}

pub fn points(cfg: &RunConfig) -> Vec<Point> {
    let mut out = Vec::new();
    for &fps in &cfg.fps {
        for &d in &cfg.distances_m {
            for &v in &cfg.speeds_kmh {
                let distance_m = if v > 0.0 { cfg.drive_from_m } else { d };
                let p = Point {
                    fps,
                    tx_rate: fps / 2.0,
                    distance_m,
                    speed_kmh: v,
                };
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn validate(cfg: &RunConfig) -> Result<(), HarnessError> {
    let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
    if cfg.fps.is_empty() || cfg.distances_m.is_empty() || cfg.speeds_kmh.is_empty() {
        return bad("sweep axes must not be empty");
    }
    if cfg.fps.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return bad("fps must be positive");
    }
    if cfg.distances_m.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return bad("distances must be positive");
    }
    if cfg.speeds_kmh.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return bad("speeds must be non-negative");
    }
    if cfg.speeds_kmh.iter().any(|&v| v > 0.0) && !(cfg.drive_from_m > cfg.drive_to_m && cfg.drive_to_m > 0.0) {
        return bad("drive_from_m must exceed drive_to_m > 0");
    }
    if cfg.packets == 0 || cfg.streams == 0 || cfg.runs == 0 {
        return bad("packets, streams and runs must be positive");
    }
    if cfg.n_objects > MAX_OBJECTS {
        return bad("n_objects exceeds 255");
    }
    if !(cfg.scene.noise_sigma >= 0.0) {
        return bad("noise_sigma must be non-negative");
    }
    Ok(())
}

/// Data bytes per packet for this config.
pub fn n_frame(cfg: &RunConfig) -> usize {
    cpm_size_bits(cfg.n_objects).div_ceil(8)
}

pub fn rx_config(cfg: &RunConfig, fps: f64) -> RxConfig {
    RxConfig {
        diff_threshold: cfg.rx.diff_threshold,
        detect_snr: cfg.rx.detect_snr,
        contrast_floor: cfg.rx.contrast_floor,
        lost_limit: cfg.rx.lost_limit,
        track_gain: cfg.rx.track_gain,
        processing_delay: cfg.rx.processing_delay,
        n_frame: n_frame(cfg),
        captures_per_symbol: 2,
        frame_interval: 1.0 / fps,
        ..RxConfig::default()
    }
}

/// Stream layouts for a point: `(stream seed, packet count)` pairs.
pub fn stream_plan(cfg: &RunConfig, p: &Point) -> Vec<(u64, usize)> {
    let seed = p.seed(cfg.seed);
    if p.speed_kmh > 0.0 {
        let duration = (cfg.drive_from_m - cfg.drive_to_m) / kmh_to_ms(p.speed_kmh);
        let frames = (duration * p.tx_rate).floor() as usize;
        // the lead-in and first delimiter are sent before the window opens
        let per_packet = n_frame(cfg) + 1 + MIN_IDLE_GAP;
        let n = ((frames + 1 + MIN_IDLE_GAP).saturating_sub(TRAILING_IDLE) / per_packet).max(1);
        (0..cfg.runs).map(|r| (derive_seed(seed, r as u64), n)).collect()
    } else {
        let streams = cfg.streams.min(cfg.packets);
        (0..streams)
            .map(|s| {
                let n = cfg.packets / streams + usize::from(s < cfg.packets % streams);
                (derive_seed(seed, s as u64), n)
            })
            .collect()
    }
}

/// Builds the stream for one run at a point.
pub fn stream_spec(cfg: &RunConfig, p: &Point, stream_seed: u64, packets: usize) -> StreamSpec {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(stream_seed, 1));
    let symbol = 1.0 / p.tx_rate;
    let phase = if cfg.random_phase {
        rng.gen_range(0.0..symbol)
    } else {
        cfg.phase_fraction.rem_euclid(1.0) * symbol
    };
    let payloads = (0..packets)
        .map(|i| {
            let msg = random_cpm(&mut rng, cfg.n_objects, 1_000_000 * i as u64);
            encode_cpm(&msg, &cfg.key)
                .expect("random messages are in range")
                .padded_to_byte()
        })
        .collect();
    StreamSpec {
        payloads,
        frame_rate_tx: p.tx_rate,
        camera: CameraModel {
            frame_rate_cam: p.fps,
            phase_offset: phase,
            ..cfg.camera
        },
        scene: SceneState {
            distance: p.distance_m + kmh_to_ms(p.speed_kmh) * (cfg.lead_in + 1) as f64 / p.tx_rate,
            speed: kmh_to_ms(p.speed_kmh),
            rng_seed: derive_seed(stream_seed, 2),
            ..cfg.scene
        },
        rx: rx_config(cfg, p.fps),
        lead_in: cfg.lead_in,
        trailing_idle: TRAILING_IDLE,
        partial_render: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub preset: Preset,
    pub point: Point,
    pub noise_sigma: f64,
    pub seed: u64,
    pub packets_sent: usize,
    /// Packets reassembled and compared bit by bit.
    pub trials: usize,
    pub bits_sent: u64,
    pub bit_errors: u64,
    /// Transmitted packets that were never reassembled.
    pub erasures: usize,
    pub ber: Option<f64>,
    pub ber_lower_95: f64,
    pub ber_upper_95: f64,
    pub latency_eq1: f64,
    pub latency_mean: Option<f64>,
    pub latency_max: Option<f64>,
    pub latency_with_sync_mean: Option<f64>,
    pub spurious: usize,
}

impl ExperimentResult {
    pub fn all_erasure(&self) -> bool {
        self.trials == 0
    }

    /// The Clopper–Pearson interval, `(lower, upper)`.
    pub fn interval(&self) -> (f64, f64) {
        (self.ber_lower_95, self.ber_upper_95)
    }

    fn aggregate(cfg: &RunConfig, p: Point, runs: &[StreamResult]) -> Self {
        let mut bits = 0u64;
        let mut errors = 0u64;
        let mut sent = 0;
        let mut trials = 0;
        let mut spurious = 0;
        let mut lat = Vec::new();
        let mut lat_sync = Vec::new();
        for r in runs {
            sent += r.outcomes.len();
            spurious += r.spurious;
            for o in &r.outcomes {
                if let Some(e) = o.bit_errors() {
                    trials += 1;
                    bits += o.tx_bits.len() as u64;
                    errors += e as u64;
                }
            }
            lat.extend(r.latencies());
            lat_sync.extend(r.latencies_with_sync());
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let (ber, lo, hi) = if bits > 0 {
            (Some(errors as f64 / bits as f64), cp_lower_95(errors, bits), cp_upper_95(errors, bits))
        } else {
            (None, 0.0, 1.0)
        };
        ExperimentResult {
            preset: cfg.preset,
            point: p,
            noise_sigma: cfg.scene.noise_sigma,
            seed: p.seed(cfg.seed),
            packets_sent: sent,
            trials,
            bits_sent: bits,
            bit_errors: errors,
            erasures: sent - trials,
            ber,
            ber_lower_95: lo,
            ber_upper_95: hi,
            latency_eq1: latency_eq1(n_frame(cfg), p.fps),
            latency_mean: mean(&lat),
            latency_max: lat.iter().copied().reduce(f64::max),
            latency_with_sync_mean: mean(&lat_sync),
            spurious,
        }
    }
}

pub fn run_point(cfg: &RunConfig, p: &Point) -> ExperimentResult {
    let runs: Vec<StreamResult> = stream_plan(cfg, p)
        .into_par_iter()
        .map(|(seed, n)| run_stream(&stream_spec(cfg, p, seed, n)))
        .collect();
    ExperimentResult::aggregate(cfg, *p, &runs)
}

/// Runs every configuration point of the config.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<ExperimentResult>, HarnessError> {
    validate(cfg)?;
    Ok(points(cfg).iter().map(|p| run_point(cfg, p)).collect())
}

/// Invariant violations in a set of results, as human-readable lines.
pub fn check_invariants(cfg: &RunConfig, results: &[ExperimentResult]) -> Vec<String> {
    let mut bad = Vec::new();
    for r in results {
        let at = format!("fps={} d={} v={}", r.point.fps, r.point.distance_m, r.point.speed_kmh);
        if r.bit_errors > r.bits_sent {
            bad.push(format!("{at}: bit_errors > bits_sent"));
        }
        if let Some(b) = r.ber {
            if !(b <= r.ber_upper_95 && r.ber_upper_95 <= 1.0) {
                bad.push(format!("{at}: ber {b} not within upper bound {}", r.ber_upper_95));
            }
        }
        if cfg.scene.noise_sigma == 0.0 && r.point.speed_kmh <= 90.0 && r.bit_errors > 0 {
            bad.push(format!("{at}: {} bit errors on a noiseless channel", r.bit_errors));
        }
        let instantaneous = cfg.rx.processing_delay <= 1.0 / r.point.fps;
        if let (true, Some(l)) = (instantaneous && r.point.speed_kmh == 0.0, r.latency_mean) {
            if (l - r.latency_eq1).abs() > 1.0 / r.point.fps + 1e-9 {
                bad.push(format!("{at}: latency {l} departs from model {}", r.latency_eq1));
            }
        }
    }
    bad
}

pub const CSV_COLUMNS: &str =
    "preset,fps,tx_rate,distance_m,speed_kmh,packets,bits,errors,erasures,ber,ber_upper_95,latency_eq1_s,latency_meas_s,seed";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6e}"))
}

/// Result table with the resolved config embedded in the header comments.
pub fn to_csv(cfg: &RunConfig, results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# vlccp {} results", cfg.preset);
    let _ = writeln!(out, "# seed = {}", cfg.seed);
    let _ = writeln!(out, "# ci_method = {CI_METHOD} (two-sided 95%, upper end reported)");
    let _ = writeln!(out, "# ber = NA marks an all-erasure point");
    for line in cfg.to_toml().lines() {
        let _ = writeln!(out, "#| {line}");
    }
    let _ = writeln!(out, "{CSV_COLUMNS}");
    for r in results {
        let p = &r.point;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.6e},{:.6e},{},{}",
            r.preset,
            p.fps,
            p.tx_rate,
            p.distance_m,
            p.speed_kmh,
            r.trials,
            r.bits_sent,
            r.bit_errors,
            r.erasures,
            opt(r.ber),
            r.ber_upper_95,
            r.latency_eq1,
            opt(r.latency_mean),
            r.seed
        );
    }
    out
}

pub const CALIBRATION_TARGET: (f64, f64) = (5e-5, 5e-4);
pub const CALIBRATION_DISTANCE: f64 = 100.0;
pub const SIGMA_RANGE: (f64, f64) = (0.0, 64.0);
const CALIBRATION_STEPS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: f64,
    pub result: ExperimentResult,
    /// Every σ tried, with the BER it gave (`None` when all packets were lost).
    pub trace: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("calibration failed: no noise sigma in [0, 64] puts the 100 m BER in [5e-5, 5e-4] (tried {tried} values)")]
    BracketNotFound { tried: usize, trace: Vec<(f64, Option<f64>)> },
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// The config used for calibration: the range setup at 100 m only.
pub fn calibration_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        distances_m: vec![CALIBRATION_DISTANCE],
        speeds_kmh: vec![0.0],
        fps: vec![cfg.fps[0]],
        ..cfg.clone()
    }
}

/// Binary search on the noise sigma for a 100 m BER inside the target band.
pub fn calibrate(cfg: &RunConfig) -> Result<Calibration, CalibrationError> {
    let base = calibration_config(cfg);
    validate(&base)?;
    let p = points(&base)[0];
    let eval = |sigma: f64| {
        let mut c = base.clone();
        c.scene.noise_sigma = sigma;
        run_point(&c, &p)
    };
    let (lo_t, hi_t) = CALIBRATION_TARGET;
    let (mut lo, mut hi) = SIGMA_RANGE;
    let mut trace = Vec::new();
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        let r = eval(mid);
        trace.push((mid, r.ber));
        match r.ber {
            Some(b) if (lo_t..=hi_t).contains(&b) => {
                return Ok(Calibration { sigma: mid, result: r, trace });
            }
            Some(b) if b < lo_t => lo = mid,
            _ => hi = mid,
        }
    }
    Err(CalibrationError::BracketNotFound {
        tried: trace.len(),
        trace,
    })
}
