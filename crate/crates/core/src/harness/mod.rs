//! Latency and bit-error experiments over the simulated link.

pub mod experiment;
pub mod link;
pub mod stats;

pub use experiment::{
    calibrate, check_invariants, run_experiment, run_point, to_csv, Calibration, CalibrationError, ExperimentResult,
    HarnessError, Point,
};
pub use link::{measure_latency, run_stream, NoMeasurement, StreamResult, StreamSpec};
pub use stats::{ber, cp_lower_95, cp_upper_95, latency_eq1};
