//! Visible-light collective perception: a compact CPM codec, an LED-bar
//! on-off keying transmitter, a camera channel simulator, the camera-side
//! receiver and the latency/BER experiment harness built on them.

pub mod bits;
pub mod channel;
pub mod cpm;
pub mod phy_tx;
pub mod phy_rx;
pub mod config;
pub mod harness;
