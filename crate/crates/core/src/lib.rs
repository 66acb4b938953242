//! Knowledge transfer from static images to event-camera data for spiking
//! neural networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`events`]: DVS event streams, the `.evt` codec, frame integration and a
//!   contrast-threshold event simulator.
//! - [`numerics`]: `f64` tensors with a reverse-mode tape.
//! - [`snn`]: LIF layers, surrogate spikes and the shared-trunk network with
//!   two membrane-potential heads.
//! - [`losses`]: HSIC/CKA/MMD, TET classification loss, domain alignment and
//!   knowledge-transfer losses.
//! - [`transfer`]: input encoding, paired sampling, the sliding replacement
//!   schedule and the training loop.
//! - [`datasets`]: a seeded synthetic corpus of paired static/event samples.
//! - [`analysis`]: cross-model CKA heatmaps and membrane-potential histograms.

pub mod analysis;
pub mod datasets;
pub mod events;
pub mod numerics;
pub mod losses;
pub mod snn;
pub mod transfer;
