//! Deterministic five-stage RISC-V pipeline simulator with per-stage
//! selective hardening, a calibrated fault-injection and timing-fragility
//! model, and an experiment harness.

pub mod faults;
pub mod fragility;
pub mod hardening;
pub mod harness;
pub mod isa;
pub mod pipeline;
pub mod tradeoff;
pub mod workload;
