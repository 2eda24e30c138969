//! Desk-scale simulation and capacity planning.
//!
//! Everything here runs in-process against the real protocol types:
//! [`system`] wires evaluators, message stores, the registrar, and the
//! audit log into one harness with a virtual clock and injectable faults;
//! [`scenario`] runs whole-call workloads over it; [`burden`] measures
//! per-node request load under content-addressed selection; [`latency`]
//! profiles end-to-end call latency from calibrated primitive costs;
//! [`estimate`] turns measured compute statistics into per-role capacity
//! figures; [`topology`] generates carrier graphs for deployment studies.

pub mod burden;
pub mod estimate;
pub mod latency;
pub mod scenario;
pub mod system;
pub mod topology;
