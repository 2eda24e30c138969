//! Capacity planning for a node role from measured compute statistics.
//!
//! Four ceiling formulas, applied per role:
//!
//! - vCPUs: `⌈rate × (median + 3·MAD)⌉`, the request rate one node sees
//!   times a latency budget padded by three median absolute deviations.
//! - Memory: `⌈peak/workers_measured × 1.5 × (2·vCPUs + 1)⌉`, scaling a
//!   measured per-worker peak to the recommended worker count for the
//!   estimated vCPUs, with 50% headroom.
//! - Storage: `⌈rate × retention × record_size × 1.5⌉`; live records only,
//!   since stores drop everything after the retention window.
//! - Bandwidth: `⌈rate × (request + response bytes) × 1.5⌉ × 8` bits/s.
//!
//! The defaults reproduce a national-scale deployment sized for 1.56
//! billion out-of-band calls per day spread over ten nodes per role.

use serde::{Deserialize, Serialize};

/// Relative headroom applied to memory, storage, and bandwidth.
pub const OVERHEAD: f64 = 1.5;

/// Measured inputs for one node role.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RoleProfile {
    /// Requests per second arriving at one node of this role.
    pub rate_hz: f64,
    /// Median handling compute time, seconds.
    pub median_s: f64,
    /// Median absolute deviation of the handling time, seconds.
    pub mad_s: f64,
    /// Peak resident memory observed, bytes.
    pub peak_memory_bytes: f64,
    /// Worker count the peak was measured under.
    pub measured_workers: f64,
    /// How long a record is retained, seconds.
    pub retention_s: f64,
    /// Average stored record size, bytes.
    pub record_bytes: f64,
    /// Request plus response size of the role's dominant exchange, bytes.
    pub exchange_bytes: f64,
}

/// Ceiling-formula outputs for one role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub vcpus: u64,
    pub memory_bytes: u64,
    pub storage_bytes: u64,
    pub bandwidth_bps: u64,
}

/// Daily call volume needing out-of-band signaling at national scale.
pub const DAILY_OOB_CALLS: f64 = 1.56e9;

/// Reference deployment size the defaults assume: nodes per role.
pub const REFERENCE_NODES_PER_ROLE: f64 = 10.0;

fn reference_rate_hz() -> f64 {
    DAILY_OOB_CALLS / (REFERENCE_NODES_PER_ROLE * 86_400.0)
}

impl RoleProfile {
    /// Evaluator defaults: measured medians for a blinded evaluation,
    /// 785 MB peak under four workers, and a 1.3 KB secret-generation
    /// exchange.
    pub fn evaluator() -> Self {
        RoleProfile {
            rate_hz: reference_rate_hz(),
            median_s: 5.267e-3,
            mad_s: 0.140e-3,
            peak_memory_bytes: 785e6,
            measured_workers: 4.0,
            retention_s: 15.0,
            record_bytes: 1536.0,
            exchange_bytes: 1300.0,
        }
    }

    /// Message-store defaults: measured medians for a store round,
    /// 850 MB peak under four workers. The dominant exchanges are a
    /// 1.5 KiB publish and a 2.2 KiB retrieval; one node serves both, so
    /// the bandwidth input is their sum.
    pub fn message_store() -> Self {
        RoleProfile {
            rate_hz: reference_rate_hz(),
            median_s: 4.976e-3,
            mad_s: 0.057e-3,
            peak_memory_bytes: 850e6,
            measured_workers: 4.0,
            retention_s: 15.0,
            record_bytes: 1536.0,
            exchange_bytes: 1536.0 + 2252.8,
        }
    }
}

/// Apply the four ceiling formulas to one role profile.
pub fn estimate_resources(p: &RoleProfile) -> ResourceEstimate {
    let vcpus = (p.rate_hz * (p.median_s + 3.0 * p.mad_s)).ceil() as u64;
    let workers = 2 * vcpus + 1;
    let per_worker = if p.measured_workers > 0.0 {
        p.peak_memory_bytes / p.measured_workers
    } else {
        0.0
    };
    let memory_bytes = (per_worker * OVERHEAD * workers as f64).ceil() as u64;
    let storage_bytes = (p.rate_hz * p.retention_s * p.record_bytes * OVERHEAD).ceil() as u64;
    let bandwidth_bps = ((p.rate_hz * p.exchange_bytes * OVERHEAD).ceil() * 8.0) as u64;
    ResourceEstimate {
        vcpus,
        memory_bytes,
        storage_bytes,
        bandwidth_bps,
    }
}
