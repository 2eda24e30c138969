//! Whole-call workloads over a simulated deployment.
//!
//! [`run_scenario`] draws call paths from a carrier topology, runs the
//! ones that need the out-of-band channel through a [`System`], and
//! tallies what an operator would care about afterwards: delivery rate,
//! per-node load, complaints and their verdicts against ground truth,
//! and token settlement. Publisher and retriever are the two endpoint
//! carriers' providers, so every call exercises the cross-provider
//! derivation path.

use crate::admin::DisputeVerdict;
use crate::crypto::Digest;
use crate::provider::CallDetails;
use crate::sim::system::{FaultPlan, System, SystemConfig};
use crate::sim::topology::Topology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Out-of-band calls to execute.
    pub calls: usize,
    /// Evaluator fleet size.
    pub n_ev: usize,
    /// Store fleet size.
    pub n_ms: usize,
    /// Evaluators per call.
    pub n: usize,
    /// Stores per record.
    pub m: usize,
    /// Evaluator key-ring size.
    pub s: u32,
    pub t_rot_ms: u64,
    pub eps_ms: u64,
    pub t_max_ms: u64,
    /// Evaluators answering under unannounced keys.
    pub wrong_key_evs: usize,
    /// Stores acknowledging then denying uploads.
    pub denying_mss: usize,
    /// Stores silently dropping all traffic.
    pub dropping_mss: usize,
    /// Random per-node clock offset drawn from ±this bound.
    pub max_skew_ms: i64,
    /// Cross-context token reuses to inject.
    pub token_reuses: usize,
    /// Publish-to-retrieve delay range, drawn per call.
    pub delay_ms: (u64, u64),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            calls: 50,
            n_ev: 10,
            n_ms: 10,
            n: 3,
            m: 3,
            s: 8,
            t_rot_ms: 60_000,
            eps_ms: 5_000,
            t_max_ms: 15_000,
            wrong_key_evs: 0,
            denying_mss: 0,
            dropping_mss: 0,
            max_skew_ms: 0,
            token_reuses: 0,
            delay_ms: (100, 1_000),
        }
    }
}

/// One resolved dispute, judged against the injected ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisputeOutcome {
    pub seq: u64,
    pub accused: Digest,
    pub verdict: DisputeVerdict,
    pub accused_was_faulty: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioReport {
    /// Out-of-band calls executed.
    pub calls: usize,
    /// Call paths sampled from the topology to find them.
    pub sampled: usize,
    /// Fraction of sampled paths needing the out-of-band channel.
    pub oob_fraction: f64,
    pub successes: usize,
    pub success_rate: f64,
    pub per_node_requests: BTreeMap<Digest, u64>,
    pub complaints: usize,
    pub verdicts: Vec<DisputeOutcome>,
    /// Dishonest verdicts against nodes that were not in the fault plan.
    pub misattributions: usize,
    /// Nodes the fault plan made dishonest.
    pub faulty_nodes: BTreeSet<Digest>,
    /// Faulty nodes with at least one dishonest verdict against them.
    pub convicted_faulty: BTreeSet<Digest>,
    /// Tokens deliberately reused across contexts.
    pub reused_tokens: BTreeSet<Digest>,
    /// Tokens settlement flagged as conflicting.
    pub conflicted_tokens: BTreeSet<Digest>,
    /// Conflicts whose group signatures opened to a provider identity.
    pub deanonymized: usize,
}

fn inject_reuse(sys: &mut System, provider: &str, tag: u64) -> Digest {
    let token = sys.take_token(provider);
    let src = format!("1999555{:04}", tag % 10_000);
    let dst = format!("1998555{:04}", tag % 10_000);
    let mut ts = sys.now_ms();
    let call_a = CallDetails::at_epoch_ms(&src, &dst, ts);
    let set_a: BTreeSet<Digest> = sys
        .call_target(provider, call_a.clone())
        .expect("populated registry")
        .ev_nids()
        .into_iter()
        .collect();
    let call_b = loop {
        ts += 60_000;
        let cand = CallDetails::at_epoch_ms(&src, &dst, ts);
        let set_b: BTreeSet<Digest> = sys
            .call_target(provider, cand.clone())
            .expect("populated registry")
            .ev_nids()
            .into_iter()
            .collect();
        if set_b.difference(&set_a).count() > 0 {
            break cand;
        }
    };
    let _ = sys.publish_with_token(provider, call_a, b"reused-context-a", &token);
    let _ = sys.publish_with_token(provider, call_b, b"reused-context-b", &token);
    token.t0
}

/// Run `cfg.calls` out-of-band calls drawn from `topo` and audit the
/// aftermath.
pub fn run_scenario(topo: &Topology, cfg: &ScenarioConfig, seed: u64) -> ScenarioReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sys = System::new(
        SystemConfig {
            n_ev: cfg.n_ev,
            n_ms: cfg.n_ms,
            n: cfg.n,
            m: cfg.m,
            s: cfg.s,
            t_rot_ms: cfg.t_rot_ms,
            eps_ms: cfg.eps_ms,
            t_max_ms: cfg.t_max_ms,
            delta: 0.25,
            providers: Vec::new(),
            tokens_per_provider: 16,
        },
        seed.wrapping_add(1),
    );

    let ev_nids = sys.ev_nids();
    let ms_nids = sys.ms_nids();
    let mut plan = FaultPlan {
        wrong_key_evs: ev_nids.iter().take(cfg.wrong_key_evs).copied().collect(),
        denying_mss: ms_nids.iter().take(cfg.denying_mss).copied().collect(),
        dropping_mss: ms_nids
            .iter()
            .skip(cfg.denying_mss)
            .take(cfg.dropping_mss)
            .copied()
            .collect(),
        clock_skew_ms: BTreeMap::new(),
    };
    if cfg.max_skew_ms > 0 {
        for nid in ev_nids.iter().chain(ms_nids.iter()) {
            plan.clock_skew_ms
                .insert(*nid, rng.gen_range(-cfg.max_skew_ms..=cfg.max_skew_ms));
        }
    }
    let faulty: BTreeSet<Digest> = plan
        .wrong_key_evs
        .iter()
        .chain(plan.denying_mss.iter())
        .chain(plan.dropping_mss.iter())
        .copied()
        .collect();
    sys.set_faults(plan);

    let reuse_every = if cfg.token_reuses > 0 {
        (cfg.calls / cfg.token_reuses).max(1)
    } else {
        usize::MAX
    };
    let mut reused_tokens = BTreeSet::new();
    let mut executed = 0usize;
    let mut sampled = 0usize;
    let mut oob = 0usize;
    let mut successes = 0usize;
    let sample_budget = cfg.calls.saturating_mul(200) + 200;

    while executed < cfg.calls && sampled < sample_budget {
        let path = topo.sample_call(&mut rng);
        sampled += 1;
        if !path.needs_oob(topo) {
            continue;
        }
        oob += 1;
        let publisher = format!("carrier-{}", path.src.0);
        let retriever = format!("carrier-{}", path.dst.0);
        sys.ensure_provider(&publisher);
        sys.ensure_provider(&retriever);

        let seq = executed as u64;
        let src_num = format!("1{:03}555{:04}", path.src.0 % 1_000, seq % 10_000);
        let dst_num = format!("1{:03}555{:04}", path.dst.0 % 1_000, (seq + 7) % 10_000);
        let msg = format!("brand:carrier-{} call:{}", path.src.0, seq).into_bytes();
        let call = CallDetails::at_epoch_ms(&src_num, &dst_num, sys.now_ms());

        let published = sys.publish(&publisher, call.clone(), &msg).is_ok();
        sys.advance(rng.gen_range(cfg.delay_ms.0..=cfg.delay_ms.1));
        let delivered = published
            && matches!(sys.retrieve(&retriever, call), Ok(got) if got.msg == msg);
        if delivered {
            successes += 1;
        }
        sys.sync();

        if reused_tokens.len() < cfg.token_reuses && executed % reuse_every == 0 {
            let t0 = inject_reuse(&mut sys, &publisher, seq);
            reused_tokens.insert(t0);
            sys.sync();
        }
        executed += 1;
    }

    let rows = sys.resolve_all_disputes();
    let verdicts: Vec<DisputeOutcome> = rows
        .into_iter()
        .map(|r| DisputeOutcome {
            seq: r.seq,
            accused: r.accused,
            verdict: r.verdict,
            accused_was_faulty: faulty.contains(&r.accused),
        })
        .collect();
    let misattributions = verdicts
        .iter()
        .filter(|v| v.verdict == DisputeVerdict::NodeDishonest && !v.accused_was_faulty)
        .count();
    let convicted_faulty = verdicts
        .iter()
        .filter(|v| v.verdict == DisputeVerdict::NodeDishonest && v.accused_was_faulty)
        .map(|v| v.accused)
        .collect();

    let settlement = sys.settle();
    let conflicted_tokens: BTreeSet<Digest> = settlement
        .reconcile
        .conflicts
        .iter()
        .map(|c| c.token)
        .collect();
    let deanonymized = settlement
        .faulters
        .values()
        .filter(|ids| !ids.is_empty())
        .count();

    ScenarioReport {
        calls: executed,
        sampled,
        oob_fraction: if sampled > 0 {
            oob as f64 / sampled as f64
        } else {
            0.0
        },
        successes,
        success_rate: if executed > 0 {
            successes as f64 / executed as f64
        } else {
            0.0
        },
        per_node_requests: sys.request_counts(),
        complaints: sys.als.complaints().len(),
        verdicts,
        misattributions,
        faulty_nodes: faulty,
        convicted_faulty,
        reused_tokens,
        conflicted_tokens,
        deanonymized,
    }
}

/// Probability that at least one of `m` independent replicas with
/// per-replica availability `p` serves a record, estimated by sampling.
pub fn retrievability_with_replicas(p: f64, m: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut served = 0usize;
    for _ in 0..trials {
        if (0..m).any(|_| rng.gen_bool(p)) {
            served += 1;
        }
    }
    served as f64 / trials.max(1) as f64
}
