//! Per-node request burden: content addressing versus broadcast.
//!
//! Q co-located provider nodes each run an evaluator and a store. Under
//! content addressing, a call costs the system a fixed 2(n+m) requests
//! (publish and retrieve legs each touch n evaluators and m stores), and
//! the descriptor digest spreads them, so each node's mean burden is
//! 2(n+m)/Q per call and falls as the deployment grows.
//!
//! The broadcast baseline has no addressing: a record must reach every
//! node, and each node that receives it republishes to every peer, since
//! none can tell who already holds a copy. That floods Q(Q−1)+2 requests
//! per call through Q−1 republish rounds, so per-node burden grows with
//! the deployment instead of shrinking.
//!
//! When fewer than n distinct evaluators exist, selection wraps around
//! the closest-node list: the same node answers multiple legs of one
//! call, and the per-call request total stays 2(n+m).

use crate::crypto::Digest;
use crate::registry::{NodeType, Registry};
use ed25519_dalek::SigningKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BurdenConfig {
    /// Provider nodes, each hosting one evaluator and one store.
    pub q: usize,
    /// Evaluators consulted per call.
    pub n: usize,
    /// Stores holding each record.
    pub m: usize,
    /// Calls to simulate.
    pub calls: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BurdenReport {
    pub q: usize,
    pub n: usize,
    pub m: usize,
    pub calls: usize,
    /// Requests handled per provider node under content addressing.
    pub sidecar_per_node: Vec<u64>,
    pub sidecar_mean_per_node_per_call: f64,
    /// Requests handled per provider node under broadcast flooding.
    pub broadcast_per_node: Vec<u64>,
    pub broadcast_mean_per_node_per_call: f64,
    /// Republish rounds across the run; Q−1 per call.
    pub republishes: u64,
}

/// Simulate both dissemination models over the same deployment size.
pub fn baseline_burden(cfg: &BurdenConfig, seed: u64) -> BurdenReport {
    assert!(cfg.q >= 1, "at least one provider node");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut registry = Registry::new();
    let mut owner_of = std::collections::BTreeMap::new();
    for i in 0..cfg.q {
        let ev_key = SigningKey::generate(&mut rng);
        let ev_nid = registry
            .register_node(
                &format!("203.0.{}.{}:7000", i / 250, i % 250),
                NodeType::Ev,
                &ev_key.verifying_key(),
            )
            .expect("fresh evaluator address");
        owner_of.insert(ev_nid, i);
        let ms_key = SigningKey::generate(&mut rng);
        let ms_nid = registry
            .register_node(
                &format!("203.0.{}.{}:7100", i / 250, i % 250),
                NodeType::Ms,
                &ms_key.verifying_key(),
            )
            .expect("fresh store address");
        owner_of.insert(ms_nid, i);
    }

    let mut sidecar = vec![0u64; cfg.q];
    let mut broadcast = vec![0u64; cfg.q];
    let mut republishes = 0u64;

    for _ in 0..cfg.calls {
        let mut cdt = [0u8; 32];
        rng.fill(&mut cdt);
        let mut csk = [0u8; 32];
        rng.fill(&mut csk);

        let evs: Vec<Digest> = registry.get_ev(&cdt, cfg.n).iter().map(|r| r.nid).collect();
        let mss: Vec<Digest> = registry.get_ms(&csk, cfg.m).iter().map(|r| r.nid).collect();
        for leg in 0..2 {
            let _ = leg;
            for j in 0..cfg.n {
                sidecar[owner_of[&evs[j % evs.len()]]] += 1;
            }
            for j in 0..cfg.m {
                sidecar[owner_of[&mss[j % mss.len()]]] += 1;
            }
        }

        let origin = rng.gen_range(0..cfg.q);
        broadcast[origin] += 1;
        for target in 0..cfg.q {
            if target != origin {
                broadcast[target] += 1;
            }
        }
        for holder in 0..cfg.q {
            if holder == origin {
                continue;
            }
            republishes += 1;
            for target in 0..cfg.q {
                if target != holder {
                    broadcast[target] += 1;
                }
            }
        }
        broadcast[rng.gen_range(0..cfg.q)] += 1;
    }

    let denom = (cfg.q * cfg.calls) as f64;
    BurdenReport {
        q: cfg.q,
        n: cfg.n,
        m: cfg.m,
        calls: cfg.calls,
        sidecar_mean_per_node_per_call: sidecar.iter().sum::<u64>() as f64 / denom,
        sidecar_per_node: sidecar,
        broadcast_mean_per_node_per_call: broadcast.iter().sum::<u64>() as f64 / denom,
        broadcast_per_node: broadcast,
        republishes,
    }
}
