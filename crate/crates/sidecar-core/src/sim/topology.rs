//! Synthetic carrier interconnect graphs for deployment studies.
//!
//! Carriers form a preferential-attachment graph: high-degree carriers
//! pick up most new interconnects, mirroring how transit providers
//! concentrate traffic. Each edge is labeled with the signaling its link
//! preserves end-to-end, and each carrier is flagged as deployed or not,
//! with deployment probability weighted by degree (big carriers upgrade
//! first).
//!
//! A call takes the shortest route between two random carriers. The
//! out-of-band channel matters exactly when both endpoints have deployed
//! and some hop on the route strips modern signaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// What a carrier-to-carrier link carries end-to-end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    /// IP interconnect; in-band signaling survives the hop.
    Sip,
    /// Legacy time-division trunk; signaling metadata is stripped.
    Tdm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CarrierId(pub u32);

/// Generation parameters for a carrier graph.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TopologyConfig {
    /// Number of carriers.
    pub carriers: u32,
    /// Edges each new carrier attaches with.
    pub attach_edges: u32,
    /// Probability that a link is IP rather than legacy.
    pub p_sip: f64,
    /// Fraction of carriers that have deployed, weighted by degree.
    pub deploy_fraction: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            carriers: 50,
            attach_edges: 2,
            p_sip: 0.7,
            deploy_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Topology {
    pub carriers: u32,
    /// Adjacency with per-edge link kinds; undirected, both directions stored.
    pub links: BTreeMap<CarrierId, BTreeMap<CarrierId, LinkKind>>,
    pub deployed: BTreeSet<CarrierId>,
}

/// One simulated call route.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CallPath {
    pub src: CarrierId,
    pub dst: CarrierId,
    /// Carriers visited in order, endpoints included.
    pub route: Vec<CarrierId>,
    /// Link kinds along the route, one per hop.
    pub hops: Vec<LinkKind>,
}

impl CallPath {
    /// Whether this call needs the out-of-band channel: both endpoints
    /// deployed, and at least one hop strips signaling.
    pub fn needs_oob(&self, topo: &Topology) -> bool {
        topo.deployed.contains(&self.src)
            && topo.deployed.contains(&self.dst)
            && self.hops.contains(&LinkKind::Tdm)
    }
}

impl Topology {
    /// Generate a carrier graph deterministically from a seed.
    pub fn generate(cfg: &TopologyConfig, seed: u64) -> Topology {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = cfg.carriers.max(2);
        let m = cfg.attach_edges.max(1);
        let mut links: BTreeMap<CarrierId, BTreeMap<CarrierId, LinkKind>> = BTreeMap::new();
        let mut endpoint_pool: Vec<CarrierId> = Vec::new();

        let add_edge = |links: &mut BTreeMap<CarrierId, BTreeMap<CarrierId, LinkKind>>,
                            pool: &mut Vec<CarrierId>,
                            a: CarrierId,
                            b: CarrierId,
                            kind: LinkKind| {
            links.entry(a).or_default().insert(b, kind);
            links.entry(b).or_default().insert(a, kind);
            pool.push(a);
            pool.push(b);
        };

        let first_kind = if rng.gen_bool(cfg.p_sip) {
            LinkKind::Sip
        } else {
            LinkKind::Tdm
        };
        add_edge(
            &mut links,
            &mut endpoint_pool,
            CarrierId(0),
            CarrierId(1),
            first_kind,
        );

        for new in 2..n {
            let mut targets = BTreeSet::new();
            while targets.len() < m.min(new) as usize {
                let pick = endpoint_pool[rng.gen_range(0..endpoint_pool.len())];
                if pick.0 != new {
                    targets.insert(pick);
                }
            }
            for t in targets {
                let kind = if rng.gen_bool(cfg.p_sip) {
                    LinkKind::Sip
                } else {
                    LinkKind::Tdm
                };
                add_edge(&mut links, &mut endpoint_pool, CarrierId(new), t, kind);
            }
        }

        let want = ((n as f64) * cfg.deploy_fraction.clamp(0.0, 1.0)).round() as usize;
        let mut candidates: Vec<CarrierId> = (0..n).map(CarrierId).collect();
        let mut deployed = BTreeSet::new();
        while deployed.len() < want && !candidates.is_empty() {
            let total: f64 = candidates
                .iter()
                .map(|c| links.get(c).map_or(0, |e| e.len()) as f64)
                .sum();
            let mut ticket = rng.gen_range(0.0..total.max(1.0));
            let mut chosen = 0;
            for (i, c) in candidates.iter().enumerate() {
                ticket -= links.get(c).map_or(0, |e| e.len()) as f64;
                if ticket <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            deployed.insert(candidates.swap_remove(chosen));
        }

        Topology {
            carriers: n,
            links,
            deployed,
        }
    }

    pub fn degree(&self, c: CarrierId) -> usize {
        self.links.get(&c).map_or(0, |e| e.len())
    }

    /// Shortest route between two carriers, if connected.
    pub fn route(&self, src: CarrierId, dst: CarrierId) -> Option<Vec<CarrierId>> {
        if src == dst {
            return Some(vec![src]);
        }
        let mut prev: BTreeMap<CarrierId, CarrierId> = BTreeMap::new();
        let mut queue = VecDeque::from([src]);
        let mut seen = BTreeSet::from([src]);
        while let Some(cur) = queue.pop_front() {
            if let Some(edges) = self.links.get(&cur) {
                for &next in edges.keys() {
                    if seen.insert(next) {
                        prev.insert(next, cur);
                        if next == dst {
                            let mut path = vec![dst];
                            let mut at = dst;
                            while let Some(&p) = prev.get(&at) {
                                path.push(p);
                                at = p;
                            }
                            path.reverse();
                            return Some(path);
                        }
                        queue.push_back(next);
                    }
                }
            }
        }
        None
    }

    /// Draw a random call between distinct carriers and resolve its route.
    pub fn sample_call(&self, rng: &mut impl Rng) -> CallPath {
        loop {
            let src = CarrierId(rng.gen_range(0..self.carriers));
            let dst = CarrierId(rng.gen_range(0..self.carriers));
            if src == dst {
                continue;
            }
            if let Some(route) = self.route(src, dst) {
                let hops = route
                    .windows(2)
                    .map(|w| self.links[&w[0]][&w[1]])
                    .collect();
                return CallPath {
                    src,
                    dst,
                    route,
                    hops,
                };
            }
        }
    }

    /// Fraction of `calls` sampled routes that need the out-of-band channel.
    pub fn oob_fraction(&self, calls: u32, seed: u64) -> f64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut hits = 0u32;
        for _ in 0..calls {
            if self.sample_call(&mut rng).needs_oob(self) {
                hits += 1;
            }
        }
        f64::from(hits) / f64::from(calls.max(1))
    }
}
