//! Node registry and rendezvous selection.
//!
//! The registrar tracks every enrolled evaluator and message-store node.
//! A node's identifier is derived from what it registered with,
//! `nid = H(nip ‖ role-label ‖ ipk)`, so an identifier commits to the
//! node's address, role, and response-signing key.
//!
//! Callers and nodes independently agree on which nodes serve a given value
//! by XOR distance: the nodes whose `H(nid)` is closest to `H(x)` win. Both
//! sides hash before XORing so neither registration choices nor input
//! structure can bias placement. Selection uses a bounded max-heap rather
//! than a full sort, so a query costs at most `4·|N|·log2(q)` comparisons
//! while returning exactly the `q` closest.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};

use crate::crypto::{h_concat, h_digest, Digest};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("node already registered: {0}")]
    DuplicateNode(Digest),
    #[error("unknown node: {0}")]
    UnknownNode(Digest),
}

/// Role of a registered node.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    /// Evaluator: answers blinded OPRF requests.
    Ev,
    /// Message store: holds encrypted call records.
    Ms,
}

impl NodeType {
    pub fn label(&self) -> &'static str {
        match self {
            NodeType::Ev => "ev",
            NodeType::Ms => "ms",
        }
    }
}

impl std::fmt::Display for NodeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub(crate) mod ipk_serde {
    use ed25519_dalek::VerifyingKey;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(k: &VerifyingKey, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(k.to_bytes()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<VerifyingKey, D::Error> {
        let text = String::deserialize(d)?;
        let bytes: [u8; 32] = hex::decode(&text)
            .map_err(serde::de::Error::custom)?
            .try_into()
            .map_err(|_| serde::de::Error::custom("bad key length"))?;
        VerifyingKey::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// One registered node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeRecord {
    pub nid: Digest,
    /// Network address the node registered under.
    pub nip: String,
    pub ntyp: NodeType,
    /// Ed25519 key the node signs responses with.
    #[serde(with = "ipk_serde")]
    pub ipk: VerifyingKey,
    /// Cached H(nid); recomputed on import rather than trusted from disk.
    #[serde(skip, default = "zero_digest")]
    nid_hash: Digest,
}

fn zero_digest() -> Digest {
    Digest([0u8; 32])
}

/// Derive a node identifier from its registration data.
pub fn derive_nid(nip: &str, ntyp: NodeType, ipk: &VerifyingKey) -> Digest {
    h_concat(&[nip.as_bytes(), ntyp.label().as_bytes(), &ipk.to_bytes()])
}

/// Registry of active nodes plus the set of revoked identifiers.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "RegistryWire", into = "RegistryWire")]
pub struct Registry {
    records: BTreeMap<Digest, NodeRecord>,
    revoked: BTreeSet<Digest>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RegistryWire {
    records: BTreeMap<Digest, NodeRecord>,
    revoked: BTreeSet<Digest>,
}

impl From<RegistryWire> for Registry {
    fn from(w: RegistryWire) -> Self {
        let mut reg = Registry {
            records: w.records,
            revoked: w.revoked,
        };
        reg.rebuild_caches();
        reg
    }
}

impl From<Registry> for RegistryWire {
    fn from(r: Registry) -> Self {
        RegistryWire {
            records: r.records,
            revoked: r.revoked,
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Recompute derived caches. Deserialization already does this; it only
    /// needs calling after direct record manipulation in tests.
    pub fn rebuild_caches(&mut self) {
        for rec in self.records.values_mut() {
            rec.nid_hash = h_digest(rec.nid.as_bytes());
        }
    }

    pub fn register_node(
        &mut self,
        nip: &str,
        ntyp: NodeType,
        ipk: &VerifyingKey,
    ) -> Result<Digest, RegistryError> {
        let nid = derive_nid(nip, ntyp, ipk);
        if self.records.contains_key(&nid) || self.revoked.contains(&nid) {
            return Err(RegistryError::DuplicateNode(nid));
        }
        let nid_hash = h_digest(nid.as_bytes());
        self.records.insert(
            nid,
            NodeRecord {
                nid,
                nip: nip.to_string(),
                ntyp,
                ipk: *ipk,
                nid_hash,
            },
        );
        Ok(nid)
    }

    /// Remove a node from the active set. Revoked identifiers stay on a
    /// list so they can be audited and can never re-enroll.
    pub fn revoke_node(&mut self, nid: &Digest) -> Result<(), RegistryError> {
        if self.records.remove(nid).is_none() {
            return Err(RegistryError::UnknownNode(*nid));
        }
        self.revoked.insert(*nid);
        Ok(())
    }

    pub fn get(&self, nid: &Digest) -> Option<&NodeRecord> {
        self.records.get(nid)
    }

    pub fn revoked(&self) -> impl Iterator<Item = &Digest> {
        self.revoked.iter()
    }

    pub fn is_revoked(&self, nid: &Digest) -> bool {
        self.revoked.contains(nid)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.records.values()
    }

    pub fn nodes_of_type(&self, ntyp: NodeType) -> impl Iterator<Item = &NodeRecord> {
        self.records.values().filter(move |r| r.ntyp == ntyp)
    }

    pub fn count_of_type(&self, ntyp: NodeType) -> usize {
        self.nodes_of_type(ntyp).count()
    }

    /// The `q` active nodes of role `ntyp` closest to `x` in XOR distance
    /// over hashed identifiers, ascending by `(distance, nid)`.
    pub fn get_nodes(&self, x: &[u8], q: usize, ntyp: NodeType) -> Vec<(Digest, Digest)> {
        self.get_nodes_counted(x, q, ntyp).0
    }

    /// The `n` evaluator nodes responsible for a call descriptor digest.
    pub fn get_ev(&self, x: &[u8], n: usize) -> Vec<&NodeRecord> {
        self.get_nodes(x, n, NodeType::Ev)
            .iter()
            .filter_map(|(_, nid)| self.get(nid))
            .collect()
    }

    /// The `m` store nodes responsible for a call secret.
    pub fn get_ms(&self, x: &[u8], m: usize) -> Vec<&NodeRecord> {
        self.get_nodes(x, m, NodeType::Ms)
            .iter()
            .filter_map(|(_, nid)| self.get(nid))
            .collect()
    }

    /// As [`get_nodes`](Self::get_nodes), also reporting how many ordering
    /// comparisons the selection spent.
    pub fn get_nodes_counted(
        &self,
        x: &[u8],
        q: usize,
        ntyp: NodeType,
    ) -> (Vec<(Digest, Digest)>, u64) {
        if q == 0 {
            return (Vec::new(), 0);
        }
        let hx = h_digest(x);
        let mut heap = BoundedMaxHeap::new(q);
        for rec in self.nodes_of_type(ntyp) {
            heap.offer((xor_bytes(&hx, &rec.nid_hash), rec.nid));
        }
        heap.into_sorted_ascending()
    }
}

/// Canonical byte encoding of a node set for hashing: member nids
/// concatenated in ascending byte order. Every party that hashes a set
/// (request digests, token contexts, bulletin-board bindings) uses this,
/// so transport order can never change a digest.
pub fn canonical_set_bytes(nids: &[Digest]) -> Vec<u8> {
    let mut sorted: Vec<&Digest> = nids.iter().collect();
    sorted.sort();
    let mut out = Vec::with_capacity(32 * nids.len());
    for nid in sorted {
        out.extend_from_slice(nid.as_bytes());
    }
    out
}

fn xor_bytes(a: &Digest, b: &Digest) -> Digest {
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = a.0[i] ^ b.0[i];
    }
    Digest(out)
}

/// Max-heap over `(distance, nid)` keeping the `cap` smallest entries seen.
/// Every ordering comparison is counted, including the final sort, so the
/// per-query comparison bound can be asserted directly.
struct BoundedMaxHeap {
    items: Vec<(Digest, Digest)>,
    cap: usize,
    comparisons: u64,
}

impl BoundedMaxHeap {
    fn new(cap: usize) -> Self {
        BoundedMaxHeap {
            items: Vec::with_capacity(cap.min(1024)),
            cap,
            comparisons: 0,
        }
    }

    fn less(&mut self, a: &(Digest, Digest), b: &(Digest, Digest)) -> bool {
        self.comparisons += 1;
        a < b
    }

    fn offer(&mut self, item: (Digest, Digest)) {
        if self.items.len() < self.cap {
            self.items.push(item);
            self.sift_up(self.items.len() - 1);
        } else {
            let root = self.items[0];
            if self.less(&item, &root) {
                self.items[0] = item;
                self.sift_down(0);
            }
        }
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            let parent_item = self.items[parent];
            let child_item = self.items[i];
            if self.less(&parent_item, &child_item) {
                self.items.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        loop {
            let left = 2 * i + 1;
            let right = left + 1;
            if left >= self.items.len() {
                break;
            }
            let mut largest = left;
            if right < self.items.len() {
                let l = self.items[left];
                let r = self.items[right];
                if self.less(&l, &r) {
                    largest = right;
                }
            }
            let cur = self.items[i];
            let big = self.items[largest];
            if self.less(&cur, &big) {
                self.items.swap(i, largest);
                i = largest;
            } else {
                break;
            }
        }
    }

    fn into_sorted_ascending(mut self) -> (Vec<(Digest, Digest)>, u64) {
        let mut items = std::mem::take(&mut self.items);
        let mut cmp = self.comparisons;
        items.sort_by(|a, b| {
            cmp += 1;
            a.cmp(b)
        });
        (items, cmp)
    }
}
