//! Admin and Audit Log Server: provider enrollment and revocation, node
//! registration, the billing clearinghouse, hash-chained append-only audit
//! lists, dispute resolution, rotation audits, and node health pulses.
//!
//! The reference deployment runs the Admin, the clearinghouse, and the ALS
//! in one process, but they are three separate interface surfaces:
//! [`Admin`] owns enrollment, revocation, and settlement; the ALS lives in
//! [`Als`] and only ever appends; the clearinghouse is the billing module
//! invoked through [`Admin::settle`].
//!
//! Everything the ALS stores was verified at ingest: the provider's group
//! signature on the request, and the node's signature on whatever the node
//! asserted (a response, an ack, a not-found, a rotation). Entries that
//! fail verification are counted and dropped. Once in, entries are chained
//! by digest, so any later tampering is caught by replaying the chain.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::{Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::billing::{
    deanonymize_faulter, init_cycle, reconcile, spend_context, BillingCycleKeys, ContextKind,
    ReconcileReport, SpendRecord,
};
use crate::crypto::{h_concat, Digest};
use crate::evaluator::{response_digest, CidgenFeedback, EvalOutcome, RotationLogEntry};
use crate::groupsig::{gsetup, gverify, join, open, GroupManagerKey, GroupPublicKey,
    GroupSigningKey};
use crate::msgstore::{
    ack_message, hit_message, not_found_message, MsOutcome, RetrieveFeedback, StoreFeedback,
};
use crate::provider::{EvComplaint, MisbehaviorReport, MsCorruptComplaint, MsDenialComplaint};
use crate::registry::{NodeRecord, NodeType, Registry, RegistryError};
use crate::voprf::{verify_blinded_pair, OprfPublicKey};

/// System-wide parameters the auditors judge nodes against.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdminParams {
    /// Evaluator key-ring size.
    pub s: u32,
    /// Scheduled rotation period.
    pub t_rot_ms: u64,
    /// Grace window for a just-retired key.
    pub eps_ms: u64,
    /// Record retention bound at the stores.
    pub t_max_ms: u64,
    /// Relative tolerance on rotation timing before it counts as anomalous.
    pub delta: f64,
}

impl Default for AdminParams {
    fn default() -> Self {
        AdminParams {
            s: 64,
            t_rot_ms: 60_000,
            eps_ms: 5_000,
            t_max_ms: 15_000,
            delta: 0.25,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AdminError {
    #[error("provider identity is revoked: {0}")]
    RevokedProvider(String),
    #[error("provider identity already enrolled: {0}")]
    DuplicateProvider(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Point-in-time snapshot of everything currently revoked. Nodes fetch
/// this to decide whether to keep serving a peer; the version is monotone
/// so a cached copy can be compared for staleness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RevocationList {
    pub version: u64,
    pub providers: BTreeSet<String>,
    pub nodes: BTreeSet<Digest>,
}

impl RevocationList {
    pub fn contains_provider(&self, id: &str) -> bool {
        self.providers.contains(id)
    }

    pub fn contains_node(&self, nid: &Digest) -> bool {
        self.nodes.contains(nid)
    }
}

/// End-of-cycle settlement: the reconciliation report plus, for every
/// conflicted token, the provider identities its signatures open to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SettlementReport {
    pub reconcile: ReconcileReport,
    pub faulters: BTreeMap<Digest, Vec<String>>,
}

/// Group manager, registry authority, and clearinghouse host.
pub struct Admin {
    mgr: GroupManagerKey,
    gpk: GroupPublicKey,
    pub registry: Registry,
    revoked_providers: BTreeSet<String>,
    revocation_version: u64,
    cycle: BillingCycleKeys,
}

impl Admin {
    pub fn new(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let (gpk, mgr) = gsetup(rng);
        Admin {
            mgr,
            gpk,
            registry: Registry::new(),
            revoked_providers: BTreeSet::new(),
            revocation_version: 0,
            cycle: init_cycle(None, rng),
        }
    }

    pub fn gpk(&self) -> GroupPublicKey {
        self.gpk.clone()
    }

    /// Current billing cycle keys (the clearinghouse's mint endorsement
    /// key lives here).
    pub fn cycle(&self) -> &BillingCycleKeys {
        &self.cycle
    }

    /// Start the next billing cycle; previously minted tokens stop
    /// verifying.
    pub fn rotate_cycle(&mut self, rng: &mut (impl RngCore + CryptoRng)) -> u64 {
        self.cycle = init_cycle(Some(&self.cycle), rng);
        self.cycle.cycle_id
    }

    /// Enroll a provider and issue its anonymous signing credential.
    pub fn register_provider(
        &mut self,
        identity: &str,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<GroupSigningKey, AdminError> {
        if self.revoked_providers.contains(identity) {
            return Err(AdminError::RevokedProvider(identity.to_string()));
        }
        if self.mgr.members().any(|m| m == identity) {
            return Err(AdminError::DuplicateProvider(identity.to_string()));
        }
        Ok(join(&mut self.mgr, identity, rng))
    }

    /// Bar an identity from future enrollment. Signatures it already
    /// produced remain openable against the roster.
    pub fn revoke_provider(&mut self, identity: &str) {
        if self.revoked_providers.insert(identity.to_string()) {
            self.revocation_version += 1;
        }
    }

    pub fn register_node(
        &mut self,
        nip: &str,
        ntyp: NodeType,
        ipk: &VerifyingKey,
    ) -> Result<NodeRecord, AdminError> {
        let nid = self.registry.register_node(nip, ntyp, ipk)?;
        Ok(self
            .registry
            .get(&nid)
            .expect("registered a moment ago")
            .clone())
    }

    pub fn revoke_node(&mut self, nid: &Digest) -> Result<(), AdminError> {
        self.registry.revoke_node(nid)?;
        self.revocation_version += 1;
        Ok(())
    }

    pub fn revocation_list(&self) -> RevocationList {
        RevocationList {
            version: self.revocation_version,
            providers: self.revoked_providers.clone(),
            nodes: self.registry.revoked().copied().collect(),
        }
    }

    /// Open a group signature to the member identity that produced it.
    /// Restricted to the Admin because it is the anonymity trapdoor; the
    /// billing path only calls it on proven double-spends.
    pub fn open_signature(&self, msg: &[u8], sigma: &crate::groupsig::GroupSignature)
        -> Option<String> {
        open(&self.gpk, &self.mgr, msg, sigma)
    }

    /// Clearinghouse settlement over audit-log spend records: per-node
    /// redemption counts, token conflicts, and the deanonymized identity
    /// behind every conflict.
    pub fn settle(&self, records: &[SpendRecord]) -> SettlementReport {
        let reconcile = reconcile(records);
        let faulters = reconcile
            .conflicts
            .iter()
            .filter_map(|c| {
                deanonymize_faulter(c, &self.gpk, &self.mgr)
                    .ok()
                    .map(|ids| (c.token, ids))
            })
            .collect();
        SettlementReport {
            reconcile,
            faulters,
        }
    }
}

const GENESIS: Digest = Digest([0u8; 32]);

/// One committed log entry: the payload plus its position and the digest
/// binding it to everything before it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainedEntry<T> {
    pub seq: u64,
    pub prev: Digest,
    pub ingested_at_ms: u64,
    pub entry: T,
    pub digest: Digest,
}

fn chain_digest<T: Serialize>(prev: &Digest, seq: u64, ingested_at_ms: u64, entry: &T) -> Digest {
    let body = serde_json::to_vec(entry).expect("log entries serialize");
    h_concat(&[
        prev.as_bytes(),
        &seq.to_be_bytes(),
        &ingested_at_ms.to_be_bytes(),
        &body,
    ])
}

/// An append-only list. There is no mutation API; verification replays the
/// digests from genesis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Chain<T> {
    entries: Vec<ChainedEntry<T>>,
}

impl<T> Default for Chain<T> {
    fn default() -> Self {
        Chain {
            entries: Vec::new(),
        }
    }
}

impl<T: Serialize> Chain<T> {
    pub fn new() -> Self {
        Chain {
            entries: Vec::new(),
        }
    }

    pub fn head(&self) -> Digest {
        self.entries.last().map_or(GENESIS, |e| e.digest)
    }

    fn append(&mut self, entry: T, now_ms: u64) -> u64 {
        let seq = self.entries.len() as u64;
        let prev = self.head();
        let digest = chain_digest(&prev, seq, now_ms, &entry);
        self.entries.push(ChainedEntry {
            seq,
            prev,
            ingested_at_ms: now_ms,
            entry,
            digest,
        });
        seq
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, seq: u64) -> Option<&ChainedEntry<T>> {
        self.entries.get(seq as usize)
    }

    pub fn entries(&self) -> &[ChainedEntry<T>] {
        &self.entries
    }

    /// Replay the chain and confirm every link still hashes to its
    /// recorded digest.
    pub fn verify(&self) -> bool {
        let mut prev = GENESIS;
        for (i, e) in self.entries.iter().enumerate() {
            if e.seq != i as u64
                || e.prev != prev
                || e.digest != chain_digest(&prev, e.seq, e.ingested_at_ms, &e.entry)
            {
                return false;
            }
            prev = e.digest;
        }
        true
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AlsError {
    /// The submitting or accused node is not registered under the
    /// required role.
    #[error("unknown node: {0}")]
    UnknownNode(Digest),
    /// A signature embedded in the entry fails, or the entry's shape does
    /// not match its kind.
    #[error("entry signature does not verify")]
    BadSignature,
}

/// One submission to the audit log, tagged with its destination list.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AlsSubmission {
    #[serde(rename = "cidgen")]
    Cidgen(CidgenFeedback),
    #[serde(rename = "cidcomp")]
    Complaint(MisbehaviorReport),
    #[serde(rename = "pub")]
    Publish(StoreFeedback),
    #[serde(rename = "ret")]
    Retrieve(RetrieveFeedback),
    #[serde(rename = "rotation")]
    Rotation(RotationLogEntry),
}

/// How many submissions each list refused at ingest.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RejectCounts {
    pub cidgen: u64,
    pub cidcomp: u64,
    pub publish: u64,
    pub retrieve: u64,
    pub rotation: u64,
}

/// Outcome of adjudicating one logged complaint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisputeVerdict {
    NodeHonest,
    NodeDishonest,
    InsufficientEvidence,
}

/// A finding from the rotation-transparency audit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "anomaly")]
pub enum RotationAnomaly {
    /// Wall-clock spacing between successive rotation batches fell
    /// outside the tolerated band around `t_rot`.
    Gap {
        after_seq: u64,
        before_seq: u64,
        gap_ms: u64,
    },
    /// The same public key was announced twice; rotated-out keys must
    /// never return.
    KeyReuse { first_seq: u64, second_seq: u64 },
}

/// One health probe result.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PulseRecord {
    pub nid: Digest,
    pub ts_ms: u64,
    pub rtt_ms: Option<u64>,
    pub up: bool,
}

/// Transport abstraction for health probes: round-trip time, or `None`
/// for a node that did not answer.
pub trait HealthProbe {
    fn probe(&self, node: &NodeRecord) -> Option<u64>;
}

/// The Audit Log Server: four hash-chained lists, per-evaluator rotation
/// logs, pulse history, and the dispute and audit procedures that read
/// them.
pub struct Als {
    gpk: GroupPublicKey,
    params: AdminParams,
    d_cidgen: Chain<CidgenFeedback>,
    d_cidcomp: Chain<MisbehaviorReport>,
    d_pub: Chain<StoreFeedback>,
    d_ret: Chain<RetrieveFeedback>,
    rotations: BTreeMap<Digest, Chain<RotationLogEntry>>,
    pulses: Vec<PulseRecord>,
    pub rejected: RejectCounts,
}

impl Als {
    pub fn new(gpk: GroupPublicKey, params: AdminParams) -> Self {
        Als {
            gpk,
            params,
            d_cidgen: Chain::new(),
            d_cidcomp: Chain::new(),
            d_pub: Chain::new(),
            d_ret: Chain::new(),
            rotations: BTreeMap::new(),
            pulses: Vec::new(),
            rejected: RejectCounts::default(),
        }
    }

    pub fn cidgen(&self) -> &Chain<CidgenFeedback> {
        &self.d_cidgen
    }

    pub fn complaints(&self) -> &Chain<MisbehaviorReport> {
        &self.d_cidcomp
    }

    pub fn publishes(&self) -> &Chain<StoreFeedback> {
        &self.d_pub
    }

    pub fn retrievals(&self) -> &Chain<RetrieveFeedback> {
        &self.d_ret
    }

    pub fn rotation_log(&self, nid: &Digest) -> Option<&Chain<RotationLogEntry>> {
        self.rotations.get(nid)
    }

    pub fn pulses(&self) -> &[PulseRecord] {
        &self.pulses
    }

    /// Append one submission to its list, verifying every embedded
    /// signature first. Returns the sequence number it landed at.
    pub fn append(
        &mut self,
        sub: AlsSubmission,
        registry: &Registry,
        now_ms: u64,
    ) -> Result<u64, AlsError> {
        match sub {
            AlsSubmission::Cidgen(f) => self.append_cidgen(f, registry, now_ms),
            AlsSubmission::Complaint(r) => self.append_complaint(r, registry, now_ms),
            AlsSubmission::Publish(f) => self.append_publish(f, registry, now_ms),
            AlsSubmission::Retrieve(f) => self.append_retrieve(f, registry, now_ms),
            AlsSubmission::Rotation(e) => self.append_rotation(e, registry, now_ms),
        }
    }

    fn node_of_type<'r>(
        registry: &'r Registry,
        nid: &Digest,
        ntyp: NodeType,
    ) -> Option<&'r NodeRecord> {
        registry.get(nid).filter(|r| r.ntyp == ntyp)
    }

    pub fn append_cidgen(
        &mut self,
        f: CidgenFeedback,
        registry: &Registry,
        now_ms: u64,
    ) -> Result<u64, AlsError> {
        let Some(rec) = Self::node_of_type(registry, &f.nid, NodeType::Ev) else {
            self.rejected.cidgen += 1;
            return Err(AlsError::UnknownNode(f.nid));
        };
        let hreq = f.request_digest();
        if !gverify(&self.gpk, hreq.as_bytes(), &f.sigma) {
            self.rejected.cidgen += 1;
            return Err(AlsError::BadSignature);
        }
        if let EvalOutcome::Accepted { hres, sigma_j } = &f.outcome {
            if rec.ipk.verify(hres.as_bytes(), sigma_j).is_err() {
                self.rejected.cidgen += 1;
                return Err(AlsError::BadSignature);
            }
        }
        Ok(self.d_cidgen.append(f, now_ms))
    }

    pub fn append_publish(
        &mut self,
        f: StoreFeedback,
        registry: &Registry,
        now_ms: u64,
    ) -> Result<u64, AlsError> {
        let Some(rec) = Self::node_of_type(registry, &f.nid, NodeType::Ms) else {
            self.rejected.publish += 1;
            return Err(AlsError::UnknownNode(f.nid));
        };
        let msg = f.signed_message();
        if !gverify(&self.gpk, &msg, &f.sigma) {
            self.rejected.publish += 1;
            return Err(AlsError::BadSignature);
        }
        let node_sig_ok = match &f.outcome {
            MsOutcome::Stored { sigma_r, ts_ms } => rec
                .ipk
                .verify(&ack_message(&msg, *ts_ms), sigma_r)
                .is_ok(),
            MsOutcome::RejectedBadToken => true,
            MsOutcome::Hit { .. } | MsOutcome::NotFound { .. } => false,
        };
        if !node_sig_ok {
            self.rejected.publish += 1;
            return Err(AlsError::BadSignature);
        }
        Ok(self.d_pub.append(f, now_ms))
    }

    pub fn append_retrieve(
        &mut self,
        f: RetrieveFeedback,
        registry: &Registry,
        now_ms: u64,
    ) -> Result<u64, AlsError> {
        let Some(rec) = Self::node_of_type(registry, &f.nid, NodeType::Ms) else {
            self.rejected.retrieve += 1;
            return Err(AlsError::UnknownNode(f.nid));
        };
        let msg = f.signed_message();
        if !gverify(&self.gpk, &msg, &f.sigma) {
            self.rejected.retrieve += 1;
            return Err(AlsError::BadSignature);
        }
        let node_sig_ok = match &f.outcome {
            MsOutcome::Hit { hres, sigma_r, ts_ms } => rec
                .ipk
                .verify(&hit_message(&msg, hres, *ts_ms), sigma_r)
                .is_ok(),
            MsOutcome::NotFound { sigma_r, ts_ms } => rec
                .ipk
                .verify(&not_found_message(&msg, *ts_ms), sigma_r)
                .is_ok(),
            MsOutcome::RejectedBadToken => true,
            MsOutcome::Stored { .. } => false,
        };
        if !node_sig_ok {
            self.rejected.retrieve += 1;
            return Err(AlsError::BadSignature);
        }
        Ok(self.d_ret.append(f, now_ms))
    }

    pub fn append_rotation(
        &mut self,
        e: RotationLogEntry,
        registry: &Registry,
        now_ms: u64,
    ) -> Result<u64, AlsError> {
        let Some(rec) = Self::node_of_type(registry, &e.nid, NodeType::Ev) else {
            self.rejected.rotation += 1;
            return Err(AlsError::UnknownNode(e.nid));
        };
        if !e.verify(&rec.ipk) {
            self.rejected.rotation += 1;
            return Err(AlsError::BadSignature);
        }
        let nid = e.nid;
        Ok(self.rotations.entry(nid).or_default().append(e, now_ms))
    }

    /// Ingest a misbehavior report. The gate is authenticity, not merit:
    /// the accused node's own signature must bind it to the claimed
    /// statements, otherwise the report proves nothing and is dropped.
    /// Whether the statements actually convict is decided at resolution.
    pub fn append_complaint(
        &mut self,
        report: MisbehaviorReport,
        registry: &Registry,
        now_ms: u64,
    ) -> Result<u64, AlsError> {
        let authentic = match &report {
            MisbehaviorReport::Evaluator(c) => {
                match Self::node_of_type(registry, &c.accused, NodeType::Ev) {
                    None => {
                        self.rejected.cidcomp += 1;
                        return Err(AlsError::UnknownNode(c.accused));
                    }
                    Some(rec) => {
                        let hreq = c.request.request_digest();
                        let hres = response_digest(&c.pairs, &hreq);
                        gverify(&self.gpk, hreq.as_bytes(), &c.request.sigma)
                            && rec.ipk.verify(hres.as_bytes(), &c.sigma_j).is_ok()
                    }
                }
            }
            MisbehaviorReport::StoreDenial(c) => {
                match Self::node_of_type(registry, &c.accused, NodeType::Ms) {
                    None => {
                        self.rejected.cidcomp += 1;
                        return Err(AlsError::UnknownNode(c.accused));
                    }
                    Some(rec) => {
                        c.ack.nid == c.accused
                            && c.not_found.nid == c.accused
                            && c.ack.verify(&rec.ipk, &c.store_request.signed_message())
                            && c.not_found
                                .verify(&rec.ipk, &c.retrieve_request.signed_message())
                    }
                }
            }
            MisbehaviorReport::StoreCorrupt(c) => {
                match Self::node_of_type(registry, &c.accused, NodeType::Ms) {
                    None => {
                        self.rejected.cidcomp += 1;
                        return Err(AlsError::UnknownNode(c.accused));
                    }
                    Some(rec) => {
                        c.hit.nid == c.accused
                            && c.hit
                                .verify_transport(&rec.ipk, &c.retrieve_request.signed_message())
                    }
                }
            }
        };
        if !authentic {
            self.rejected.cidcomp += 1;
            return Err(AlsError::BadSignature);
        }
        Ok(self.d_cidcomp.append(report, now_ms))
    }

    /// Adjudicate the complaint stored at `seq`. Every verdict is
    /// reproducible from logged material alone.
    pub fn resolve_dispute(&self, seq: u64, registry: &Registry) -> DisputeVerdict {
        let Some(entry) = self.d_cidcomp.get(seq) else {
            return DisputeVerdict::InsufficientEvidence;
        };
        match &entry.entry {
            MisbehaviorReport::Evaluator(c) => {
                self.resolve_evaluator(c, entry.ingested_at_ms, registry)
            }
            MisbehaviorReport::StoreDenial(c) => self.resolve_denial(c, registry),
            MisbehaviorReport::StoreCorrupt(c) => self.resolve_corrupt(c, registry),
        }
    }

    /// An evaluator is dishonest iff it signed a pair that fails the
    /// pairing check, or a pair under a key it never announced for that
    /// slot at that time. Honest otherwise: the accusation then discredits
    /// the accuser, not the node.
    fn resolve_evaluator(
        &self,
        c: &EvComplaint,
        ingested_at_ms: u64,
        registry: &Registry,
    ) -> DisputeVerdict {
        let Some(rec) = Self::node_of_type(registry, &c.accused, NodeType::Ev) else {
            return DisputeVerdict::InsufficientEvidence;
        };
        let hreq = c.request.request_digest();
        let hres = response_digest(&c.pairs, &hreq);
        if rec.ipk.verify(hres.as_bytes(), &c.sigma_j).is_err() {
            return DisputeVerdict::InsufficientEvidence;
        }
        if c.pairs.is_empty() {
            return DisputeVerdict::InsufficientEvidence;
        }
        // Timing: trust the evaluator's own feedback entry for when it
        // answered; a node that suppressed its feedback is judged at
        // complaint ingest time instead, so suppression buys nothing.
        let t = self
            .d_cidgen
            .entries()
            .iter()
            .find(|e| e.entry.nid == c.accused && e.entry.request_digest() == hreq)
            .map(|e| e.entry.ts_ms)
            .unwrap_or(ingested_at_ms);
        let Some(allowed) = self.announced_keys(&c.accused, c.request.i_k, t) else {
            return DisputeVerdict::InsufficientEvidence;
        };
        for pair in &c.pairs {
            if !allowed.contains(&pair.pk) {
                return DisputeVerdict::NodeDishonest;
            }
            if !verify_blinded_pair(&pair.pk, &c.request.x, &pair.y) {
                return DisputeVerdict::NodeDishonest;
            }
        }
        DisputeVerdict::NodeHonest
    }

    /// Keys the rotation log permits for `slot` at time `t`: the one
    /// current then, plus the one it replaced while inside the grace
    /// window.
    fn announced_keys(&self, nid: &Digest, slot: u32, t: u64) -> Option<Vec<OprfPublicKey>> {
        let chain = self.rotations.get(nid)?;
        let slot_entries: Vec<&RotationLogEntry> = chain
            .entries()
            .iter()
            .map(|e| &e.entry)
            .filter(|e| e.slot == slot)
            .collect();
        let pos = slot_entries.iter().rposition(|e| e.ts_ms <= t)?;
        let mut allowed = vec![slot_entries[pos].pk];
        if pos > 0 && slot_entries[pos].ts_ms + self.params.eps_ms > t {
            allowed.push(slot_entries[pos - 1].pk);
        }
        Some(allowed)
    }

    /// A store is dishonest iff it acknowledged an upload and then denied
    /// the record while the retention clock, by its own signed
    /// timestamps, had not run out.
    fn resolve_denial(&self, c: &MsDenialComplaint, registry: &Registry) -> DisputeVerdict {
        let Some(rec) = Self::node_of_type(registry, &c.accused, NodeType::Ms) else {
            return DisputeVerdict::InsufficientEvidence;
        };
        if c.ack.nid != c.accused
            || c.not_found.nid != c.accused
            || !c.ack.verify(&rec.ipk, &c.store_request.signed_message())
            || !c
                .not_found
                .verify(&rec.ipk, &c.retrieve_request.signed_message())
        {
            return DisputeVerdict::InsufficientEvidence;
        }
        if c.store_request.idx != c.retrieve_request.idx {
            // Statements about different records never contradict.
            return DisputeVerdict::NodeHonest;
        }
        if c.not_found.ts_ms < c.ack.ts_ms + self.params.t_max_ms {
            DisputeVerdict::NodeDishonest
        } else {
            DisputeVerdict::NodeHonest
        }
    }

    /// A store is dishonest iff it signed a served record whose uploader
    /// group signature does not verify: no enrolled provider produced
    /// those bytes, yet the store vouched for them.
    fn resolve_corrupt(&self, c: &MsCorruptComplaint, registry: &Registry) -> DisputeVerdict {
        let Some(rec) = Self::node_of_type(registry, &c.accused, NodeType::Ms) else {
            return DisputeVerdict::InsufficientEvidence;
        };
        if c.hit.nid != c.accused
            || !c
                .hit
                .verify_transport(&rec.ipk, &c.retrieve_request.signed_message())
        {
            return DisputeVerdict::InsufficientEvidence;
        }
        if c.hit.verify_upload(&self.gpk) {
            DisputeVerdict::NodeHonest
        } else {
            DisputeVerdict::NodeDishonest
        }
    }

    /// Audit one evaluator's rotation history: batches of announcements
    /// must be spaced `t_rot` apart within tolerance, and no key may ever
    /// be announced twice.
    pub fn rotation_audit(&self, nid: &Digest) -> Vec<RotationAnomaly> {
        let Some(chain) = self.rotations.get(nid) else {
            return Vec::new();
        };
        let mut anomalies = Vec::new();

        let mut seen: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for e in chain.entries() {
            let key = e.entry.pk.to_bytes().to_vec();
            match seen.get(&key) {
                Some(&first_seq) => anomalies.push(RotationAnomaly::KeyReuse {
                    first_seq,
                    second_seq: e.seq,
                }),
                None => {
                    seen.insert(key, e.seq);
                }
            }
        }

        // Entries announced together (the initial ring, a catch-up burst)
        // share a timestamp; gaps are judged between distinct timestamps.
        let mut batches: Vec<(u64, u64)> = Vec::new();
        for e in chain.entries() {
            if batches.last().map(|&(_, ts)| ts) != Some(e.entry.ts_ms) {
                batches.push((e.seq, e.entry.ts_ms));
            }
        }
        let lo = self.params.t_rot_ms as f64 * (1.0 - self.params.delta);
        let hi = self.params.t_rot_ms as f64 * (1.0 + self.params.delta);
        for pair in batches.windows(2) {
            let (after_seq, t_prev) = pair[0];
            let (before_seq, t_next) = pair[1];
            let gap = t_next.saturating_sub(t_prev);
            if (gap as f64) < lo || (gap as f64) > hi {
                anomalies.push(RotationAnomaly::Gap {
                    after_seq,
                    before_seq,
                    gap_ms: gap,
                });
            }
        }
        anomalies
    }

    /// Probe every registered node once and record the outcomes.
    pub fn pulse(
        &mut self,
        registry: &Registry,
        probe: &impl HealthProbe,
        now_ms: u64,
    ) -> usize {
        let mut count = 0;
        for rec in registry.nodes() {
            let rtt = probe.probe(rec);
            self.pulses.push(PulseRecord {
                nid: rec.nid,
                ts_ms: now_ms,
                rtt_ms: rtt,
                up: rtt.is_some(),
            });
            count += 1;
        }
        count
    }

    /// Fraction of probes since `since_ms` that found the node up;
    /// `None` when it was never probed in the window.
    pub fn availability(&self, nid: &Digest, since_ms: u64) -> Option<f64> {
        let mut up = 0u64;
        let mut total = 0u64;
        for p in &self.pulses {
            if p.nid == *nid && p.ts_ms >= since_ms {
                total += 1;
                up += u64::from(p.up);
            }
        }
        (total > 0).then(|| up as f64 / total as f64)
    }

    /// Nodes whose availability in the window fell below `threshold`.
    pub fn flagged_nodes(&self, threshold: f64, since_ms: u64) -> Vec<(Digest, f64)> {
        let nids: BTreeSet<Digest> = self
            .pulses
            .iter()
            .filter(|p| p.ts_ms >= since_ms)
            .map(|p| p.nid)
            .collect();
        nids.into_iter()
            .filter_map(|nid| {
                self.availability(&nid, since_ms)
                    .filter(|&a| a < threshold)
                    .map(|a| (nid, a))
            })
            .collect()
    }

    /// Rebuild billing spend records from the logs. Only outcomes where a
    /// node actually redeemed the token count: accepted evaluations,
    /// stored uploads, and served hits. Rejections and not-founds left
    /// the token unspent.
    pub fn spend_records(&self) -> Vec<SpendRecord> {
        let mut out = Vec::new();
        for e in self.d_cidgen.entries() {
            let f = &e.entry;
            if matches!(f.outcome, EvalOutcome::Accepted { .. }) {
                out.push(SpendRecord {
                    token: f.t0,
                    kind: ContextKind::Ev,
                    context: spend_context(&f.t0, &f.t1, &f.s_ev),
                    node: f.nid,
                    signed_message: f.request_digest().as_bytes().to_vec(),
                    sigma: f.sigma.clone(),
                });
            }
        }
        for e in self.d_pub.entries() {
            let f = &e.entry;
            if matches!(f.outcome, MsOutcome::Stored { .. }) {
                out.push(SpendRecord {
                    token: f.t0,
                    kind: ContextKind::Ms,
                    context: spend_context(&f.t0, &f.t1, &f.s_ms),
                    node: f.nid,
                    signed_message: f.signed_message(),
                    sigma: f.sigma.clone(),
                });
            }
        }
        for e in self.d_ret.entries() {
            let f = &e.entry;
            if matches!(f.outcome, MsOutcome::Hit { .. }) {
                out.push(SpendRecord {
                    token: f.t0,
                    kind: ContextKind::Ms,
                    context: spend_context(&f.t0, &f.t1, &f.s_ms),
                    node: f.nid,
                    signed_message: f.signed_message(),
                    sigma: f.sigma.clone(),
                });
            }
        }
        out
    }

    /// Replay every list and rotation log against its recorded digests.
    pub fn verify_chains(&self) -> bool {
        self.d_cidgen.verify()
            && self.d_cidcomp.verify()
            && self.d_pub.verify()
            && self.d_ret.verify()
            && self.rotations.values().all(Chain::verify)
    }
}
