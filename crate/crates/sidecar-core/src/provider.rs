//! Provider-side client: call descriptor derivation, multi-evaluator
//! call-secret generation, record publish/retrieve, and misbehavior
//! reporting.
//!
//! Two providers that observe the same call derive the same descriptor
//! digest from (src, dst, setup minute) and therefore pick the same
//! evaluators, obtain the same blinding-independent OPRF outputs, and meet
//! at the same storage index. Everything a provider sends over the wire is
//! blinded, encrypted, or anonymously signed, so neither the nodes nor a
//! network observer learn which call any message is about.
//!
//! The one source of ambiguity is key rotation: an evaluator that rotated
//! the requested slot moments ago answers with both the new and the
//! retired key, and the retrieving side expands the combinations into a
//! small candidate set, probing each until a record decrypts.
//!
//! Operations that can fail still leave their misbehavior evidence behind:
//! callers pass a report sink, and a failed run deposits complaints about
//! the nodes that caused it before returning the error.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::billing::BillingToken;
use crate::crypto::{aead_open, aead_seal, h_concat, h_digest, AeadKey, CryptoError, Digest};
use crate::evaluator::{csg_request_digest, EvalError, EvalPair, EvalRequest, EvalResponse};
use crate::groupsig::{gsign, GroupPublicKey, GroupSigningKey};
use crate::msgstore::{
    retrieve_request_message, store_request_message, RetrieveHit, RetrieveReply, RetrieveRequest,
    SignedNotFound, StoreAck, StoreError, StoreRequest,
};
use crate::registry::{NodeRecord, Registry};
use crate::voprf::{self, blind, combine_outputs, unblind, OprfOutput};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("no matching nodes are registered")]
    EmptyRegistry,
    #[error("only {usable} of {needed} evaluators returned usable values")]
    InsufficientEvaluations { usable: usize, needed: usize },
    #[error("no store acknowledged the record")]
    PublishFailed,
    #[error("no candidate index yielded a decryptable record")]
    RecordNotFound,
}

/// The observable facts both ends of a call share.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallDetails {
    pub src: String,
    pub dst: String,
    /// Call setup time quantized to whole minutes since the epoch.
    pub ts_min: u64,
}

impl CallDetails {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, ts_min: u64) -> Self {
        CallDetails {
            src: src.into(),
            dst: dst.into(),
            ts_min,
        }
    }

    pub fn at_epoch_ms(src: impl Into<String>, dst: impl Into<String>, epoch_ms: u64) -> Self {
        Self::new(src, dst, epoch_ms / 60_000)
    }

    /// Call descriptor digest. The numbers are length-prefixed so that no
    /// two (src, dst) splits of the same digit string collide.
    pub fn cdt(&self) -> Digest {
        let src = self.src.as_bytes();
        let dst = self.dst.as_bytes();
        h_concat(&[
            &(src.len() as u16).to_be_bytes(),
            src,
            &(dst.len() as u16).to_be_bytes(),
            dst,
            &self.ts_min.to_be_bytes(),
        ])
    }

    /// Same call, previous minute bucket.
    pub fn previous_minute(&self) -> Option<CallDetails> {
        self.ts_min
            .checked_sub(1)
            .map(|ts| CallDetails::new(self.src.clone(), self.dst.clone(), ts))
    }
}

/// The descriptor digest reduced to a key-ring slot, taking the digest as
/// a 256-bit big-endian integer.
pub fn slot_index(cdt: &Digest, s: u32) -> u32 {
    let s = u64::from(s.max(1));
    cdt.as_bytes()
        .iter()
        .fold(0u64, |acc, &b| ((acc << 8) | u64::from(b)) % s) as u32
}

/// Everything derived from a call that the generation step needs.
#[derive(Clone)]
pub struct CallTarget {
    pub call: CallDetails,
    pub cdt: Digest,
    pub i_k: u32,
    pub s_ev: Vec<NodeRecord>,
}

impl CallTarget {
    pub fn ev_nids(&self) -> Vec<Digest> {
        self.s_ev.iter().map(|r| r.nid).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecretMode {
    Publish,
    Retrieve,
}

/// Result of call-secret generation: a single secret when publishing, an
/// ordered candidate list when retrieving. The first candidate is always
/// the all-current-keys combination, which equals the published secret
/// unless a rotation raced the call.
#[derive(Clone, Debug)]
pub enum CallSecret {
    Publish(Digest),
    Retrieve(Vec<Digest>),
}

impl CallSecret {
    pub fn candidates(&self) -> Vec<Digest> {
        match self {
            CallSecret::Publish(csk) => vec![*csk],
            CallSecret::Retrieve(l) => l.clone(),
        }
    }
}

/// Delivery abstraction for evaluator calls. `None` models a timeout or a
/// lost message; node-side rejections come back as `Some(Err(_))`.
pub trait EvTransport {
    fn evaluate(&self, ev: &NodeRecord, req: &EvalRequest)
        -> Option<Result<EvalResponse, EvalError>>;
}

/// Delivery abstraction for store calls.
pub trait MsTransport {
    fn store(&self, ms: &NodeRecord, req: &StoreRequest) -> Option<Result<StoreAck, StoreError>>;
    fn retrieve(
        &self,
        ms: &NodeRecord,
        req: &RetrieveRequest,
    ) -> Option<Result<RetrieveReply, StoreError>>;
}

/// Evidence that an evaluator signed values that fail verification. The
/// response signature authenticates the accusation; the blinded pairs let
/// an arbiter re-check the algebra without learning the call.
#[derive(Clone, Serialize, Deserialize)]
pub struct EvComplaint {
    pub accused: Digest,
    pub request: EvalRequest,
    pub pairs: Vec<EvalPair>,
    #[serde(with = "crate::billing::ed_sig_serde")]
    pub sigma_j: ed25519_dalek::Signature,
}

/// Evidence that a store acknowledged an upload and then denied the record
/// inside the retention window: two signed statements that cannot both be
/// honest.
#[derive(Clone, Serialize, Deserialize)]
pub struct MsDenialComplaint {
    pub accused: Digest,
    pub store_request: StoreRequest,
    pub ack: StoreAck,
    pub retrieve_request: RetrieveRequest,
    pub not_found: SignedNotFound,
}

/// Evidence that a store served a record no enrolled provider uploaded:
/// its reply signature is valid but the record's group signature is not.
#[derive(Clone, Serialize, Deserialize)]
pub struct MsCorruptComplaint {
    pub accused: Digest,
    pub retrieve_request: RetrieveRequest,
    pub hit: RetrieveHit,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MisbehaviorReport {
    Evaluator(EvComplaint),
    StoreDenial(MsDenialComplaint),
    StoreCorrupt(MsCorruptComplaint),
}

impl MisbehaviorReport {
    pub fn accused(&self) -> Digest {
        match self {
            MisbehaviorReport::Evaluator(c) => c.accused,
            MisbehaviorReport::StoreDenial(c) => c.accused,
            MisbehaviorReport::StoreCorrupt(c) => c.accused,
        }
    }
}

/// A store's signed statement that it does not hold a record, kept with
/// the request it answered so a denial complaint can be assembled later if
/// a matching acknowledgement exists.
#[derive(Clone, Serialize, Deserialize)]
pub struct DenialEvidence {
    pub nid: Digest,
    pub request: RetrieveRequest,
    pub not_found: SignedNotFound,
}

/// Receipt of a publish: what was uploaded where, and who acknowledged.
#[derive(Clone)]
pub struct PublishReceipt {
    pub csk: Digest,
    pub request: StoreRequest,
    pub stores: Vec<NodeRecord>,
    pub acks: Vec<(Digest, StoreAck)>,
    pub failed: Vec<Digest>,
}

impl PublishReceipt {
    pub fn idx(&self) -> Digest {
        self.request.idx
    }

    /// Build the complaint for a store that acknowledged this publish and
    /// later denied holding the record.
    pub fn denial_complaint(&self, denial: &DenialEvidence) -> Option<MisbehaviorReport> {
        if denial.request.idx != self.request.idx {
            return None;
        }
        let ack = self
            .acks
            .iter()
            .find(|(nid, _)| *nid == denial.nid)
            .map(|(_, ack)| ack.clone())?;
        Some(MisbehaviorReport::StoreDenial(MsDenialComplaint {
            accused: denial.nid,
            store_request: self.request.clone(),
            ack,
            retrieve_request: denial.request.clone(),
            not_found: denial.not_found.clone(),
        }))
    }
}

#[derive(Debug)]
pub struct RetrieveSuccess {
    pub msg: Vec<u8>,
    pub csk: Digest,
    pub idx: Digest,
    pub served_by: Digest,
}

/// One provider identity: anonymous credential plus fan-out parameters.
pub struct Provider {
    pub provider_id: String,
    pub gpk: GroupPublicKey,
    gsk: GroupSigningKey,
    /// Evaluators per call.
    pub n: usize,
    /// Stores per record.
    pub m: usize,
    /// Evaluator key-ring size.
    pub s: u32,
}

impl Provider {
    pub fn new(
        provider_id: impl Into<String>,
        gpk: GroupPublicKey,
        gsk: GroupSigningKey,
        n: usize,
        m: usize,
        s: u32,
    ) -> Self {
        Provider {
            provider_id: provider_id.into(),
            gpk,
            gsk,
            n,
            m,
            s,
        }
    }

    /// Derive the descriptor digest, slot index, and evaluator set for a
    /// call. Deterministic: any provider observing the same call, against
    /// the same registry, lands on the same target.
    pub fn derive(
        &self,
        call: CallDetails,
        registry: &Registry,
    ) -> Result<CallTarget, ProviderError> {
        let cdt = call.cdt();
        let s_ev: Vec<NodeRecord> = registry
            .get_ev(cdt.as_bytes(), self.n)
            .into_iter()
            .cloned()
            .collect();
        if s_ev.is_empty() {
            return Err(ProviderError::EmptyRegistry);
        }
        let i_k = slot_index(&cdt, self.s);
        Ok(CallTarget {
            call,
            cdt,
            i_k,
            s_ev,
        })
    }

    /// Run call-secret generation against the target's evaluator set.
    ///
    /// The descriptor is blinded once and the same request goes to every
    /// evaluator. Responses count only if the node's signature verifies
    /// under its registered key; values count only if they pass the
    /// pairing check against the key the node claims. A node that signs a
    /// failing value earns a complaint in `reports`. Evaluators that stay
    /// silent get one retry, since the product needs all of them.
    pub fn gen_call_secret(
        &self,
        mode: SecretMode,
        target: &CallTarget,
        token: &BillingToken,
        net: &impl EvTransport,
        reports: &mut Vec<MisbehaviorReport>,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<CallSecret, ProviderError> {
        let nids = target.ev_nids();
        let (bf, x) = blind(target.cdt.as_bytes(), rng);
        let hreq = csg_request_digest(&x, target.i_k, &token.t0, &token.t1, &nids);
        let sigma = gsign(&self.gpk, &self.gsk, hreq.as_bytes(), rng);
        let req = EvalRequest {
            x,
            i_k: target.i_k,
            t0: token.t0,
            t1: token.t1,
            s_ev: nids,
            sigma,
        };

        let mut values: Vec<Vec<OprfOutput>> = Vec::with_capacity(target.s_ev.len());
        for ev in &target.s_ev {
            let resp = match net.evaluate(ev, &req).or_else(|| net.evaluate(ev, &req)) {
                Some(Ok(resp)) => resp,
                _ => {
                    values.push(Vec::new());
                    continue;
                }
            };
            if resp.nid != ev.nid || !resp.verify(&ev.ipk, &hreq) {
                values.push(Vec::new());
                continue;
            }
            // An honest node returns at most two pairs (current key, plus
            // the just-retired one during the grace window); extras would
            // blow up the candidate product, so they are ignored.
            let pairs = &resp.pairs[..resp.pairs.len().min(2)];
            let mut verified: Vec<(usize, OprfOutput)> = Vec::with_capacity(2);
            for (i, pair) in pairs.iter().enumerate() {
                let v = unblind(&bf, &pair.y);
                if voprf::verify_output(&pair.pk, target.cdt.as_bytes(), &v) {
                    verified.push((i, v));
                }
            }
            if pairs.is_empty() || verified.len() < pairs.len() {
                reports.push(MisbehaviorReport::Evaluator(EvComplaint {
                    accused: ev.nid,
                    request: req.clone(),
                    pairs: resp.pairs.clone(),
                    sigma_j: resp.sig,
                }));
            }
            match mode {
                // Publishing uses strictly the current key: the first pair
                // must itself be valid.
                SecretMode::Publish => match verified.first() {
                    Some((0, v)) => values.push(vec![*v]),
                    _ => values.push(Vec::new()),
                },
                SecretMode::Retrieve => {
                    values.push(verified.into_iter().map(|(_, v)| v).collect())
                }
            }
        }

        let usable = values.iter().filter(|v| !v.is_empty()).count();
        if usable < target.s_ev.len() {
            return Err(ProviderError::InsufficientEvaluations {
                usable,
                needed: target.s_ev.len(),
            });
        }

        Ok(match mode {
            SecretMode::Publish => {
                CallSecret::Publish(secret_digest(values.iter().map(|v| &v[0])))
            }
            SecretMode::Retrieve => CallSecret::Retrieve(candidate_secrets(&values)),
        })
    }

    /// Encrypt and upload a record under a publish-mode secret.
    pub fn publish_record(
        &self,
        csk: &Digest,
        msg: &[u8],
        token: &BillingToken,
        registry: &Registry,
        net: &impl MsTransport,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<PublishReceipt, ProviderError> {
        let idx = h_digest(csk.as_bytes());
        let mut c0 = [0u8; 32];
        rng.fill_bytes(&mut c0);
        let c1 = aead_seal(&record_key(&c0, csk), msg, rng);
        let stores: Vec<NodeRecord> = registry
            .get_ms(csk.as_bytes(), self.m)
            .into_iter()
            .cloned()
            .collect();
        if stores.is_empty() {
            return Err(ProviderError::EmptyRegistry);
        }
        let nids: Vec<Digest> = stores.iter().map(|r| r.nid).collect();
        let signed = store_request_message(&idx, &c0, &c1, &token.t0, &token.t1, &nids);
        let sigma = gsign(&self.gpk, &self.gsk, &signed, rng);
        let req = StoreRequest {
            idx,
            c0,
            c1,
            t0: token.t0,
            t1: token.t1,
            s_ms: nids,
            sigma,
        };

        let mut acks = Vec::new();
        let mut failed = Vec::new();
        for ms in &stores {
            match net.store(ms, &req) {
                Some(Ok(ack)) if ack.nid == ms.nid && ack.verify(&ms.ipk, &signed) => {
                    acks.push((ms.nid, ack));
                }
                _ => failed.push(ms.nid),
            }
        }
        if acks.is_empty() {
            return Err(ProviderError::PublishFailed);
        }
        Ok(PublishReceipt {
            csk: *csk,
            request: req,
            stores,
            acks,
            failed,
        })
    }

    /// Probe the candidate secrets in order until a record decrypts.
    ///
    /// Misses cost nothing: the token is only spent where a record is
    /// served, so a wrong candidate (or a premature lookup) leaves it
    /// usable. Each store's reply is verified twice over: its own
    /// signature commits the store to the answer, and the record's group
    /// signature proves an enrolled provider uploaded it. Signed misses
    /// accumulate in `denials` for later matching against publish acks.
    pub fn retrieve_record(
        &self,
        candidates: &[Digest],
        token: &BillingToken,
        registry: &Registry,
        net: &impl MsTransport,
        reports: &mut Vec<MisbehaviorReport>,
        denials: &mut Vec<DenialEvidence>,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<Option<RetrieveSuccess>, ProviderError> {
        for csk in candidates {
            let idx = h_digest(csk.as_bytes());
            let stores: Vec<NodeRecord> = registry
                .get_ms(csk.as_bytes(), self.m)
                .into_iter()
                .cloned()
                .collect();
            if stores.is_empty() {
                return Err(ProviderError::EmptyRegistry);
            }
            let nids: Vec<Digest> = stores.iter().map(|r| r.nid).collect();
            let signed = retrieve_request_message(&idx, &token.t0, &token.t1, &nids);
            let sigma = gsign(&self.gpk, &self.gsk, &signed, rng);
            let req = RetrieveRequest {
                idx,
                t0: token.t0,
                t1: token.t1,
                s_ms: nids,
                sigma,
            };
            for ms in &stores {
                let reply = match net.retrieve(ms, &req) {
                    Some(Ok(reply)) => reply,
                    _ => continue,
                };
                match reply {
                    RetrieveReply::Hit(hit) => {
                        if hit.nid != ms.nid
                            || hit.idx != idx
                            || !hit.verify_transport(&ms.ipk, &signed)
                        {
                            continue;
                        }
                        if !hit.verify_upload(&self.gpk) {
                            reports.push(MisbehaviorReport::StoreCorrupt(MsCorruptComplaint {
                                accused: ms.nid,
                                retrieve_request: req.clone(),
                                hit,
                            }));
                            continue;
                        }
                        match aead_open(&record_key(&hit.c0, csk), &hit.c1) {
                            Ok(msg) => {
                                return Ok(Some(RetrieveSuccess {
                                    msg,
                                    csk: *csk,
                                    idx,
                                    served_by: ms.nid,
                                }));
                            }
                            Err(CryptoError::AeadAuth | CryptoError::AeadTruncated) => {
                                // A provider-signed record that fails to
                                // decrypt means the uploader, not the
                                // store, published garbage under this
                                // index; nothing to pin on the store.
                                continue;
                            }
                            Err(_) => continue,
                        }
                    }
                    RetrieveReply::NotFound(nf) => {
                        if nf.nid == ms.nid && nf.verify(&ms.ipk, &signed) {
                            denials.push(DenialEvidence {
                                nid: ms.nid,
                                request: req.clone(),
                                not_found: nf,
                            });
                        }
                    }
                }
            }
        }
        Ok(None)
    }

    /// Full publish pipeline: derive, generate, upload. One token covers
    /// the whole call (evaluators and stores are distinct spend contexts).
    pub fn publish_flow(
        &self,
        call: CallDetails,
        msg: &[u8],
        token: &BillingToken,
        registry: &Registry,
        ev_net: &impl EvTransport,
        ms_net: &impl MsTransport,
        reports: &mut Vec<MisbehaviorReport>,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<PublishReceipt, ProviderError> {
        let target = self.derive(call, registry)?;
        let secret =
            self.gen_call_secret(SecretMode::Publish, &target, token, ev_net, reports, rng)?;
        let csk = match secret {
            CallSecret::Publish(csk) => csk,
            CallSecret::Retrieve(_) => unreachable!("publish mode yields a single secret"),
        };
        self.publish_record(&csk, msg, token, registry, ms_net, rng)
    }

    /// Full retrieve pipeline with the previous-minute fallback. Each pass
    /// burns its own token: reusing one token against the previous
    /// minute's (different) node sets would look exactly like a
    /// double-spend at reconciliation.
    #[allow(clippy::too_many_arguments)]
    pub fn retrieve_flow(
        &self,
        call: CallDetails,
        tokens: &[BillingToken],
        registry: &Registry,
        ev_net: &impl EvTransport,
        ms_net: &impl MsTransport,
        reports: &mut Vec<MisbehaviorReport>,
        denials: &mut Vec<DenialEvidence>,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<RetrieveSuccess, ProviderError> {
        let mut attempts = vec![call.clone()];
        if let Some(prev) = call.previous_minute() {
            attempts.push(prev);
        }
        let mut last_err = ProviderError::RecordNotFound;
        for (attempt, token) in attempts.iter().zip(tokens) {
            let target = match self.derive(attempt.clone(), registry) {
                Ok(t) => t,
                Err(e) => {
                    last_err = e;
                    continue;
                }
            };
            let secret = match self.gen_call_secret(
                SecretMode::Retrieve,
                &target,
                token,
                ev_net,
                reports,
                rng,
            ) {
                Ok(s) => s,
                Err(e) => {
                    last_err = e;
                    continue;
                }
            };
            if let Some(found) = self.retrieve_record(
                &secret.candidates(),
                token,
                registry,
                ms_net,
                reports,
                denials,
                rng,
            )? {
                return Ok(found);
            }
        }
        Err(last_err)
    }
}

/// Hash a combined OPRF output down to a call secret.
fn secret_digest<'a>(values: impl IntoIterator<Item = &'a OprfOutput>) -> Digest {
    h_digest(&combine_outputs(values).to_bytes())
}

/// Record encryption key: `H(c0 ‖ csk)`.
fn record_key(c0: &[u8; 32], csk: &Digest) -> AeadKey {
    AeadKey(h_concat(&[c0, csk.as_bytes()]).0)
}

/// Every combination of per-evaluator candidate values, hashed into
/// candidate secrets. Ordered so that the all-first-values combination
/// (every evaluator's current key) comes first, then counts through the
/// alternatives; duplicates collapse.
fn candidate_secrets(values: &[Vec<OprfOutput>]) -> Vec<Digest> {
    let total: usize = values.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let mut rem = i;
        let combo: Vec<&OprfOutput> = values
            .iter()
            .map(|v| {
                let pick = &v[rem % v.len()];
                rem /= v.len();
                pick
            })
            .collect();
        let csk = secret_digest(combo);
        if !out.contains(&csk) {
            out.push(csk);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billing::{init_cycle, mint_tokens, BillingToken};
    use crate::crypto::h_to_group;
    use crate::evaluator::EvNode;
    use crate::groupsig::{gsetup, join};
    use crate::msgstore::MsNode;
    use crate::registry::{derive_nid, NodeType};
    use ed25519_dalek::{Signer, SigningKey, Verifier};
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::cell::{Cell, RefCell};
    use std::collections::{BTreeMap, BTreeSet};

    const S: u32 = 8;
    const T_ROT: u64 = 60_000;
    const EPS: u64 = 5_000;
    const T_MAX: u64 = 15_000;

    /// In-process cluster with targeted fault switches.
    struct TestNet {
        evs: RefCell<BTreeMap<Digest, EvNode>>,
        mss: RefCell<BTreeMap<Digest, MsNode>>,
        ev_isks: BTreeMap<Digest, SigningKey>,
        ms_isks: BTreeMap<Digest, SigningKey>,
        now: Cell<u64>,
        rng: RefCell<StdRng>,
        /// Evaluators whose next request is silently dropped.
        drop_next: RefCell<BTreeSet<Digest>>,
        /// Evaluators that answer with a rogue key and re-sign honestly.
        rogue_key: RefCell<BTreeMap<Digest, crate::voprf::OprfSecretKey>>,
        /// Evaluators whose response signature gets corrupted in flight.
        mangle_sig: RefCell<BTreeSet<Digest>>,
        /// Stores that deny every lookup (records deleted underneath).
        deny: RefCell<BTreeSet<Digest>>,
        /// Stores that serve a tampered record, re-signed at transport.
        tamper_record: RefCell<BTreeSet<Digest>>,
    }

    impl EvTransport for TestNet {
        fn evaluate(
            &self,
            ev: &NodeRecord,
            req: &EvalRequest,
        ) -> Option<Result<EvalResponse, EvalError>> {
            if self.drop_next.borrow_mut().remove(&ev.nid) {
                return None;
            }
            let mut evs = self.evs.borrow_mut();
            let node = evs.get_mut(&ev.nid)?;
            let mut result = node.evaluate(req, self.now.get());
            if let Ok(resp) = &mut result {
                if let Some(rogue) = self.rogue_key.borrow().get(&ev.nid) {
                    for pair in &mut resp.pairs {
                        pair.y = voprf::evaluate(rogue, &req.x);
                    }
                    let hreq = req.request_digest();
                    let hres = crate::evaluator::response_digest(&resp.pairs, &hreq);
                    resp.sig = self.ev_isks[&ev.nid].sign(hres.as_bytes());
                }
                if self.mangle_sig.borrow().contains(&ev.nid) {
                    let mut bytes = resp.sig.to_bytes();
                    bytes[5] ^= 0x40;
                    resp.sig = ed25519_dalek::Signature::from_bytes(&bytes);
                }
            }
            Some(result)
        }
    }

    impl MsTransport for TestNet {
        fn store(
            &self,
            ms: &NodeRecord,
            req: &StoreRequest,
        ) -> Option<Result<StoreAck, StoreError>> {
            let mut mss = self.mss.borrow_mut();
            let node = mss.get_mut(&ms.nid)?;
            Some(node.store(req, self.now.get()))
        }

        fn retrieve(
            &self,
            ms: &NodeRecord,
            req: &RetrieveRequest,
        ) -> Option<Result<RetrieveReply, StoreError>> {
            let mut mss = self.mss.borrow_mut();
            let node = mss.get_mut(&ms.nid)?;
            if self.deny.borrow().contains(&ms.nid) {
                node.db.expire_sweep(0, u64::MAX);
            }
            let mut result = node.retrieve(req, self.now.get());
            if let Ok(RetrieveReply::Hit(hit)) = &mut result {
                if self.tamper_record.borrow().contains(&ms.nid) {
                    hit.c1[0] ^= 1;
                    let hreq = req.signed_message();
                    let entry = crate::msgstore::RecordEntry {
                        c0: hit.c0,
                        c1: hit.c1.clone(),
                        bb: hit.bb,
                        sigma: hit.sigma.clone(),
                        stored_at_ms: 0,
                    };
                    let hres = crate::msgstore::record_digest(&hit.idx, &entry);
                    hit.sigma_r = self.ms_isks[&ms.nid]
                        .sign(&crate::msgstore::hit_message(&hreq, &hres, hit.ts_ms));
                }
            }
            Some(result)
        }
    }

    impl TestNet {
        fn advance(&self, delta_ms: u64) {
            self.now.set(self.now.get() + delta_ms);
        }

        fn force_rotate(&self, nid: &Digest) {
            let mut evs = self.evs.borrow_mut();
            let node = evs.get_mut(nid).unwrap();
            let mut rng = self.rng.borrow_mut();
            node.force_rotate(self.now.get(), &mut *rng);
        }

        /// Rotate an evaluator until the ring cursor has passed `slot`,
        /// leaving that slot's retired key in the grace window.
        fn rotate_slot(&self, nid: &Digest, slot: u32) {
            loop {
                let cursor = {
                    let evs = self.evs.borrow();
                    evs[nid].schedule().cursor() as u32
                };
                self.force_rotate(nid);
                if cursor == slot {
                    break;
                }
            }
        }

        fn slot_secret_oracle(&self, nid: &Digest, slot: u32) -> crate::voprf::OprfSecretKey {
            let evs = self.evs.borrow();
            evs[nid].schedule().slot_secret(slot as usize).clone()
        }
    }

    struct World {
        registry: Registry,
        net: TestNet,
        gpk: GroupPublicKey,
        provider: Provider,
        peer: Provider,
        tokens: Vec<BillingToken>,
        peer_tokens: Vec<BillingToken>,
        rng: StdRng,
    }

    fn world(n_ev: usize, n_ms: usize, n: usize, m: usize) -> World {
        let mut rng = StdRng::seed_from_u64(0x9d0c);
        let (gpk, mut mgr) = gsetup(&mut rng);
        let gsk_a = join(&mut mgr, "carrier-a", &mut rng);
        let gsk_b = join(&mut mgr, "carrier-b", &mut rng);
        let cycle = init_cycle(None, &mut rng);

        let mut registry = Registry::new();
        let mut evs = BTreeMap::new();
        let mut mss = BTreeMap::new();
        let mut ev_isks = BTreeMap::new();
        let mut ms_isks = BTreeMap::new();
        let now = 1_000u64;
        for i in 0..n_ev {
            let isk = SigningKey::generate(&mut rng);
            let nip = format!("10.0.0.{i}:7000");
            let nid = derive_nid(&nip, NodeType::Ev, &isk.verifying_key());
            registry
                .register_node(&nip, NodeType::Ev, &isk.verifying_key())
                .unwrap();
            let node = EvNode::new(
                nid,
                isk.clone(),
                S as usize,
                T_ROT,
                EPS,
                now,
                gpk.clone(),
                cycle.vk,
                &mut rng,
            );
            ev_isks.insert(nid, isk);
            evs.insert(nid, node);
        }
        for i in 0..n_ms {
            let isk = SigningKey::generate(&mut rng);
            let nip = format!("10.0.1.{i}:7100");
            let nid = derive_nid(&nip, NodeType::Ms, &isk.verifying_key());
            registry
                .register_node(&nip, NodeType::Ms, &isk.verifying_key())
                .unwrap();
            let node = MsNode::new(nid, isk.clone(), T_MAX, gpk.clone(), cycle.vk);
            ms_isks.insert(nid, isk);
            mss.insert(nid, node);
        }

        let mint_isk = SigningKey::generate(&mut rng);
        let tokens = mint_tokens(
            "carrier-a",
            &mint_isk,
            &mint_isk.verifying_key(),
            24,
            &cycle,
            &mut rng,
        )
        .unwrap();
        let peer_tokens = mint_tokens(
            "carrier-b",
            &mint_isk,
            &mint_isk.verifying_key(),
            24,
            &cycle,
            &mut rng,
        )
        .unwrap();

        World {
            registry,
            net: TestNet {
                evs: RefCell::new(evs),
                mss: RefCell::new(mss),
                ev_isks,
                ms_isks,
                now: Cell::new(now),
                rng: RefCell::new(StdRng::seed_from_u64(0x5eed)),
                drop_next: RefCell::new(BTreeSet::new()),
                rogue_key: RefCell::new(BTreeMap::new()),
                mangle_sig: RefCell::new(BTreeSet::new()),
                deny: RefCell::new(BTreeSet::new()),
                tamper_record: RefCell::new(BTreeSet::new()),
            },
            gpk: gpk.clone(),
            provider: Provider::new("carrier-a", gpk.clone(), gsk_a, n, m, S),
            peer: Provider::new("carrier-b", gpk, gsk_b, n, m, S),
            tokens,
            peer_tokens,
            rng,
        }
    }

    fn call() -> CallDetails {
        CallDetails::new("+14155550100", "+442079460000", 29_000_000)
    }

    fn no_reports() -> Vec<MisbehaviorReport> {
        Vec::new()
    }

    #[test]
    fn derivation_is_deterministic_and_matches_the_registry() {
        let w = world(10, 4, 3, 3);
        let t1 = w.provider.derive(call(), &w.registry).unwrap();
        let t2 = w.peer.derive(call(), &w.registry).unwrap();
        assert_eq!(t1.cdt, t2.cdt);
        assert_eq!(t1.i_k, t2.i_k);
        assert!(t1.i_k < S);
        assert_eq!(t1.ev_nids(), t2.ev_nids());
        assert_eq!(t1.s_ev.len(), 3);

        let expected: Vec<Digest> = w
            .registry
            .get_nodes(t1.cdt.as_bytes(), 3, NodeType::Ev)
            .iter()
            .map(|(_, nid)| *nid)
            .collect();
        assert_eq!(t1.ev_nids(), expected);

        let shifted = CallDetails::new("+14155550100", "+442079460000", 29_000_001);
        assert_ne!(w.provider.derive(shifted, &w.registry).unwrap().cdt, t1.cdt);
    }

    #[test]
    fn descriptor_encoding_separates_the_fields() {
        let a = CallDetails::new("123", "4567", 7).cdt();
        let b = CallDetails::new("1234", "567", 7).cdt();
        assert_ne!(a, b);
    }

    #[test]
    fn publish_secret_matches_direct_oracle_computation() {
        use group::Group;
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let target = w.provider.derive(call(), &w.registry).unwrap();
        let secret = w
            .provider
            .gen_call_secret(
                SecretMode::Publish,
                &target,
                &w.tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        let csk = match secret {
            CallSecret::Publish(csk) => csk,
            _ => unreachable!(),
        };
        assert!(reports.is_empty());

        let h1 = h_to_group(target.cdt.as_bytes());
        let mut sum = blstrs::G1Projective::identity();
        for nid in target.ev_nids() {
            let sk = w.net.slot_secret_oracle(&nid, target.i_k);
            sum += crate::crypto::g1_exp(&h1, &sk.0);
        }
        let expected = h_digest(&crate::crypto::g1_to_bytes(&sum));
        assert_eq!(csk, expected);
    }

    #[test]
    fn publisher_and_independent_retriever_agree_end_to_end() {
        let mut w = world(8, 5, 3, 3);
        let mut reports = no_reports();
        let payload = b"signed caller attestation";
        let receipt = w
            .provider
            .publish_flow(
                call(),
                payload,
                &w.tokens[0],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        assert!(reports.is_empty());
        assert_eq!(receipt.acks.len(), 3);
        assert!(receipt.failed.is_empty());

        // All selected stores hold byte-identical entries.
        {
            let mss = w.net.mss.borrow();
            let entries: Vec<String> = receipt
                .stores
                .iter()
                .map(|r| {
                    let entry = mss[&r.nid]
                        .db
                        .get_raw(&receipt.request.idx)
                        .expect("record stored");
                    serde_json::to_string(&entry).unwrap()
                })
                .collect();
            assert!(entries.windows(2).all(|pair| pair[0] == pair[1]));
        }

        w.net.advance(2_000);
        let mut denials = Vec::new();
        let found = w
            .peer
            .retrieve_flow(
                call(),
                &w.peer_tokens[0..2],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut denials,
                &mut w.rng,
            )
            .unwrap();
        assert_eq!(found.msg, payload);
        assert_eq!(found.csk, receipt.csk);
        assert!(reports.is_empty());
        assert!(denials.is_empty());
    }

    #[test]
    fn retrieve_candidates_collapse_to_one_without_rotation() {
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let target = w.provider.derive(call(), &w.registry).unwrap();
        let publish = w
            .provider
            .gen_call_secret(
                SecretMode::Publish,
                &target,
                &w.tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        let csk = match publish {
            CallSecret::Publish(csk) => csk,
            _ => unreachable!(),
        };
        let retrieve = w
            .peer
            .gen_call_secret(
                SecretMode::Retrieve,
                &target,
                &w.peer_tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        match retrieve {
            CallSecret::Retrieve(l) => assert_eq!(l, vec![csk]),
            _ => unreachable!(),
        }
        assert!(reports.is_empty());
    }

    #[test]
    fn rotation_between_publish_and_retrieve_doubles_the_candidates() {
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let payload = b"racing a rotation";
        let receipt = w
            .provider
            .publish_flow(
                call(),
                payload,
                &w.tokens[0],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();

        let target = w.provider.derive(call(), &w.registry).unwrap();
        w.net.rotate_slot(&target.ev_nids()[0], target.i_k);

        let secret = w
            .peer
            .gen_call_secret(
                SecretMode::Retrieve,
                &target,
                &w.peer_tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        let candidates = secret.candidates();
        assert_eq!(candidates.len(), 2);
        assert!(candidates.contains(&receipt.csk));
        assert!(reports.is_empty());

        let mut denials = Vec::new();
        let found = w
            .peer
            .retrieve_record(
                &candidates,
                &w.peer_tokens[0],
                &w.registry,
                &w.net,
                &mut reports,
                &mut denials,
                &mut w.rng,
            )
            .unwrap()
            .expect("record reachable through the rotation");
        assert_eq!(found.msg, payload);
    }

    #[test]
    fn rotating_every_evaluator_caps_candidates_at_two_to_the_n() {
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let target = w.provider.derive(call(), &w.registry).unwrap();
        let publish = w
            .provider
            .gen_call_secret(
                SecretMode::Publish,
                &target,
                &w.tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        let csk = match publish {
            CallSecret::Publish(c) => c,
            _ => unreachable!(),
        };
        for nid in target.ev_nids() {
            w.net.rotate_slot(&nid, target.i_k);
        }
        let secret = w
            .peer
            .gen_call_secret(
                SecretMode::Retrieve,
                &target,
                &w.peer_tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        let candidates = secret.candidates();
        assert_eq!(candidates.len(), 8);
        assert!(candidates.contains(&csk));
        assert_ne!(candidates[0], csk, "first candidate uses the new keys");
        assert_eq!(*candidates.last().unwrap(), csk, "old keys come last");
    }

    #[test]
    fn wrong_key_evaluator_fails_the_call_and_leaves_verifiable_evidence() {
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let target = w.provider.derive(call(), &w.registry).unwrap();
        let accused = target.ev_nids()[1];
        w.net
            .rogue_key
            .borrow_mut()
            .insert(accused, crate::voprf::OprfSecretKey::generate(&mut w.rng));

        let err = w
            .provider
            .gen_call_secret(
                SecretMode::Publish,
                &target,
                &w.tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap_err();
        assert_eq!(
            err,
            ProviderError::InsufficientEvaluations {
                usable: 2,
                needed: 3
            }
        );

        // The failed run still deposited the complaint, and its evidence
        // stands on its own: the accused's signature binds it to the
        // claimed pairs, and the blinded algebra fails for the claimed key.
        assert_eq!(reports.len(), 1);
        let complaint = match &reports[0] {
            MisbehaviorReport::Evaluator(c) => c,
            _ => panic!("wrong complaint kind"),
        };
        assert_eq!(complaint.accused, accused);
        let rec = w.registry.get(&accused).unwrap();
        let hreq = complaint.request.request_digest();
        let hres = crate::evaluator::response_digest(&complaint.pairs, &hreq);
        assert!(rec.ipk.verify(hres.as_bytes(), &complaint.sigma_j).is_ok());
        assert!(!voprf::verify_blinded_pair(
            &complaint.pairs[0].pk,
            &complaint.request.x,
            &complaint.pairs[0].y
        ));
    }

    #[test]
    fn mangled_response_signature_is_dropped_without_complaint() {
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let target = w.provider.derive(call(), &w.registry).unwrap();
        w.net.mangle_sig.borrow_mut().insert(target.ev_nids()[2]);
        let err = w
            .provider
            .gen_call_secret(
                SecretMode::Publish,
                &target,
                &w.tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap_err();
        assert_eq!(
            err,
            ProviderError::InsufficientEvaluations {
                usable: 2,
                needed: 3
            }
        );
        assert!(
            reports.is_empty(),
            "an unauthenticated response proves nothing"
        );
    }

    #[test]
    fn one_dropped_evaluator_response_is_retried_transparently() {
        let mut w = world(6, 3, 3, 3);
        let mut reports = no_reports();
        let target = w.provider.derive(call(), &w.registry).unwrap();
        w.net.drop_next.borrow_mut().insert(target.ev_nids()[0]);
        let secret = w
            .provider
            .gen_call_secret(
                SecretMode::Publish,
                &target,
                &w.tokens[0],
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        assert!(matches!(secret, CallSecret::Publish(_)));
        assert!(reports.is_empty());
    }

    #[test]
    fn stale_minute_beyond_the_fallback_window_finds_nothing() {
        let mut w = world(8, 4, 3, 3);
        let mut reports = no_reports();
        let c = call();
        w.provider
            .publish_flow(
                c.clone(),
                b"msg",
                &w.tokens[0],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();

        // One minute late: the fallback pass reaches the publish minute.
        let mut denials = Vec::new();
        let late = CallDetails::new(c.src.clone(), c.dst.clone(), c.ts_min + 1);
        let found = w.peer.retrieve_flow(
            late,
            &w.peer_tokens[0..2],
            &w.registry,
            &w.net,
            &w.net,
            &mut reports,
            &mut denials,
            &mut w.rng,
        );
        assert!(found.is_ok());

        // Two minutes late: beyond the fallback, indistinguishable from
        // never published.
        let very_late = CallDetails::new(c.src, c.dst, c.ts_min + 2);
        let err = w
            .peer
            .retrieve_flow(
                very_late,
                &w.peer_tokens[2..4],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut denials,
                &mut w.rng,
            )
            .unwrap_err();
        assert_eq!(err, ProviderError::RecordNotFound);
    }

    #[test]
    fn denying_store_yields_evidence_that_builds_a_complaint() {
        let mut w = world(6, 3, 3, 2);
        let mut reports = no_reports();
        let receipt = w
            .provider
            .publish_flow(
                call(),
                b"msg",
                &w.tokens[0],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        for (nid, _) in &receipt.acks {
            w.net.deny.borrow_mut().insert(*nid);
        }

        let mut denials = Vec::new();
        let err = w
            .peer
            .retrieve_flow(
                call(),
                &w.peer_tokens[0..1],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut denials,
                &mut w.rng,
            )
            .unwrap_err();
        assert_eq!(err, ProviderError::RecordNotFound);
        assert_eq!(denials.len(), 2);

        for denial in &denials {
            let complaint = receipt.denial_complaint(denial).expect("ack exists");
            match complaint {
                MisbehaviorReport::StoreDenial(c) => {
                    assert_eq!(c.accused, denial.nid);
                    assert!(c.not_found.ts_ms < c.ack.ts_ms + T_MAX);
                }
                _ => panic!("wrong complaint kind"),
            }
        }
    }

    #[test]
    fn tampered_record_is_skipped_and_reported() {
        let mut w = world(6, 3, 3, 1);
        let mut reports = no_reports();
        let receipt = w
            .provider
            .publish_flow(
                call(),
                b"msg",
                &w.tokens[0],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        let store_nid = receipt.acks[0].0;
        w.net.tamper_record.borrow_mut().insert(store_nid);

        let mut denials = Vec::new();
        let err = w
            .peer
            .retrieve_flow(
                call(),
                &w.peer_tokens[0..1],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut denials,
                &mut w.rng,
            )
            .unwrap_err();
        assert_eq!(err, ProviderError::RecordNotFound);
        assert_eq!(reports.len(), 1);
        match &reports[0] {
            MisbehaviorReport::StoreCorrupt(c) => {
                assert_eq!(c.accused, store_nid);
                // The store signed the tampered bytes; the uploader did not.
                let rec = w.registry.get(&store_nid).unwrap();
                assert!(c
                    .hit
                    .verify_transport(&rec.ipk, &c.retrieve_request.signed_message()));
                assert!(!c.hit.verify_upload(&w.gpk));
            }
            _ => panic!("wrong complaint kind"),
        }
    }

    #[test]
    fn nothing_on_the_wire_names_the_call_or_the_provider() {
        let mut w = world(6, 3, 3, 3);
        let c = call();
        let target = w.provider.derive(c.clone(), &w.registry).unwrap();
        let token = &w.tokens[0];
        let (_bf, x) = blind(target.cdt.as_bytes(), &mut w.rng);
        let nids = target.ev_nids();
        let hreq = csg_request_digest(&x, target.i_k, &token.t0, &token.t1, &nids);
        let sigma = gsign(&w.gpk, &w.provider.gsk, hreq.as_bytes(), &mut w.rng);
        let eval_req = EvalRequest {
            x,
            i_k: target.i_k,
            t0: token.t0,
            t1: token.t1,
            s_ev: nids,
            sigma,
        };
        let csk = h_digest(b"some secret");
        let idx = h_digest(csk.as_bytes());
        let mut c0 = [0u8; 32];
        w.rng.fill_bytes(&mut c0);
        let c1 = aead_seal(&record_key(&c0, &csk), b"payload", &mut w.rng);
        let store_nids: Vec<Digest> = w
            .registry
            .get_ms(csk.as_bytes(), 3)
            .iter()
            .map(|r| r.nid)
            .collect();
        let smsg = store_request_message(&idx, &c0, &c1, &token.t0, &token.t1, &store_nids);
        let ssigma = gsign(&w.gpk, &w.provider.gsk, &smsg, &mut w.rng);
        let store_req = StoreRequest {
            idx,
            c0,
            c1,
            t0: token.t0,
            t1: token.t1,
            s_ms: store_nids,
            sigma: ssigma,
        };

        for wire in [
            serde_json::to_string(&eval_req).unwrap(),
            serde_json::to_string(&store_req).unwrap(),
        ] {
            let lower = wire.to_lowercase();
            for secret in [
                c.src.as_str(),
                c.dst.as_str(),
                "4155550100",
                "2079460000",
                "carrier-a",
            ] {
                assert!(
                    !lower.contains(&secret.to_lowercase()),
                    "wire format leaks {secret}"
                );
            }
            assert!(!lower.contains(&hex::encode(c.cdt().as_bytes())));
        }
    }

    #[test]
    fn publish_uses_all_stores_when_fewer_than_m_exist() {
        let mut w = world(6, 2, 3, 5);
        let mut reports = no_reports();
        let receipt = w
            .provider
            .publish_flow(
                call(),
                b"msg",
                &w.tokens[0],
                &w.registry,
                &w.net,
                &w.net,
                &mut reports,
                &mut w.rng,
            )
            .unwrap();
        assert_eq!(receipt.stores.len(), 2);
        assert_eq!(receipt.acks.len(), 2);
    }
}
