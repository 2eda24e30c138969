//! Message store node: authenticated store/retrieve of short-lived
//! encrypted records.
//!
//! A store holds opaque records keyed by a 32-byte index and forgets them
//! after `t_max`. It never learns who a record is about: the index is an
//! OPRF-derived digest, the payload arrives encrypted, and the uploader
//! authenticates only as "some enrolled provider" via a group signature.
//!
//! Every reply the store gives is signed together with its own clock
//! reading. A store that acknowledges an upload and then denies the record
//! before `t_max` has produced two signed statements that contradict each
//! other, which is exactly what the dispute process needs.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::billing::{spend_context, BillingError, SpentLedger};
use crate::crypto::{h_concat, h_digest, Digest};
use crate::groupsig::{gverify, GroupPublicKey, GroupSignature};
use crate::voprf::{self, OprfOutput, OprfPublicKey};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("this node is not in the request's store set")]
    NotARecipient,
    #[error("group signature on the request does not verify")]
    BadSignature,
    #[error("billing token fails verification")]
    BadToken,
    #[error("token already spent at this node")]
    TokenSpent,
    #[error("an unexpired record already occupies this index")]
    DuplicateIndex,
}

/// One stored record, exactly as received.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordEntry {
    pub c0: [u8; 32],
    #[serde(with = "crate::billing::bytes_hex")]
    pub c1: Vec<u8>,
    /// The uploader's token-to-store-set binding, kept verbatim so a
    /// retriever can check the uploader's signature without knowing the
    /// uploader's token.
    pub bb: Digest,
    pub sigma: GroupSignature,
    pub stored_at_ms: u64,
}

impl RecordEntry {
    pub fn expired(&self, t_max_ms: u64, now_ms: u64) -> bool {
        now_ms > self.stored_at_ms + t_max_ms
    }
}

/// Shared record table; cloning shares the underlying map so an expiry
/// sweeper can run beside the request handlers.
#[derive(Clone, Default)]
pub struct RecordDb {
    inner: Arc<Mutex<BTreeMap<Digest, RecordEntry>>>,
}

impl RecordDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().is_empty()
    }

    /// Raw entry lookup, expiry ignored; for inspection and audit tooling.
    pub fn get_raw(&self, idx: &Digest) -> Option<RecordEntry> {
        self.inner.lock().get(idx).cloned()
    }

    /// Remove every record older than `t_max`, returning how many went.
    pub fn expire_sweep(&self, t_max_ms: u64, now_ms: u64) -> usize {
        let mut map = self.inner.lock();
        let before = map.len();
        map.retain(|_, e| !e.expired(t_max_ms, now_ms));
        before - map.len()
    }

    fn get_live(&self, idx: &Digest, t_max_ms: u64, now_ms: u64) -> Option<RecordEntry> {
        let map = self.inner.lock();
        map.get(idx)
            .filter(|e| !e.expired(t_max_ms, now_ms))
            .cloned()
    }

    /// Insert if the slot is free or its occupant has expired.
    fn try_insert(
        &self,
        idx: Digest,
        entry: RecordEntry,
        t_max_ms: u64,
        now_ms: u64,
    ) -> Result<(), StoreError> {
        let mut map = self.inner.lock();
        if let Some(existing) = map.get(&idx) {
            if !existing.expired(t_max_ms, now_ms) {
                return Err(StoreError::DuplicateIndex);
            }
        }
        map.insert(idx, entry);
        Ok(())
    }
}

/// `H(idx ‖ c0 ‖ c1)`: the payload half of an upload's signed message.
pub fn payload_digest(idx: &Digest, c0: &[u8; 32], c1: &[u8]) -> Digest {
    h_concat(&[idx.as_bytes(), c0, c1])
}

/// The signed message of an upload: payload digest followed by the
/// token-to-store-set binding. The binding half is byte-identical to the
/// token's spend context, so a token reused against a different store set
/// is visible as a context conflict at reconciliation.
pub fn store_request_message(
    idx: &Digest,
    c0: &[u8; 32],
    c1: &[u8],
    t0: &Digest,
    t1: &OprfOutput,
    s_ms: &[Digest],
) -> Vec<u8> {
    let mut msg = Vec::with_capacity(64);
    msg.extend_from_slice(payload_digest(idx, c0, c1).as_bytes());
    msg.extend_from_slice(spend_context(t0, t1, s_ms).as_bytes());
    msg
}

/// The signed message of a lookup: `H(idx)` followed by the binding.
pub fn retrieve_request_message(
    idx: &Digest,
    t0: &Digest,
    t1: &OprfOutput,
    s_ms: &[Digest],
) -> Vec<u8> {
    let mut msg = Vec::with_capacity(64);
    msg.extend_from_slice(h_digest(idx.as_bytes()).as_bytes());
    msg.extend_from_slice(spend_context(t0, t1, s_ms).as_bytes());
    msg
}

/// `hres` for a lookup hit: digest of the record as returned.
pub fn record_digest(idx: &Digest, entry: &RecordEntry) -> Digest {
    h_concat(&[
        idx.as_bytes(),
        &entry.c0,
        &entry.c1,
        entry.bb.as_bytes(),
        &entry.sigma.to_bytes(),
    ])
}

pub fn ack_message(hreq: &[u8], ts_ms: u64) -> Vec<u8> {
    let mut msg = Vec::with_capacity(hreq.len() + 2 + 8);
    msg.extend_from_slice(hreq);
    msg.extend_from_slice(b"ok");
    msg.extend_from_slice(&ts_ms.to_be_bytes());
    msg
}

pub fn hit_message(hreq: &[u8], hres: &Digest, ts_ms: u64) -> Vec<u8> {
    let mut msg = Vec::with_capacity(hreq.len() + 32 + 8);
    msg.extend_from_slice(hreq);
    msg.extend_from_slice(hres.as_bytes());
    msg.extend_from_slice(&ts_ms.to_be_bytes());
    msg
}

pub fn not_found_message(hreq: &[u8], ts_ms: u64) -> Vec<u8> {
    let mut msg = Vec::with_capacity(hreq.len() + 8 + 8);
    msg.extend_from_slice(hreq);
    msg.extend_from_slice(b"notfound");
    msg.extend_from_slice(&ts_ms.to_be_bytes());
    msg
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreRequest {
    pub idx: Digest,
    pub c0: [u8; 32],
    #[serde(with = "crate::billing::bytes_hex")]
    pub c1: Vec<u8>,
    pub t0: Digest,
    pub t1: OprfOutput,
    pub s_ms: Vec<Digest>,
    pub sigma: GroupSignature,
}

impl StoreRequest {
    pub fn signed_message(&self) -> Vec<u8> {
        store_request_message(&self.idx, &self.c0, &self.c1, &self.t0, &self.t1, &self.s_ms)
    }
}

/// Signed acknowledgement of an accepted upload. The timestamp is the
/// store's own clock, bound under its long-term key, which is what later
/// holds it to the retention window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreAck {
    pub nid: Digest,
    pub ts_ms: u64,
    #[serde(with = "crate::billing::ed_sig_serde")]
    pub sigma_r: Signature,
}

impl StoreAck {
    pub fn verify(&self, ipk: &VerifyingKey, hreq: &[u8]) -> bool {
        ipk.verify(&ack_message(hreq, self.ts_ms), &self.sigma_r).is_ok()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub idx: Digest,
    pub t0: Digest,
    pub t1: OprfOutput,
    pub s_ms: Vec<Digest>,
    pub sigma: GroupSignature,
}

impl RetrieveRequest {
    pub fn signed_message(&self) -> Vec<u8> {
        retrieve_request_message(&self.idx, &self.t0, &self.t1, &self.s_ms)
    }
}

/// A lookup hit: the record verbatim plus the store's signature over it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveHit {
    pub nid: Digest,
    pub idx: Digest,
    pub c0: [u8; 32],
    #[serde(with = "crate::billing::bytes_hex")]
    pub c1: Vec<u8>,
    pub bb: Digest,
    pub sigma: GroupSignature,
    pub ts_ms: u64,
    #[serde(with = "crate::billing::ed_sig_serde")]
    pub sigma_r: Signature,
}

impl RetrieveHit {
    fn hres(&self) -> Digest {
        let entry = RecordEntry {
            c0: self.c0,
            c1: self.c1.clone(),
            bb: self.bb,
            sigma: self.sigma.clone(),
            stored_at_ms: 0,
        };
        record_digest(&self.idx, &entry)
    }

    /// Check the store's signature over exactly these record bytes. Once
    /// this holds, the store is committed to having served them.
    pub fn verify_transport(&self, ipk: &VerifyingKey, hreq: &[u8]) -> bool {
        ipk.verify(&hit_message(hreq, &self.hres(), self.ts_ms), &self.sigma_r)
            .is_ok()
    }

    /// The message the uploader's group signature covers.
    pub fn upload_message(&self) -> Vec<u8> {
        let mut msg = Vec::with_capacity(64);
        msg.extend_from_slice(payload_digest(&self.idx, &self.c0, &self.c1).as_bytes());
        msg.extend_from_slice(self.bb.as_bytes());
        msg
    }

    /// Check the uploader's group signature: proves an enrolled provider
    /// uploaded exactly these bytes.
    pub fn verify_upload(&self, gpk: &GroupPublicKey) -> bool {
        gverify(gpk, &self.upload_message(), &self.sigma)
    }

    /// Both checks together; the payload is trustworthy only if the store
    /// pinned the reply and a provider vouches for its content.
    pub fn verify(&self, ipk: &VerifyingKey, gpk: &GroupPublicKey, hreq: &[u8]) -> bool {
        self.verify_transport(ipk, hreq) && self.verify_upload(gpk)
    }
}

/// Signed statement that no live record exists under the queried index.
/// Deliberately identical for "never stored" and "expired".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignedNotFound {
    pub nid: Digest,
    pub ts_ms: u64,
    #[serde(with = "crate::billing::ed_sig_serde")]
    pub sigma_r: Signature,
}

impl SignedNotFound {
    pub fn verify(&self, ipk: &VerifyingKey, hreq: &[u8]) -> bool {
        ipk.verify(&not_found_message(hreq, self.ts_ms), &self.sigma_r)
            .is_ok()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RetrieveReply {
    Hit(RetrieveHit),
    NotFound(SignedNotFound),
}

/// What happened to an authenticated store-side request, as logged.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum MsOutcome {
    Stored {
        #[serde(with = "crate::billing::ed_sig_serde")]
        sigma_r: Signature,
        ts_ms: u64,
    },
    Hit {
        hres: Digest,
        #[serde(with = "crate::billing::ed_sig_serde")]
        sigma_r: Signature,
        ts_ms: u64,
    },
    NotFound {
        #[serde(with = "crate::billing::ed_sig_serde")]
        sigma_r: Signature,
        ts_ms: u64,
    },
    RejectedBadToken,
}

/// Audit-log entry for one authenticated upload. The index and ciphertext
/// stay out of the log: `h_pay` is all an auditor needs to re-check the
/// signatures, and it reveals nothing about which record was written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreFeedback {
    pub nid: Digest,
    /// `H(idx ‖ c0 ‖ c1)`.
    pub h_pay: Digest,
    pub t0: Digest,
    pub t1: OprfOutput,
    pub s_ms: Vec<Digest>,
    pub sigma: GroupSignature,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub outcome: MsOutcome,
}

impl StoreFeedback {
    /// Reconstruct the exact bytes the uploader's group signature covers.
    pub fn signed_message(&self) -> Vec<u8> {
        let mut msg = Vec::with_capacity(64);
        msg.extend_from_slice(self.h_pay.as_bytes());
        msg.extend_from_slice(spend_context(&self.t0, &self.t1, &self.s_ms).as_bytes());
        msg
    }
}

/// Audit-log entry for one authenticated lookup. Logs `H(idx)` rather than
/// the index, so upload and lookup entries for the same record cannot be
/// linked through the log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveFeedback {
    pub nid: Digest,
    /// `H(idx)`.
    pub h_idx: Digest,
    pub t0: Digest,
    pub t1: OprfOutput,
    pub s_ms: Vec<Digest>,
    pub sigma: GroupSignature,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub outcome: MsOutcome,
}

impl RetrieveFeedback {
    /// Reconstruct the exact bytes the requester's group signature covers.
    pub fn signed_message(&self) -> Vec<u8> {
        let mut msg = Vec::with_capacity(64);
        msg.extend_from_slice(self.h_idx.as_bytes());
        msg.extend_from_slice(spend_context(&self.t0, &self.t1, &self.s_ms).as_bytes());
        msg
    }
}

/// A running message-store node.
pub struct MsNode {
    pub nid: Digest,
    isk: SigningKey,
    pub ipk: VerifyingKey,
    pub db: RecordDb,
    pub ledger: SpentLedger,
    gpk: GroupPublicKey,
    vk_b: OprfPublicKey,
    pub t_max_ms: u64,
    pub store_outbox: Vec<StoreFeedback>,
    pub retrieve_outbox: Vec<RetrieveFeedback>,
}

impl MsNode {
    pub fn new(
        nid: Digest,
        isk: SigningKey,
        t_max_ms: u64,
        gpk: GroupPublicKey,
        vk_b: OprfPublicKey,
    ) -> Self {
        let ipk = isk.verifying_key();
        MsNode {
            nid,
            isk,
            ipk,
            db: RecordDb::new(),
            ledger: SpentLedger::new(),
            gpk,
            vk_b,
            t_max_ms,
            store_outbox: Vec::new(),
            retrieve_outbox: Vec::new(),
        }
    }

    fn auth_checks(
        &self,
        hreq: &[u8],
        sigma: &GroupSignature,
        s_ms: &[Digest],
        t0: &Digest,
        t1: &OprfOutput,
    ) -> Result<bool, StoreError> {
        if !gverify(&self.gpk, hreq, sigma) {
            return Err(StoreError::BadSignature);
        }
        if !s_ms.contains(&self.nid) {
            return Err(StoreError::NotARecipient);
        }
        if self.ledger.peek(t0, t1).is_some() {
            return Err(StoreError::TokenSpent);
        }
        Ok(voprf::verify_output(&self.vk_b, t0.as_bytes(), t1))
    }

    /// Handle one upload at time `now_ms`.
    pub fn store(&mut self, req: &StoreRequest, now_ms: u64) -> Result<StoreAck, StoreError> {
        let hreq = req.signed_message();
        let token_ok = self.auth_checks(&hreq, &req.sigma, &req.s_ms, &req.t0, &req.t1)?;
        if !token_ok {
            self.log_store(req, now_ms, MsOutcome::RejectedBadToken);
            return Err(StoreError::BadToken);
        }
        let entry = RecordEntry {
            c0: req.c0,
            c1: req.c1.clone(),
            bb: spend_context(&req.t0, &req.t1, &req.s_ms),
            sigma: req.sigma.clone(),
            stored_at_ms: now_ms,
        };
        self.db.try_insert(req.idx, entry, self.t_max_ms, now_ms)?;
        match self.ledger.spend(
            &req.t0,
            &req.t1,
            spend_context(&req.t0, &req.t1, &req.s_ms),
        ) {
            Ok(()) => {}
            Err(BillingError::AlreadySpent) => return Err(StoreError::TokenSpent),
            Err(_) => return Err(StoreError::BadToken),
        }
        let sigma_r = self.isk.sign(&ack_message(&hreq, now_ms));
        self.log_store(
            req,
            now_ms,
            MsOutcome::Stored {
                sigma_r,
                ts_ms: now_ms,
            },
        );
        Ok(StoreAck {
            nid: self.nid,
            ts_ms: now_ms,
            sigma_r,
        })
    }

    /// Handle one lookup at time `now_ms`. A miss is an authenticated,
    /// signed outcome, not a failure: the token is left unspent so the
    /// caller can retry (e.g. under the previous time bucket), and the
    /// signed statement feeds dispute resolution if the miss was a lie.
    pub fn retrieve(
        &mut self,
        req: &RetrieveRequest,
        now_ms: u64,
    ) -> Result<RetrieveReply, StoreError> {
        let hreq = req.signed_message();
        let token_ok = self.auth_checks(&hreq, &req.sigma, &req.s_ms, &req.t0, &req.t1)?;
        if !token_ok {
            self.log_retrieve(req, now_ms, MsOutcome::RejectedBadToken);
            return Err(StoreError::BadToken);
        }
        match self.db.get_live(&req.idx, self.t_max_ms, now_ms) {
            Some(entry) => {
                let hres = record_digest(&req.idx, &entry);
                let sigma_r = self.isk.sign(&hit_message(&hreq, &hres, now_ms));
                match self.ledger.spend(
                    &req.t0,
                    &req.t1,
                    spend_context(&req.t0, &req.t1, &req.s_ms),
                ) {
                    Ok(()) => {}
                    Err(BillingError::AlreadySpent) => return Err(StoreError::TokenSpent),
                    Err(_) => return Err(StoreError::BadToken),
                }
                self.log_retrieve(
                    req,
                    now_ms,
                    MsOutcome::Hit {
                        hres,
                        sigma_r,
                        ts_ms: now_ms,
                    },
                );
                Ok(RetrieveReply::Hit(RetrieveHit {
                    nid: self.nid,
                    idx: req.idx,
                    c0: entry.c0,
                    c1: entry.c1,
                    bb: entry.bb,
                    sigma: entry.sigma,
                    ts_ms: now_ms,
                    sigma_r,
                }))
            }
            None => {
                let sigma_r = self.isk.sign(&not_found_message(&hreq, now_ms));
                self.log_retrieve(
                    req,
                    now_ms,
                    MsOutcome::NotFound {
                        sigma_r,
                        ts_ms: now_ms,
                    },
                );
                Ok(RetrieveReply::NotFound(SignedNotFound {
                    nid: self.nid,
                    ts_ms: now_ms,
                    sigma_r,
                }))
            }
        }
    }

    fn log_store(&mut self, req: &StoreRequest, ts_ms: u64, outcome: MsOutcome) {
        self.store_outbox.push(StoreFeedback {
            nid: self.nid,
            h_pay: payload_digest(&req.idx, &req.c0, &req.c1),
            t0: req.t0,
            t1: req.t1,
            s_ms: req.s_ms.clone(),
            sigma: req.sigma.clone(),
            ts_ms,
            outcome,
        });
    }

    fn log_retrieve(&mut self, req: &RetrieveRequest, ts_ms: u64, outcome: MsOutcome) {
        self.retrieve_outbox.push(RetrieveFeedback {
            nid: self.nid,
            h_idx: h_digest(req.idx.as_bytes()),
            t0: req.t0,
            t1: req.t1,
            s_ms: req.s_ms.clone(),
            sigma: req.sigma.clone(),
            ts_ms,
            outcome,
        });
    }
}
