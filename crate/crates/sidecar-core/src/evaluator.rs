//! Evaluator node: rotating OPRF key ring and the evaluate handler.
//!
//! An evaluator holds `S` independent OPRF key pairs and rotates one slot
//! every `t_rot`, cycling through the ring. A blinded request names the
//! slot it wants (the client derives the slot index from its call
//! descriptor; the evaluator never learns the descriptor). Because a slot's
//! key is destroyed when its turn comes around again, anything encrypted
//! under an output of that slot stops being derivable: records expire even
//! if an evaluator's current keys leak later.
//!
//! Rotation has one deliberate wrinkle. A client that computed a slot index
//! just before the slot rotated would lose the record it is trying to
//! retrieve, so for a grace window after each rotation the evaluator also
//! answers with the key it just retired. Retrieval handles the resulting
//! ambiguity by trying both candidate outputs.
//!
//! Every rotation is signed and published; every accepted request is logged
//! with the provider's own signature attached. Those two logs are what make
//! wrong-key behavior attributable later.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::billing::{self, BillingError, SpentLedger};
use crate::crypto::{h_concat, Digest};
use crate::groupsig::{gverify, GroupPublicKey, GroupSignature};
use crate::registry::canonical_set_bytes;
use crate::voprf::{self, BlindedElement, EvaluatedElement, OprfPublicKey, OprfSecretKey};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("this node is not in the request's evaluator set")]
    NotARecipient,
    #[error("token already spent at this node")]
    TokenSpent,
    #[error("group signature on the request does not verify")]
    BadSignature,
    #[error("billing token fails verification")]
    BadToken,
}

/// Ring of `S` rotating key pairs plus the one just-retired pair.
pub struct KeySchedule {
    slots: Vec<(OprfSecretKey, OprfPublicKey)>,
    /// Slot to be replaced by the next rotation.
    cursor: usize,
    t_rot_ms: u64,
    eps_ms: u64,
    /// The pair most recently rotated out, servable during the grace
    /// window. A newer rotation simply drops the older retired pair.
    k_exp: Option<(OprfSecretKey, OprfPublicKey)>,
    /// Time of the last rotation (or of schedule creation).
    t_exp_ms: u64,
}

/// Signed announcement of one new slot key, destined for the audit log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RotationLogEntry {
    pub nid: Digest,
    pub slot: u32,
    #[serde(with = "pk_serde")]
    pub pk: OprfPublicKey,
    pub ts_ms: u64,
    #[serde(with = "crate::billing::ed_sig_serde")]
    pub sig: Signature,
}

pub(crate) mod pk_serde {
    use crate::voprf::OprfPublicKey;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(pk: &OprfPublicKey, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(pk.to_bytes()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OprfPublicKey, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        OprfPublicKey::from_bytes(&bytes).map_err(|_| serde::de::Error::custom("invalid key"))
    }
}

/// Bytes a rotation announcement signs.
pub fn rotation_message(slot: u32, pk: &OprfPublicKey, ts_ms: u64) -> Vec<u8> {
    let mut msg = Vec::with_capacity(12 + 96 + 8);
    msg.extend_from_slice(b"ev-rotation");
    msg.extend_from_slice(&slot.to_be_bytes());
    msg.extend_from_slice(&pk.to_bytes());
    msg.extend_from_slice(&ts_ms.to_be_bytes());
    msg
}

impl RotationLogEntry {
    pub fn verify(&self, ipk: &VerifyingKey) -> bool {
        ipk.verify(&rotation_message(self.slot, &self.pk, self.ts_ms), &self.sig)
            .is_ok()
    }
}

impl KeySchedule {
    /// Fresh schedule with every slot keyed, announcing all `S` initial
    /// keys so auditors can attribute outputs from the very first request.
    pub fn new(
        s: usize,
        t_rot_ms: u64,
        eps_ms: u64,
        now_ms: u64,
        nid: Digest,
        isk: &SigningKey,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> (Self, Vec<RotationLogEntry>) {
        assert!(s >= 2, "a key ring needs at least two slots");
        let slots: Vec<_> = (0..s)
            .map(|_| {
                let sk = OprfSecretKey::generate(rng);
                let pk = sk.public_key();
                (sk, pk)
            })
            .collect();
        let entries = slots
            .iter()
            .enumerate()
            .map(|(i, (_, pk))| {
                let sig = isk.sign(&rotation_message(i as u32, pk, now_ms));
                RotationLogEntry {
                    nid,
                    slot: i as u32,
                    pk: *pk,
                    ts_ms: now_ms,
                    sig,
                }
            })
            .collect();
        (
            KeySchedule {
                slots,
                cursor: 0,
                t_rot_ms,
                eps_ms,
                k_exp: None,
                t_exp_ms: now_ms,
            },
            entries,
        )
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn public_key(&self, slot: usize) -> &OprfPublicKey {
        &self.slots[slot % self.slots.len()].1
    }

    pub(crate) fn slot_secret(&self, slot: usize) -> &OprfSecretKey {
        &self.slots[slot % self.slots.len()].0
    }

    pub fn last_rotation_ms(&self) -> u64 {
        self.t_exp_ms
    }

    pub fn rotation_due(&self, now_ms: u64) -> bool {
        now_ms >= self.t_exp_ms + self.t_rot_ms
    }

    /// Replace the slot at the cursor with a fresh pair, retiring the old
    /// one into the grace window. Returns the signed announcement.
    pub fn rotate(
        &mut self,
        now_ms: u64,
        nid: Digest,
        isk: &SigningKey,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> RotationLogEntry {
        let sk = OprfSecretKey::generate(rng);
        let pk = sk.public_key();
        let slot = self.cursor;
        let old = std::mem::replace(&mut self.slots[slot], (sk, pk));
        self.k_exp = Some(old);
        self.t_exp_ms = now_ms;
        self.cursor = (self.cursor + 1) % self.slots.len();
        let sig = isk.sign(&rotation_message(slot as u32, &pk, now_ms));
        RotationLogEntry {
            nid,
            slot: slot as u32,
            pk,
            ts_ms: now_ms,
            sig,
        }
    }
}

/// A blinded evaluation request.
#[derive(Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub x: BlindedElement,
    /// Slot index the client derived from its call descriptor.
    pub i_k: u32,
    /// Billing token.
    pub t0: Digest,
    pub t1: crate::voprf::OprfOutput,
    /// The evaluator set this request is addressed to.
    pub s_ev: Vec<Digest>,
    /// Provider group signature over the request digest.
    pub sigma: GroupSignature,
}

/// `hreq`: what the provider's group signature covers.
pub fn csg_request_digest(
    x: &BlindedElement,
    i_k: u32,
    t0: &Digest,
    t1: &crate::voprf::OprfOutput,
    s_ev: &[Digest],
) -> Digest {
    h_concat(&[
        &x.to_bytes(),
        &i_k.to_be_bytes(),
        t0.as_bytes(),
        &t1.to_bytes(),
        &canonical_set_bytes(s_ev),
    ])
}

impl EvalRequest {
    pub fn request_digest(&self) -> Digest {
        csg_request_digest(&self.x, self.i_k, &self.t0, &self.t1, &self.s_ev)
    }
}

/// One or two evaluated pairs plus the node's signature over them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResponse {
    pub nid: Digest,
    /// `(y, pk)` pairs: the requested slot, then the just-retired pair if
    /// the request raced a rotation.
    pub pairs: Vec<EvalPair>,
    /// Signature over `H(pairs ‖ hreq)` under the node's long-term key.
    #[serde(with = "crate::billing::ed_sig_serde")]
    pub sig: Signature,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPair {
    pub y: EvaluatedElement,
    #[serde(with = "pk_serde")]
    pub pk: OprfPublicKey,
}

/// Canonical bytes of a response's pairs, used in `hres` and the response
/// signature.
pub fn pairs_bytes(pairs: &[EvalPair]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pairs.len() * (48 + 96));
    for p in pairs {
        out.extend_from_slice(&p.y.to_bytes());
        out.extend_from_slice(&p.pk.to_bytes());
    }
    out
}

/// `hres = H(pairs ‖ hreq)`: the digest the node signs.
pub fn response_digest(pairs: &[EvalPair], hreq: &Digest) -> Digest {
    h_concat(&[&pairs_bytes(pairs), hreq.as_bytes()])
}

impl EvalResponse {
    /// Check the node's signature against a request digest.
    pub fn verify(&self, ipk: &VerifyingKey, hreq: &Digest) -> bool {
        let hres = response_digest(&self.pairs, hreq);
        ipk.verify(hres.as_bytes(), &self.sig).is_ok()
    }
}

/// What happened to a request, as logged.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum EvalOutcome {
    Accepted {
        hres: Digest,
        #[serde(with = "crate::billing::ed_sig_serde")]
        sigma_j: Signature,
    },
    /// Request authenticated but its token failed verification; no key
    /// material was used and the token was not burned.
    RejectedBadToken,
}

/// Audit-log entry for one authenticated evaluation request.
#[derive(Clone, Serialize, Deserialize)]
pub struct CidgenFeedback {
    pub nid: Digest,
    pub x: BlindedElement,
    pub i_k: u32,
    pub t0: Digest,
    pub t1: crate::voprf::OprfOutput,
    pub s_ev: Vec<Digest>,
    pub sigma: GroupSignature,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub outcome: EvalOutcome,
}

impl CidgenFeedback {
    /// Recompute the request digest the provider's group signature covers.
    pub fn request_digest(&self) -> Digest {
        csg_request_digest(&self.x, self.i_k, &self.t0, &self.t1, &self.s_ev)
    }
}

/// A running evaluator node: key schedule, spent-token ledger, and the
/// outboxes of log entries awaiting background submission to the audit log.
pub struct EvNode {
    pub nid: Digest,
    isk: SigningKey,
    pub ipk: VerifyingKey,
    schedule: KeySchedule,
    pub ledger: SpentLedger,
    gpk: GroupPublicKey,
    vk_b: OprfPublicKey,
    pub feedback_outbox: Vec<CidgenFeedback>,
    pub rotation_outbox: Vec<RotationLogEntry>,
}

impl EvNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nid: Digest,
        isk: SigningKey,
        s: usize,
        t_rot_ms: u64,
        eps_ms: u64,
        now_ms: u64,
        gpk: GroupPublicKey,
        vk_b: OprfPublicKey,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Self {
        let ipk = isk.verifying_key();
        let (schedule, initial) = KeySchedule::new(s, t_rot_ms, eps_ms, now_ms, nid, &isk, rng);
        EvNode {
            nid,
            isk,
            ipk,
            schedule,
            ledger: SpentLedger::new(),
            gpk,
            vk_b,
            feedback_outbox: Vec::new(),
            rotation_outbox: initial,
        }
    }

    pub fn schedule(&self) -> &KeySchedule {
        &self.schedule
    }

    /// Rotate as many times as the elapsed clock demands, stamping each
    /// catch-up rotation at its scheduled time rather than at `now`.
    pub fn tick(&mut self, now_ms: u64, rng: &mut (impl RngCore + CryptoRng)) {
        while self.schedule.rotation_due(now_ms) {
            let due = self.schedule.t_exp_ms + self.schedule.t_rot_ms;
            let entry = self.schedule.rotate(due, self.nid, &self.isk, rng);
            self.rotation_outbox.push(entry);
        }
    }

    /// Rotate immediately regardless of the clock (operator-forced).
    pub fn force_rotate(&mut self, now_ms: u64, rng: &mut (impl RngCore + CryptoRng)) {
        let entry = self.schedule.rotate(now_ms, self.nid, &self.isk, rng);
        self.rotation_outbox.push(entry);
    }

    /// Handle one evaluation request at time `now_ms`.
    pub fn evaluate(&mut self, req: &EvalRequest, now_ms: u64) -> Result<EvalResponse, EvalError> {
        if !req.s_ev.contains(&self.nid) {
            return Err(EvalError::NotARecipient);
        }
        if self.ledger.peek(&req.t0, &req.t1).is_some() {
            return Err(EvalError::TokenSpent);
        }
        let hreq = req.request_digest();
        if !gverify(&self.gpk, hreq.as_bytes(), &req.sigma) {
            return Err(EvalError::BadSignature);
        }
        if !voprf::verify_output(&self.vk_b, req.t0.as_bytes(), &req.t1) {
            self.log_feedback(req, now_ms, EvalOutcome::RejectedBadToken);
            return Err(EvalError::BadToken);
        }

        let s = self.schedule.slot_count();
        let idx = req.i_k as usize % s;
        let (sk, pk) = &self.schedule.slots[idx];
        let mut pairs = vec![EvalPair {
            y: voprf::evaluate(sk, &req.x),
            pk: *pk,
        }];
        let just_rotated = (self.schedule.cursor + s - 1) % s;
        if idx == just_rotated && self.schedule.t_exp_ms + self.schedule.eps_ms > now_ms {
            if let Some((sk_exp, pk_exp)) = &self.schedule.k_exp {
                pairs.push(EvalPair {
                    y: voprf::evaluate(sk_exp, &req.x),
                    pk: *pk_exp,
                });
            }
        }

        let hres = response_digest(&pairs, &hreq);
        let sigma_j = self.isk.sign(hres.as_bytes());
        let context = billing::spend_context(&req.t0, &req.t1, &req.s_ev);
        match self.ledger.spend(&req.t0, &req.t1, context) {
            Ok(()) => {}
            Err(BillingError::AlreadySpent) => return Err(EvalError::TokenSpent),
            Err(_) => return Err(EvalError::BadToken),
        }
        self.log_feedback(req, now_ms, EvalOutcome::Accepted { hres, sigma_j });
        Ok(EvalResponse {
            nid: self.nid,
            pairs,
            sig: sigma_j,
        })
    }

    fn log_feedback(&mut self, req: &EvalRequest, ts_ms: u64, outcome: EvalOutcome) {
        self.feedback_outbox.push(CidgenFeedback {
            nid: self.nid,
            x: req.x,
            i_k: req.i_k,
            t0: req.t0,
            t1: req.t1,
            s_ev: req.s_ev.clone(),
            sigma: req.sigma.clone(),
            ts_ms,
            outcome,
        });
    }
}
