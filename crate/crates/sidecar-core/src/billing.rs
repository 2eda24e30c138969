//! Anonymous pay-per-use billing tokens.
//!
//! Providers buy batches of tokens from the clearinghouse each billing
//! cycle. A token is an OPRF evaluation over a value only the provider can
//! open: `t0 = H(provider ‖ a)` for secret random `a`, endorsed blind as
//! `t1 = H1(t0)^sk_b`. The clearinghouse sees how many tokens it endorsed
//! and for whom, but never the tokens themselves; nodes later verify
//! `e(vk_b, H1(t0)) = e(g, t1)` without learning who is spending.
//!
//! Accountability comes from how tokens bind to requests. Every request
//! carrying a token also carries a group signature and a context digest
//! that commits the token to one node set. One call legitimately shows the
//! same token to all its evaluator nodes (one shared context) and to all
//! its store nodes (another). A token seen under two different contexts of
//! the same kind means two different calls spent it; reconciliation flags
//! the pair and the registrar opens both group signatures to name the
//! culprit(s). Honest traffic is never opened.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::Mutex;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{h_concat, Digest};
use crate::groupsig::{open, GroupManagerKey, GroupPublicKey, GroupSignature};
use crate::voprf::{
    self, BlindedElement, BlindingFactor, EvaluatedElement, OprfOutput, OprfPublicKey,
    OprfSecretKey,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BillingError {
    #[error("token failed pairing verification")]
    InvalidToken,
    #[error("token already spent at this node")]
    AlreadySpent,
    #[error("batch signature does not verify under the provider's key")]
    BadBatchSignature,
    #[error("entries do not constitute a double-spend conflict")]
    NotAConflict,
    #[error("group signature on conflicting entry {0} failed to open")]
    OpenFailed(usize),
}

/// Clearinghouse keys for one billing cycle.
#[derive(Clone)]
pub struct BillingCycleKeys {
    pub cycle_id: u64,
    sk: OprfSecretKey,
    pub vk: OprfPublicKey,
}

/// Start a new cycle with a fresh key pair. Tokens from earlier cycles
/// stop verifying because the verification key changes.
pub fn init_cycle(
    prev: Option<&BillingCycleKeys>,
    rng: &mut (impl RngCore + CryptoRng),
) -> BillingCycleKeys {
    let sk = OprfSecretKey::generate(rng);
    let vk = sk.public_key();
    BillingCycleKeys {
        cycle_id: prev.map_or(0, |p| p.cycle_id + 1),
        sk,
        vk,
    }
}

/// One spendable token: `t0` opens only with the provider's secret
/// randomness, `t1` is the clearinghouse endorsement of it.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BillingToken {
    pub t0: Digest,
    pub t1: OprfOutput,
    pub cycle_id: u64,
}

impl BillingToken {
    /// Check the endorsement pairing under the cycle verification key.
    pub fn verify(&self, vk: &OprfPublicKey) -> bool {
        voprf::verify_output(vk, self.t0.as_bytes(), &self.t1)
    }
}

/// Provider-held blinding state for a pending mint batch.
pub struct MintSecrets {
    items: Vec<(Digest, BlindingFactor)>,
}

pub(crate) mod ed_sig_serde {
    use ed25519_dalek::Signature;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(sig: &Signature, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(sig.to_bytes()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Signature, D::Error> {
        let text = String::deserialize(d)?;
        let bytes: [u8; 64] = hex::decode(&text)
            .map_err(serde::de::Error::custom)?
            .try_into()
            .map_err(|_| serde::de::Error::custom("bad signature length"))?;
        Ok(Signature::from_bytes(&bytes))
    }
}

/// What the clearinghouse receives: blinded pre-tokens and a batch
/// signature under the provider's long-term key. Contains no `t0`.
#[derive(Clone, Serialize, Deserialize)]
pub struct MintRequest {
    pub provider_id: String,
    pub blinded: Vec<BlindedElement>,
    #[serde(with = "ed_sig_serde")]
    pub sig: Signature,
}

fn batch_message(provider_id: &str, blinded: &[BlindedElement]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(16 + provider_id.len() + 48 * blinded.len());
    msg.extend_from_slice(b"mint-batch");
    msg.extend_from_slice(&(provider_id.len() as u64).to_be_bytes());
    msg.extend_from_slice(provider_id.as_bytes());
    for x in blinded {
        msg.extend_from_slice(&x.to_bytes());
    }
    msg
}

/// Provider side, step one: draw token randomness, blind, sign the batch.
pub fn prepare_mint(
    provider_id: &str,
    isk: &SigningKey,
    count: usize,
    rng: &mut (impl RngCore + CryptoRng),
) -> (MintSecrets, MintRequest) {
    let mut items = Vec::with_capacity(count);
    let mut blinded = Vec::with_capacity(count);
    for _ in 0..count {
        let mut a = [0u8; 32];
        rng.fill_bytes(&mut a);
        let t0 = h_concat(&[provider_id.as_bytes(), &a]);
        let (bf, x) = voprf::blind(t0.as_bytes(), rng);
        items.push((t0, bf));
        blinded.push(x);
    }
    let sig = isk.sign(&batch_message(provider_id, &blinded));
    (
        MintSecrets { items },
        MintRequest {
            provider_id: provider_id.to_string(),
            blinded,
            sig,
        },
    )
}

impl BillingCycleKeys {
    /// Clearinghouse side: verify the batch signature, endorse every
    /// blinded pre-token. Nothing in the request or the response reveals
    /// the eventual `t0` values.
    pub fn endorse_batch(
        &self,
        req: &MintRequest,
        provider_ipk: &VerifyingKey,
    ) -> Result<Vec<EvaluatedElement>, BillingError> {
        let msg = batch_message(&req.provider_id, &req.blinded);
        if provider_ipk.verify(&msg, &req.sig).is_err() {
            return Err(BillingError::BadBatchSignature);
        }
        Ok(req
            .blinded
            .iter()
            .map(|x| voprf::evaluate(&self.sk, x))
            .collect())
    }
}

/// Provider side, step two: unblind endorsements, keep the tokens that
/// verify, silently skip any that do not.
pub fn finalize_mint(
    secrets: &MintSecrets,
    endorsements: &[EvaluatedElement],
    vk: &OprfPublicKey,
    cycle_id: u64,
) -> Vec<BillingToken> {
    secrets
        .items
        .iter()
        .zip(endorsements)
        .filter_map(|((t0, bf), y)| {
            let t1 = voprf::unblind(bf, y);
            let token = BillingToken {
                t0: *t0,
                t1,
                cycle_id,
            };
            token.verify(vk).then_some(token)
        })
        .collect()
}

/// Mint `count` tokens end to end against an in-process clearinghouse.
pub fn mint_tokens(
    provider_id: &str,
    isk: &SigningKey,
    provider_ipk: &VerifyingKey,
    count: usize,
    ch: &BillingCycleKeys,
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<Vec<BillingToken>, BillingError> {
    let (secrets, req) = prepare_mint(provider_id, isk, count, rng);
    let endorsed = ch.endorse_batch(&req, provider_ipk)?;
    Ok(finalize_mint(&secrets, &endorsed, &ch.vk, ch.cycle_id))
}

/// Per-node record of which tokens have been accepted this cycle, with the
/// context each was first bound to. Check-and-insert is atomic per token:
/// two racing requests for the same token cannot both be accepted.
#[derive(Default)]
pub struct SpentLedger {
    inner: Mutex<BTreeMap<(Digest, [u8; 48]), Digest>>,
}

impl SpentLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Context the token was spent under, if it has been.
    pub fn peek(&self, t0: &Digest, t1: &OprfOutput) -> Option<Digest> {
        self.inner.lock().get(&(*t0, t1.to_bytes())).copied()
    }

    /// Record the token as spent. Fails if this node has seen it before,
    /// whatever the context.
    pub fn spend(
        &self,
        t0: &Digest,
        t1: &OprfOutput,
        context: Digest,
    ) -> Result<(), BillingError> {
        let mut map = self.inner.lock();
        match map.entry((*t0, t1.to_bytes())) {
            std::collections::btree_map::Entry::Occupied(_) => Err(BillingError::AlreadySpent),
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(context);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().is_empty()
    }

    /// Snapshot for audit export: (t0, t1, first-use context).
    pub fn export(&self) -> Vec<(Digest, [u8; 48], Digest)> {
        self.inner
            .lock()
            .iter()
            .map(|((t0, t1), ctx)| (*t0, *t1, *ctx))
            .collect()
    }
}

/// Context digest binding a token use to one node set:
/// `H(t0 ‖ t1 ‖ canonical node set)`. All nodes of one subsystem serving
/// one call derive the same context; any other use of the token derives a
/// different one, which is what reconciliation keys on.
pub fn spend_context(t0: &Digest, t1: &OprfOutput, nids: &[Digest]) -> Digest {
    h_concat(&[
        t0.as_bytes(),
        &t1.to_bytes(),
        &crate::registry::canonical_set_bytes(nids),
    ])
}

/// Verify the endorsement pairing and mark the token spent, atomically
/// against other spenders of the same token at this node.
pub fn verify_and_spend(
    ledger: &SpentLedger,
    vk: &OprfPublicKey,
    t0: &Digest,
    t1: &OprfOutput,
    context: Digest,
) -> Result<(), BillingError> {
    if !voprf::verify_output(vk, t0.as_bytes(), t1) {
        return Err(BillingError::InvalidToken);
    }
    ledger.spend(t0, t1, context)
}

/// Which subsystem a spend context belongs to. A call's evaluator requests
/// share one context and its store requests another, so sameness is only
/// meaningful within a kind.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Ev,
    Ms,
}

/// One token use as reconstructed from the audit log: enough to detect
/// conflicts and to reopen the group signature if one is found.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpendRecord {
    /// Token identifier (its `t0`).
    pub token: Digest,
    pub kind: ContextKind,
    pub context: Digest,
    /// Node that accepted the spend.
    pub node: Digest,
    /// Exact bytes the provider's group signature covers.
    #[serde(with = "bytes_hex")]
    pub signed_message: Vec<u8>,
    pub sigma: GroupSignature,
}

pub(crate) mod bytes_hex {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec<u8>, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(&text).map_err(serde::de::Error::custom)
    }
}

/// A token spent under two or more distinct contexts of the same kind.
/// `entries` holds one representative record per distinct context.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenConflict {
    pub token: Digest,
    pub kind: ContextKind,
    pub entries: Vec<SpendRecord>,
}

/// End-of-cycle reconciliation output.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReconcileReport {
    /// Distinct tokens each node redeemed: the revenue basis.
    pub per_node_redeemed: BTreeMap<Digest, u64>,
    pub conflicts: Vec<TokenConflict>,
}

/// Group logged spends by token and flag every token whose uses disagree
/// on context within a subsystem kind.
pub fn reconcile(records: &[SpendRecord]) -> ReconcileReport {
    let mut per_node: BTreeMap<Digest, BTreeSet<Digest>> = BTreeMap::new();
    let mut by_token: BTreeMap<(Digest, ContextKind), BTreeMap<Digest, &SpendRecord>> =
        BTreeMap::new();
    for rec in records {
        per_node.entry(rec.node).or_default().insert(rec.token);
        by_token
            .entry((rec.token, rec.kind))
            .or_default()
            .entry(rec.context)
            .or_insert(rec);
    }
    let conflicts = by_token
        .into_iter()
        .filter(|(_, contexts)| contexts.len() >= 2)
        .map(|((token, kind), contexts)| TokenConflict {
            token,
            kind,
            entries: contexts.into_values().cloned().collect(),
        })
        .collect();
    ReconcileReport {
        per_node_redeemed: per_node
            .into_iter()
            .map(|(node, tokens)| (node, tokens.len() as u64))
            .collect(),
        conflicts,
    }
}

/// Open the group signatures on a conflict's entries and return the
/// responsible provider identity for each, in entry order.
pub fn deanonymize_faulter(
    conflict: &TokenConflict,
    gpk: &GroupPublicKey,
    mgr: &GroupManagerKey,
) -> Result<Vec<String>, BillingError> {
    if conflict.entries.len() < 2 {
        return Err(BillingError::NotAConflict);
    }
    let token = conflict.entries[0].token;
    let mut contexts = BTreeSet::new();
    for e in &conflict.entries {
        if e.token != token || e.kind != conflict.kind {
            return Err(BillingError::NotAConflict);
        }
        contexts.insert(e.context);
    }
    if contexts.len() < 2 {
        return Err(BillingError::NotAConflict);
    }
    conflict
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            open(gpk, mgr, &e.signed_message, &e.sigma).ok_or(BillingError::OpenFailed(i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::h_digest;
    use crate::groupsig::{gsetup, gsign, join};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(0xb111)
    }

    fn provider_keys(r: &mut StdRng) -> (SigningKey, VerifyingKey) {
        let sk = SigningKey::generate(r);
        let vk = sk.verifying_key();
        (sk, vk)
    }

    #[test]
    fn minted_tokens_verify_and_are_distinct() {
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let (isk, ipk) = provider_keys(&mut r);
        let tokens = mint_tokens("prov-1", &isk, &ipk, 10, &ch, &mut r).unwrap();
        assert_eq!(tokens.len(), 10);
        let mut t0s = BTreeSet::new();
        for t in &tokens {
            assert!(t.verify(&ch.vk));
            assert_eq!(t.cycle_id, 0);
            t0s.insert(t.t0);
        }
        assert_eq!(t0s.len(), 10);
    }

    #[test]
    fn cycle_rotation_invalidates_old_tokens() {
        let mut r = rng();
        let c0 = init_cycle(None, &mut r);
        let (isk, ipk) = provider_keys(&mut r);
        let tokens = mint_tokens("prov-1", &isk, &ipk, 3, &c0, &mut r).unwrap();
        let c1 = init_cycle(Some(&c0), &mut r);
        assert_eq!(c1.cycle_id, 1);
        assert_ne!(c0.vk, c1.vk);
        for t in &tokens {
            assert!(t.verify(&c0.vk));
            assert!(!t.verify(&c1.vk));
        }
    }

    #[test]
    fn clearinghouse_transcript_never_contains_t0() {
        let mut r = rng();
        let (isk, _ipk) = provider_keys(&mut r);
        let (secrets, req) = prepare_mint("prov-1", &isk, 8, &mut r);
        let transcript = serde_json::to_string(&req).unwrap();
        for (t0, _) in &secrets.items {
            assert!(
                !transcript.contains(&t0.to_hex()),
                "blinded request leaks a token identifier"
            );
            // The blinded element is not the bare hash-to-curve of t0 either.
            let bare = hex::encode(crate::crypto::g1_to_bytes(&crate::crypto::h_to_group(
                t0.as_bytes(),
            )));
            assert!(!transcript.contains(&bare));
        }
    }

    #[test]
    fn tampered_endorsement_skips_only_that_token() {
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let (isk, ipk) = provider_keys(&mut r);
        let (secrets, req) = prepare_mint("prov-1", &isk, 5, &mut r);
        let mut endorsed = ch.endorse_batch(&req, &ipk).unwrap();
        // Corrupt the third endorsement by reblinding it with a bogus step.
        let bad = EvaluatedElement::from_bytes(&crate::crypto::g1_to_bytes(
            &(crate::crypto::h_to_group(b"junk")),
        ))
        .unwrap();
        endorsed[2] = bad;
        let tokens = finalize_mint(&secrets, &endorsed, &ch.vk, ch.cycle_id);
        assert_eq!(tokens.len(), 4);
        let kept: BTreeSet<Digest> = tokens.iter().map(|t| t.t0).collect();
        assert!(!kept.contains(&secrets.items[2].0));
    }

    #[test]
    fn bad_batch_signature_rejects_whole_batch() {
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let (isk, _) = provider_keys(&mut r);
        let (_, req) = prepare_mint("prov-1", &isk, 3, &mut r);
        let (_, other_ipk) = provider_keys(&mut r);
        assert_eq!(
            ch.endorse_batch(&req, &other_ipk).unwrap_err(),
            BillingError::BadBatchSignature
        );
    }

    #[test]
    fn spend_accepts_once_per_node() {
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let (isk, ipk) = provider_keys(&mut r);
        let tokens = mint_tokens("prov-1", &isk, &ipk, 1, &ch, &mut r).unwrap();
        let t = &tokens[0];
        let ctx = h_digest(b"context-a");

        let node_a = SpentLedger::new();
        let node_b = SpentLedger::new();
        assert!(verify_and_spend(&node_a, &ch.vk, &t.t0, &t.t1, ctx).is_ok());
        assert_eq!(
            verify_and_spend(&node_a, &ch.vk, &t.t0, &t.t1, ctx).unwrap_err(),
            BillingError::AlreadySpent
        );
        // A different node has its own ledger; the same call presents the
        // same token there legitimately.
        assert!(verify_and_spend(&node_b, &ch.vk, &t.t0, &t.t1, ctx).is_ok());
        assert_eq!(node_a.peek(&t.t0, &t.t1), Some(ctx));
    }

    #[test]
    fn forged_endorsement_rejected_at_spend() {
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let ledger = SpentLedger::new();
        let t0 = h_digest(b"fake token");
        let t1 = OprfOutput::from_bytes(&crate::crypto::g1_to_bytes(&crate::crypto::h_to_group(
            b"not an endorsement",
        )))
        .unwrap();
        assert_eq!(
            verify_and_spend(&ledger, &ch.vk, &t0, &t1, h_digest(b"ctx")).unwrap_err(),
            BillingError::InvalidToken
        );
        assert!(ledger.is_empty());
    }

    #[test]
    fn racing_spends_accept_exactly_one() {
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let (isk, ipk) = provider_keys(&mut r);
        let tokens = mint_tokens("prov-1", &isk, &ipk, 1, &ch, &mut r).unwrap();
        let t = tokens[0].clone();
        let ledger = SpentLedger::new();
        let oks: usize = std::thread::scope(|s| {
            (0..8)
                .map(|i| {
                    let ledger = &ledger;
                    let t = &t;
                    s.spawn(move || {
                        ledger
                            .spend(&t.t0, &t.t1, h_digest(&[i as u8]))
                            .is_ok() as usize
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .sum()
        });
        assert_eq!(oks, 1);
        assert_eq!(ledger.len(), 1);
    }

    fn record(
        token: Digest,
        kind: ContextKind,
        context: Digest,
        node: Digest,
        msg: &[u8],
        sigma: GroupSignature,
    ) -> SpendRecord {
        SpendRecord {
            token,
            kind,
            context,
            node,
            signed_message: msg.to_vec(),
            sigma,
        }
    }

    #[test]
    fn reconcile_honest_traffic_reports_no_conflicts() {
        let mut r = rng();
        let (gpk, mut mgr) = gsetup(&mut r);
        let gsk = join(&mut mgr, "prov-1", &mut r);
        let mut records = Vec::new();
        let nodes: Vec<Digest> = (0..6u8).map(|i| h_digest(&[i])).collect();
        for call in 0..10u8 {
            let token = h_digest(&[b't', call]);
            let ev_ctx = h_digest(&[b'e', call]);
            let ms_ctx = h_digest(&[b'm', call]);
            let sig_e = gsign(&gpk, &gsk, b"ev-req", &mut r);
            let sig_m = gsign(&gpk, &gsk, b"ms-req", &mut r);
            for ev in 0..3 {
                records.push(record(
                    token,
                    ContextKind::Ev,
                    ev_ctx,
                    nodes[ev],
                    b"ev-req",
                    sig_e.clone(),
                ));
            }
            for ms in 3..6 {
                records.push(record(
                    token,
                    ContextKind::Ms,
                    ms_ctx,
                    nodes[ms],
                    b"ms-req",
                    sig_m.clone(),
                ));
            }
        }
        let report = reconcile(&records);
        assert!(report.conflicts.is_empty());
        // 10 calls, each token hitting all six nodes once.
        assert_eq!(report.per_node_redeemed.len(), 6);
        for count in report.per_node_redeemed.values() {
            assert_eq!(*count, 10);
        }
    }

    #[test]
    fn reconcile_flags_cross_call_reuse_and_opens_the_faulter() {
        let mut r = rng();
        let (gpk, mut mgr) = gsetup(&mut r);
        let _honest = join(&mut mgr, "prov-1", &mut r);
        let cheater = join(&mut mgr, "prov-3", &mut r);
        let token = h_digest(b"shared token");
        let sig_a = gsign(&gpk, &cheater, b"call A request", &mut r);
        let sig_b = gsign(&gpk, &cheater, b"call B request", &mut r);
        let records = vec![
            record(
                token,
                ContextKind::Ev,
                h_digest(b"ctx call A"),
                h_digest(b"node1"),
                b"call A request",
                sig_a,
            ),
            record(
                token,
                ContextKind::Ev,
                h_digest(b"ctx call B"),
                h_digest(b"node2"),
                b"call B request",
                sig_b,
            ),
        ];
        let report = reconcile(&records);
        assert_eq!(report.conflicts.len(), 1);
        let ids = deanonymize_faulter(&report.conflicts[0], &gpk, &mgr).unwrap();
        assert_eq!(ids, vec!["prov-3".to_string(), "prov-3".to_string()]);
    }

    #[test]
    fn deanonymize_names_both_providers_on_a_shared_token() {
        let mut r = rng();
        let (gpk, mut mgr) = gsetup(&mut r);
        let p2 = join(&mut mgr, "prov-2", &mut r);
        let p5 = join(&mut mgr, "prov-5", &mut r);
        let token = h_digest(b"leaked token");
        let sig2 = gsign(&gpk, &p2, b"request by holder", &mut r);
        let sig5 = gsign(&gpk, &p5, b"request by thief", &mut r);
        let records = vec![
            record(
                token,
                ContextKind::Ms,
                h_digest(b"ctx X"),
                h_digest(b"node1"),
                b"request by holder",
                sig2,
            ),
            record(
                token,
                ContextKind::Ms,
                h_digest(b"ctx Y"),
                h_digest(b"node1"),
                b"request by thief",
                sig5,
            ),
        ];
        let report = reconcile(&records);
        assert_eq!(report.conflicts.len(), 1);
        let mut ids = deanonymize_faulter(&report.conflicts[0], &gpk, &mgr).unwrap();
        ids.sort();
        assert_eq!(ids, vec!["prov-2".to_string(), "prov-5".to_string()]);
    }

    #[test]
    fn same_token_across_subsystems_is_not_a_conflict() {
        let mut r = rng();
        let (gpk, mut mgr) = gsetup(&mut r);
        let gsk = join(&mut mgr, "prov-1", &mut r);
        let token = h_digest(b"token");
        let sig = gsign(&gpk, &gsk, b"req", &mut r);
        let records = vec![
            record(
                token,
                ContextKind::Ev,
                h_digest(b"ev ctx"),
                h_digest(b"node1"),
                b"req",
                sig.clone(),
            ),
            record(
                token,
                ContextKind::Ms,
                h_digest(b"ms ctx"),
                h_digest(b"node2"),
                b"req",
                sig,
            ),
        ];
        assert!(reconcile(&records).conflicts.is_empty());
    }

    #[test]
    fn deanonymize_rejects_non_conflicts() {
        let mut r = rng();
        let (gpk, mut mgr) = gsetup(&mut r);
        let gsk = join(&mut mgr, "prov-1", &mut r);
        let sig = gsign(&gpk, &gsk, b"req", &mut r);
        let rec = record(
            h_digest(b"token"),
            ContextKind::Ev,
            h_digest(b"ctx"),
            h_digest(b"node"),
            b"req",
            sig,
        );
        let singleton = TokenConflict {
            token: rec.token,
            kind: ContextKind::Ev,
            entries: vec![rec.clone()],
        };
        assert_eq!(
            deanonymize_faulter(&singleton, &gpk, &mgr).unwrap_err(),
            BillingError::NotAConflict
        );
        let same_ctx = TokenConflict {
            token: rec.token,
            kind: ContextKind::Ev,
            entries: vec![rec.clone(), rec],
        };
        assert_eq!(
            deanonymize_faulter(&same_ctx, &gpk, &mgr).unwrap_err(),
            BillingError::NotAConflict
        );
    }

    #[test]
    fn reconcile_empty_log_is_empty_report() {
        let report = reconcile(&[]);
        assert!(report.conflicts.is_empty());
        assert!(report.per_node_redeemed.is_empty());
    }

    #[test]
    fn ledgers_store_no_provider_identity() {
        // The audit boundary: a node's spent ledger holds tokens and
        // context digests only. Exported entries are fixed-width hashes
        // and points with no identity field to leak.
        let mut r = rng();
        let ch = init_cycle(None, &mut r);
        let (isk, ipk) = provider_keys(&mut r);
        let provider_id = "prov-identity-sensitive";
        let tokens = mint_tokens(provider_id, &isk, &ipk, 2, &ch, &mut r).unwrap();
        let ledger = SpentLedger::new();
        for t in &tokens {
            verify_and_spend(&ledger, &ch.vk, &t.t0, &t.t1, h_digest(b"ctx")).unwrap();
        }
        for (t0, t1, ctx) in ledger.export() {
            let blob = format!("{}{}{}", t0.to_hex(), hex::encode(t1), ctx.to_hex());
            assert!(!blob.contains(&hex::encode(provider_id.as_bytes())));
        }
    }
}
