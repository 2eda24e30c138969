//! In-process deployment harness: real nodes, a virtual clock, and
//! injectable faults.
//!
//! [`System`] owns a registrar, an audit log, a fleet of evaluator and
//! store nodes, and a set of enrolled providers, all driven through the
//! same code paths a networked deployment would use. The transport layer
//! is [`Net`], an in-memory fan-out that can corrupt, deny, or drop
//! traffic per node according to a [`FaultPlan`], so dispute and
//! settlement machinery can be exercised against known ground truth.
//!
//! Time is virtual: nothing reads the wall clock. [`System::advance`]
//! moves the clock and lets every node catch up on scheduled key
//! rotations, which makes expiry and rotation races reproducible.

use crate::admin::{
    Admin, AdminParams, Als, AlsSubmission, DisputeVerdict, SettlementReport,
};
use crate::billing::{mint_tokens, BillingToken};
use crate::crypto::Digest;
use crate::evaluator::{response_digest, EvNode, EvalError, EvalRequest, EvalResponse};
use crate::msgstore::{MsNode, RetrieveReply, RetrieveRequest, StoreAck, StoreError, StoreRequest};
use crate::provider::{
    CallDetails, CallTarget, DenialEvidence, EvTransport, MisbehaviorReport, MsTransport,
    Provider, ProviderError, PublishReceipt, RetrieveSuccess,
};
use crate::registry::NodeType;
use crate::voprf::{self, OprfOutput, OprfPublicKey, OprfSecretKey};
use ed25519_dalek::{Signer, SigningKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};

/// Deployment shape and protocol parameters for a simulated system.
#[derive(Clone, Debug)]
pub struct SystemConfig {
    /// Evaluator nodes.
    pub n_ev: usize,
    /// Message-store nodes.
    pub n_ms: usize,
    /// Evaluators consulted per call.
    pub n: usize,
    /// Stores holding each record.
    pub m: usize,
    /// Evaluator key-ring size.
    pub s: u32,
    /// Rotation period per slot.
    pub t_rot_ms: u64,
    /// Grace window in which a just-retired key still serves.
    pub eps_ms: u64,
    /// Record retention window.
    pub t_max_ms: u64,
    /// Tolerated relative jitter in rotation cadence.
    pub delta: f64,
    /// Provider identities to enroll.
    pub providers: Vec<String>,
    /// Token batch size minted whenever a provider's pool runs dry.
    pub tokens_per_provider: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_ev: 10,
            n_ms: 10,
            n: 3,
            m: 3,
            s: 8,
            t_rot_ms: 60_000,
            eps_ms: 5_000,
            t_max_ms: 15_000,
            delta: 0.25,
            providers: vec!["carrier-a".into(), "carrier-b".into()],
            tokens_per_provider: 32,
        }
    }
}

/// Which nodes misbehave, and how.
#[derive(Clone, Debug, Default)]
pub struct FaultPlan {
    /// Evaluators that answer with a value signed under a key they never
    /// announced: the response verifies as transport but fails the
    /// pairing check, which is exactly the evidence a complaint needs.
    pub wrong_key_evs: BTreeSet<Digest>,
    /// Stores that acknowledge uploads, discard them, and later sign
    /// not-found answers inside the retention window.
    pub denying_mss: BTreeSet<Digest>,
    /// Stores that silently drop every request (pure unavailability; no
    /// evidence is ever produced).
    pub dropping_mss: BTreeSet<Digest>,
    /// Per-node clock offset relative to the virtual clock.
    pub clock_skew_ms: BTreeMap<Digest, i64>,
}

/// In-memory transport: delivers requests to owned node instances,
/// applying the fault plan on the way.
pub struct Net {
    evs: RefCell<BTreeMap<Digest, EvNode>>,
    ev_isks: BTreeMap<Digest, SigningKey>,
    mss: RefCell<BTreeMap<Digest, MsNode>>,
    now_ms: Cell<u64>,
    faults: RefCell<FaultPlan>,
    counts: RefCell<BTreeMap<Digest, u64>>,
    rogue: OprfSecretKey,
}

impl Net {
    fn local_now(&self, nid: Digest) -> u64 {
        let skew = self
            .faults
            .borrow()
            .clock_skew_ms
            .get(&nid)
            .copied()
            .unwrap_or(0);
        (self.now_ms.get() as i64 + skew).max(0) as u64
    }

    fn bump(&self, nid: Digest) {
        *self.counts.borrow_mut().entry(nid).or_default() += 1;
    }
}

impl EvTransport for Net {
    fn evaluate(
        &self,
        ev: &crate::registry::NodeRecord,
        req: &EvalRequest,
    ) -> Option<Result<EvalResponse, EvalError>> {
        self.bump(ev.nid);
        let mut evs = self.evs.borrow_mut();
        let node = evs.get_mut(&ev.nid)?;
        let mut resp = match node.evaluate(req, self.local_now(ev.nid)) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        if self.faults.borrow().wrong_key_evs.contains(&ev.nid) {
            if let Some(first) = resp.pairs.first_mut() {
                first.y = voprf::evaluate(&self.rogue, &req.x);
                let hres = response_digest(&resp.pairs, &req.request_digest());
                resp.sig = self.ev_isks[&ev.nid].sign(hres.as_bytes());
            }
        }
        Some(Ok(resp))
    }
}

impl MsTransport for Net {
    fn store(
        &self,
        ms: &crate::registry::NodeRecord,
        req: &StoreRequest,
    ) -> Option<Result<StoreAck, StoreError>> {
        self.bump(ms.nid);
        let faults = self.faults.borrow();
        if faults.dropping_mss.contains(&ms.nid) {
            return None;
        }
        let denying = faults.denying_mss.contains(&ms.nid);
        drop(faults);
        let mut mss = self.mss.borrow_mut();
        let node = mss.get_mut(&ms.nid)?;
        let result = node.store(req, self.local_now(ms.nid));
        if denying {
            node.db.expire_sweep(0, u64::MAX);
        }
        Some(result)
    }

    fn retrieve(
        &self,
        ms: &crate::registry::NodeRecord,
        req: &RetrieveRequest,
    ) -> Option<Result<RetrieveReply, StoreError>> {
        self.bump(ms.nid);
        if self.faults.borrow().dropping_mss.contains(&ms.nid) {
            return None;
        }
        let mut mss = self.mss.borrow_mut();
        let node = mss.get_mut(&ms.nid)?;
        Some(node.retrieve(req, self.local_now(ms.nid)))
    }
}

struct ProviderSlot {
    provider: Provider,
    isk: SigningKey,
    tokens: Vec<BillingToken>,
}

/// One dispute outcome, in complaint-chain order.
#[derive(Clone, Debug)]
pub struct DisputeRow {
    pub seq: u64,
    pub accused: Digest,
    pub verdict: DisputeVerdict,
}

/// A complete simulated deployment under one virtual clock.
pub struct System {
    pub cfg: SystemConfig,
    pub admin: Admin,
    pub als: Als,
    net: Net,
    providers: BTreeMap<String, ProviderSlot>,
    receipts: BTreeMap<Digest, PublishReceipt>,
    reports: Vec<MisbehaviorReport>,
    denials: Vec<DenialEvidence>,
    now_ms: u64,
    rng: ChaCha20Rng,
}

/// Virtual epoch the clock starts at; an arbitrary round number of
/// minutes so minute bucketing starts mid-epoch rather than at zero.
pub const GENESIS_MS: u64 = 1_600_000_000_000;

impl System {
    pub fn new(cfg: SystemConfig, seed: u64) -> System {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut admin = Admin::new(&mut rng);
        let als = Als::new(
            admin.gpk(),
            AdminParams {
                s: cfg.s,
                t_rot_ms: cfg.t_rot_ms,
                eps_ms: cfg.eps_ms,
                t_max_ms: cfg.t_max_ms,
                delta: cfg.delta,
            },
        );
        let gpk = admin.gpk();
        let vk_b = admin.cycle().vk;
        let now = GENESIS_MS;

        let mut evs = BTreeMap::new();
        let mut ev_isks = BTreeMap::new();
        for i in 0..cfg.n_ev {
            let isk = SigningKey::generate(&mut rng);
            let rec = admin
                .register_node(&format!("10.0.{}.{}:7000", i / 250, i % 250), NodeType::Ev, &isk.verifying_key())
                .expect("fresh evaluator address");
            let node = EvNode::new(
                rec.nid,
                isk.clone(),
                cfg.s as usize,
                cfg.t_rot_ms,
                cfg.eps_ms,
                now,
                gpk.clone(),
                vk_b,
                &mut rng,
            );
            ev_isks.insert(rec.nid, isk);
            evs.insert(rec.nid, node);
        }

        let mut mss = BTreeMap::new();
        for i in 0..cfg.n_ms {
            let isk = SigningKey::generate(&mut rng);
            let rec = admin
                .register_node(&format!("10.1.{}.{}:7100", i / 250, i % 250), NodeType::Ms, &isk.verifying_key())
                .expect("fresh store address");
            mss.insert(
                rec.nid,
                MsNode::new(rec.nid, isk, cfg.t_max_ms, gpk.clone(), vk_b),
            );
        }

        let mut providers = BTreeMap::new();
        for name in &cfg.providers {
            let gsk = admin
                .register_provider(name, &mut rng)
                .expect("fresh provider id");
            let provider = Provider::new(name.clone(), gpk.clone(), gsk, cfg.n, cfg.m, cfg.s);
            providers.insert(
                name.clone(),
                ProviderSlot {
                    provider,
                    isk: SigningKey::generate(&mut rng),
                    tokens: Vec::new(),
                },
            );
        }

        let mut system = System {
            net: Net {
                evs: RefCell::new(evs),
                ev_isks,
                mss: RefCell::new(mss),
                now_ms: Cell::new(now),
                faults: RefCell::new(FaultPlan::default()),
                counts: RefCell::new(BTreeMap::new()),
                rogue: OprfSecretKey::generate(&mut rng),
            },
            cfg,
            admin,
            als,
            providers,
            receipts: BTreeMap::new(),
            reports: Vec::new(),
            denials: Vec::new(),
            now_ms: now,
            rng,
        };
        system.sync();
        system
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Move the virtual clock forward and let every evaluator catch up on
    /// scheduled rotations. Stores sweep expired records as a side effect;
    /// lookups check expiry themselves, so the sweep only bounds memory.
    pub fn advance(&mut self, ms: u64) {
        self.now_ms += ms;
        self.net.now_ms.set(self.now_ms);
        let mut evs = self.net.evs.borrow_mut();
        for (nid, node) in evs.iter_mut() {
            node.tick(self.net.local_now(*nid), &mut self.rng);
        }
        drop(evs);
        let mss = self.net.mss.borrow();
        for (nid, node) in mss.iter() {
            node.db.expire_sweep(node.t_max_ms, self.net.local_now(*nid));
        }
    }

    pub fn set_faults(&mut self, plan: FaultPlan) {
        *self.net.faults.borrow_mut() = plan;
    }

    pub fn ev_nids(&self) -> Vec<Digest> {
        self.net.evs.borrow().keys().copied().collect()
    }

    pub fn ms_nids(&self) -> Vec<Digest> {
        self.net.mss.borrow().keys().copied().collect()
    }

    /// Requests delivered per node since construction, faults included.
    pub fn request_counts(&self) -> BTreeMap<Digest, u64> {
        self.net.counts.borrow().clone()
    }

    pub fn provider_ids(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }

    /// Enroll a provider on first use; a no-op when already enrolled.
    pub fn ensure_provider(&mut self, name: &str) {
        if self.providers.contains_key(name) {
            return;
        }
        let gsk = self
            .admin
            .register_provider(name, &mut self.rng)
            .expect("name not previously revoked");
        let provider = Provider::new(
            name,
            self.admin.gpk(),
            gsk,
            self.cfg.n,
            self.cfg.m,
            self.cfg.s,
        );
        self.providers.insert(
            name.to_string(),
            ProviderSlot {
                provider,
                isk: SigningKey::generate(&mut self.rng),
                tokens: Vec::new(),
            },
        );
    }

    /// Resolve a call against the current registry: descriptor digest,
    /// slot index, and serving evaluator set.
    pub fn call_target(
        &self,
        provider: &str,
        call: CallDetails,
    ) -> Result<CallTarget, ProviderError> {
        self.providers[provider].provider.derive(call, &self.admin.registry)
    }

    fn take_tokens(&mut self, provider: &str, count: usize) -> Vec<BillingToken> {
        let slot = self.providers.get_mut(provider).expect("enrolled provider");
        while slot.tokens.len() < count {
            let batch = mint_tokens(
                &slot.provider.provider_id,
                &slot.isk,
                &slot.isk.verifying_key(),
                self.cfg.tokens_per_provider.max(count),
                self.admin.cycle(),
                &mut self.rng,
            )
            .expect("provider enrolled with the clearinghouse");
            slot.tokens.extend(batch);
        }
        slot.tokens.split_off(slot.tokens.len() - count)
    }

    /// Draw one fresh token from the provider's pool.
    pub fn take_token(&mut self, provider: &str) -> BillingToken {
        self.take_tokens(provider, 1).remove(0)
    }

    /// Publish a record for a call, using one fresh token.
    pub fn publish(
        &mut self,
        provider: &str,
        call: CallDetails,
        msg: &[u8],
    ) -> Result<PublishReceipt, ProviderError> {
        let token = self.take_token(provider);
        self.publish_with_token(provider, call, msg, &token)
    }

    /// Publish with a caller-chosen token. Reusing a token here is how a
    /// cheating provider is simulated; honest flows never share one.
    pub fn publish_with_token(
        &mut self,
        provider: &str,
        call: CallDetails,
        msg: &[u8],
        token: &BillingToken,
    ) -> Result<PublishReceipt, ProviderError> {
        let slot = &self.providers[provider];
        let receipt = slot.provider.publish_flow(
            call,
            msg,
            token,
            &self.admin.registry,
            &self.net,
            &self.net,
            &mut self.reports,
            &mut self.rng,
        )?;
        self.receipts.insert(receipt.idx(), receipt.clone());
        Ok(receipt)
    }

    /// Retrieve a call's record, with the previous-minute fallback. Two
    /// tokens are drawn, one per possible attempt, and none are returned
    /// to the pool: a token that touched any node is burnt.
    pub fn retrieve(
        &mut self,
        provider: &str,
        call: CallDetails,
    ) -> Result<RetrieveSuccess, ProviderError> {
        let tokens = self.take_tokens(provider, 2);
        let slot = &self.providers[provider];
        slot.provider.retrieve_flow(
            call,
            &tokens,
            &self.admin.registry,
            &self.net,
            &self.net,
            &mut self.reports,
            &mut self.denials,
            &mut self.rng,
        )
    }

    /// Publish then immediately retrieve; `Ok(true)` means the retrieved
    /// plaintext matched bit for bit.
    pub fn run_call(
        &mut self,
        provider: &str,
        src: &str,
        dst: &str,
        msg: &[u8],
    ) -> Result<bool, ProviderError> {
        let call = CallDetails::at_epoch_ms(src, dst, self.now_ms);
        self.publish(provider, call.clone(), msg)?;
        let got = self.retrieve(provider, call)?;
        Ok(got.msg == msg)
    }

    pub fn receipt(&self, idx: &Digest) -> Option<&PublishReceipt> {
        self.receipts.get(idx)
    }

    /// Flush node outboxes and provider evidence into the audit log.
    ///
    /// Denial evidence becomes a complaint only when it pairs with a held
    /// acknowledgement and the signed not-found predates the retention
    /// deadline; a store that honestly expired a record is not worth
    /// accusing, since the arbiter would clear it on timestamps alone.
    pub fn sync(&mut self) {
        let mut evs = self.net.evs.borrow_mut();
        for node in evs.values_mut() {
            for e in node.rotation_outbox.drain(..) {
                self.als
                    .append(AlsSubmission::Rotation(e), &self.admin.registry, self.now_ms)
                    .expect("rotation entry signed by a registered node");
            }
            for f in node.feedback_outbox.drain(..) {
                self.als
                    .append(AlsSubmission::Cidgen(f), &self.admin.registry, self.now_ms)
                    .expect("feedback signed by a registered node");
            }
        }
        drop(evs);
        let mut mss = self.net.mss.borrow_mut();
        for node in mss.values_mut() {
            for f in node.store_outbox.drain(..) {
                self.als
                    .append(AlsSubmission::Publish(f), &self.admin.registry, self.now_ms)
                    .expect("store feedback signed by a registered node");
            }
            for f in node.retrieve_outbox.drain(..) {
                self.als
                    .append(AlsSubmission::Retrieve(f), &self.admin.registry, self.now_ms)
                    .expect("retrieve feedback signed by a registered node");
            }
        }
        drop(mss);

        for d in std::mem::take(&mut self.denials) {
            let Some(receipt) = self.receipts.get(&d.request.idx) else {
                continue;
            };
            let within_retention = receipt
                .acks
                .iter()
                .any(|(nid, ack)| *nid == d.nid && d.not_found.ts_ms < ack.ts_ms + self.cfg.t_max_ms);
            if !within_retention {
                continue;
            }
            if let Some(complaint) = receipt.denial_complaint(&d) {
                self.reports.push(complaint);
            }
        }
        for r in std::mem::take(&mut self.reports) {
            self.als
                .append(AlsSubmission::Complaint(r), &self.admin.registry, self.now_ms)
                .expect("complaint evidence verifies");
        }
    }

    /// Resolve every filed complaint against the current registry.
    pub fn resolve_all_disputes(&self) -> Vec<DisputeRow> {
        let chain = self.als.complaints();
        (0..chain.len() as u64)
            .map(|seq| DisputeRow {
                seq,
                accused: chain.get(seq).expect("seq in range").entry.accused(),
                verdict: self.als.resolve_dispute(seq, &self.admin.registry),
            })
            .collect()
    }

    /// Reconcile all spend records and unmask double-spenders.
    pub fn settle(&self) -> SettlementReport {
        self.admin.settle(&self.als.spend_records())
    }

    /// Force one evaluator to rotate until the named slot has just been
    /// refreshed, as an operator would after a suspected compromise.
    pub fn rotate_slot(&mut self, nid: &Digest, slot: u32) {
        let mut evs = self.net.evs.borrow_mut();
        let node = evs.get_mut(nid).expect("registered evaluator");
        let local = self.net.local_now(*nid);
        loop {
            let cur = node.schedule().cursor();
            node.force_rotate(local, &mut self.rng);
            if cur == slot as usize {
                break;
            }
        }
    }

    /// What an attacker who seized every evaluator's current key ring
    /// could compute for one input: each node's output under each slot.
    pub fn seized_outputs(&mut self, input: &[u8]) -> Vec<(Digest, u32, OprfOutput)> {
        let evs = self.net.evs.borrow();
        let mut out = Vec::new();
        for (nid, node) in evs.iter() {
            for slot in 0..node.schedule().slot_count() {
                let (bf, x) = voprf::blind(input, &mut self.rng);
                let y = voprf::evaluate(node.schedule().slot_secret(slot), &x);
                out.push((*nid, slot as u32, voprf::unblind(&bf, &y)));
            }
        }
        out
    }

    /// The key a public-log reader would attribute to `(nid, slot)` at
    /// time `t`: the latest announcement for that slot not after `t`.
    pub fn logged_key_at(&self, nid: &Digest, slot: u32, t_ms: u64) -> Option<OprfPublicKey> {
        self.als
            .rotation_log(nid)?
            .entries()
            .iter()
            .filter(|e| e.entry.slot == slot && e.entry.ts_ms <= t_ms)
            .next_back()
            .map(|e| e.entry.pk)
    }
}
