//! End-to-end call latency from calibrated primitive costs.
//!
//! A live measurement of thousands of full calls would take minutes and
//! vary with scheduler noise. Instead, every primitive on the critical
//! path is timed a handful of times against the real cryptography
//! ([`CostModel::calibrate`]), and whole calls are then composed from
//! those samples: client-side work adds up serially, while fan-out to
//! nodes costs the maximum of the parallel legs. Per-call costs are drawn
//! from the sample sets with a seeded generator, so a profile is exactly
//! reproducible for a given model and seed while still reflecting this
//! machine's speed.

use crate::billing::{init_cycle, mint_tokens};
use crate::crypto::{aead_open, aead_seal, h_digest, AeadKey};
use crate::evaluator::{csg_request_digest, EvNode, EvalRequest};
use crate::groupsig::{gsetup, gsign, join};
use crate::msgstore::{
    retrieve_request_message, store_request_message, MsNode, RetrieveReply, RetrieveRequest,
    StoreRequest,
};
use crate::voprf::{blind, combine_outputs, unblind, verify_output};
use ed25519_dalek::SigningKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Timed samples for each primitive on a call's critical path, seconds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostModel {
    /// Blinding the call descriptor.
    pub blind: Vec<f64>,
    /// One anonymous-credential signature over a request digest.
    pub sign: Vec<f64>,
    /// An evaluator handling one secret-generation request end to end.
    pub ev_serve: Vec<f64>,
    /// Unblinding one returned value.
    pub unblind: Vec<f64>,
    /// Pairing-checking one unblinded value against the announced key.
    pub verify_output: Vec<f64>,
    /// Folding the per-evaluator values into one secret.
    pub combine: Vec<f64>,
    /// Encrypting the record payload.
    pub seal: Vec<f64>,
    /// A store handling one upload end to end.
    pub store_serve: Vec<f64>,
    /// Verifying one store acknowledgement signature.
    pub ack_verify: Vec<f64>,
    /// A store handling one lookup end to end.
    pub retrieve_serve: Vec<f64>,
    /// Verifying a served record: transport signature plus the uploader's
    /// anonymous credential.
    pub hit_verify: Vec<f64>,
    /// Decrypting the record payload.
    pub open: Vec<f64>,
}

/// Latency summary for one `(n, m)` grid cell, milliseconds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatencyCell {
    pub n: usize,
    pub m: usize,
    pub calls: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p90_ms: f64,
}

fn timed<R>(samples: &mut Vec<f64>, f: impl FnOnce() -> R) -> R {
    let start = Instant::now();
    let out = f();
    samples.push(start.elapsed().as_secs_f64());
    out
}

impl CostModel {
    /// Time every primitive `reps` times against real keys and real node
    /// code. One evaluator and one store suffice: fan-out is composed
    /// later, and node work does not depend on who else was asked.
    pub fn calibrate(reps: usize, seed: u64) -> CostModel {
        let reps = reps.max(1);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (gpk, mut mgr) = gsetup(&mut rng);
        let gsk = join(&mut mgr, "calibration", &mut rng);
        let cycle = init_cycle(None, &mut rng);
        let prov_isk = SigningKey::generate(&mut rng);
        let tokens = mint_tokens(
            "calibration",
            &prov_isk,
            &prov_isk.verifying_key(),
            2 * reps,
            &cycle,
            &mut rng,
        )
        .expect("mint against own cycle keys");

        let ev_isk = SigningKey::generate(&mut rng);
        let ev_nid = h_digest(b"calibration-ev");
        let mut ev = EvNode::new(
            ev_nid,
            ev_isk,
            4,
            u64::MAX / 4,
            5_000,
            0,
            gpk.clone(),
            cycle.vk,
            &mut rng,
        );
        let ms_isk = SigningKey::generate(&mut rng);
        let ms_nid = h_digest(b"calibration-ms");
        let mut ms = MsNode::new(ms_nid, ms_isk, u64::MAX / 4, gpk.clone(), cycle.vk);
        let ev_ipk = ev.ipk;
        let ms_ipk = ms.ipk;

        let mut model = CostModel {
            blind: Vec::new(),
            sign: Vec::new(),
            ev_serve: Vec::new(),
            unblind: Vec::new(),
            verify_output: Vec::new(),
            combine: Vec::new(),
            seal: Vec::new(),
            store_serve: Vec::new(),
            ack_verify: Vec::new(),
            retrieve_serve: Vec::new(),
            hit_verify: Vec::new(),
            open: Vec::new(),
        };

        for rep in 0..reps {
            let t_pub = &tokens[2 * rep];
            let t_ret = &tokens[2 * rep + 1];
            let descriptor = h_digest(format!("calibration-call-{rep}").as_bytes());

            let (bf, x) = timed(&mut model.blind, || blind(descriptor.as_bytes(), &mut rng));
            let s_ev = vec![ev_nid];
            let hreq = csg_request_digest(&x, 1, &t_pub.t0, &t_pub.t1, &s_ev);
            let sigma = timed(&mut model.sign, || {
                gsign(&gpk, &gsk, hreq.as_bytes(), &mut rng)
            });
            let req = EvalRequest {
                x,
                i_k: 1,
                t0: t_pub.t0,
                t1: t_pub.t1,
                s_ev,
                sigma,
            };
            let resp = timed(&mut model.ev_serve, || ev.evaluate(&req, 1_000))
                .expect("calibration evaluator accepts its own request");
            let pair = &resp.pairs[0];
            let value = timed(&mut model.unblind, || unblind(&bf, &pair.y));
            let ok = timed(&mut model.verify_output, || {
                verify_output(&pair.pk, descriptor.as_bytes(), &value)
            });
            assert!(ok, "calibration value verifies by construction");
            let combined = timed(&mut model.combine, || {
                combine_outputs([&value, &value])
            });

            let csk = h_digest(&combined.to_bytes());
            let idx = h_digest(csk.as_bytes());
            let key = AeadKey(h_digest(csk.as_bytes()).0);
            let payload = vec![0x5au8; 256];
            let c1 = timed(&mut model.seal, || aead_seal(&key, &payload, &mut rng));
            let mut c0 = [0u8; 32];
            rng.fill(&mut c0);
            let s_ms = vec![ms_nid];
            let signed_store =
                store_request_message(&idx, &c0, &c1, &t_pub.t0, &t_pub.t1, &s_ms);
            let store_req = StoreRequest {
                idx,
                c0,
                c1,
                t0: t_pub.t0,
                t1: t_pub.t1,
                s_ms: s_ms.clone(),
                sigma: gsign(&gpk, &gsk, &signed_store, &mut rng),
            };
            let ack = timed(&mut model.store_serve, || ms.store(&store_req, 1_000))
                .expect("calibration store accepts its own upload");
            let ack_ok = timed(&mut model.ack_verify, || ack.verify(&ms_ipk, &signed_store));
            assert!(ack_ok, "calibration acknowledgement verifies");
            assert!(resp.verify(&ev_ipk, &hreq));

            let signed_ret = retrieve_request_message(&idx, &t_ret.t0, &t_ret.t1, &s_ms);
            let ret_req = RetrieveRequest {
                idx,
                t0: t_ret.t0,
                t1: t_ret.t1,
                s_ms,
                sigma: gsign(&gpk, &gsk, &signed_ret, &mut rng),
            };
            let reply = timed(&mut model.retrieve_serve, || ms.retrieve(&ret_req, 1_500))
                .expect("calibration store serves its own record");
            let RetrieveReply::Hit(hit) = reply else {
                panic!("calibration record is present by construction");
            };
            let hit_ok = timed(&mut model.hit_verify, || {
                hit.verify_transport(&ms_ipk, &signed_ret) && hit.verify_upload(&gpk)
            });
            assert!(hit_ok, "calibration hit verifies");
            let opened = timed(&mut model.open, || aead_open(&key, &hit.c1))
                .expect("calibration record decrypts");
            assert_eq!(opened, payload);
        }
        model
    }

    /// Fixed single-sample costs for unit tests: calls compose to exact,
    /// machine-independent values.
    pub fn fixed_synthetic() -> CostModel {
        CostModel {
            blind: vec![70e-6],
            sign: vec![1.1e-3],
            ev_serve: vec![4.5e-3],
            unblind: vec![105e-6],
            verify_output: vec![1.6e-3],
            combine: vec![2e-6],
            seal: vec![3e-6],
            store_serve: vec![4.2e-3],
            ack_verify: vec![42e-6],
            retrieve_serve: vec![4.0e-3],
            hit_verify: vec![2.3e-3],
            open: vec![2e-6],
        }
    }

    fn draw(samples: &[f64], rng: &mut impl Rng) -> f64 {
        samples[rng.gen_range(0..samples.len())]
    }

    /// One full call, publish leg plus retrieve leg, in seconds. Node
    /// fan-out runs in parallel (cost of the slowest leg); everything the
    /// client does is serial.
    pub fn simulate_call(&self, n: usize, m: usize, rng: &mut impl Rng) -> f64 {
        let mut t = 0.0;
        for _ in 0..2 {
            t += Self::draw(&self.blind, rng) + Self::draw(&self.sign, rng);
            let slowest_ev = (0..n)
                .map(|_| Self::draw(&self.ev_serve, rng))
                .fold(0.0, f64::max);
            t += slowest_ev;
            for _ in 0..n {
                t += Self::draw(&self.unblind, rng) + Self::draw(&self.verify_output, rng);
            }
            t += Self::draw(&self.combine, rng) + Self::draw(&self.sign, rng);
        }
        let slowest_store = (0..m)
            .map(|_| Self::draw(&self.store_serve, rng))
            .fold(0.0, f64::max);
        t += Self::draw(&self.seal, rng) + slowest_store;
        for _ in 0..m {
            t += Self::draw(&self.ack_verify, rng);
        }
        t += Self::draw(&self.retrieve_serve, rng)
            + Self::draw(&self.hit_verify, rng)
            + Self::draw(&self.open, rng);
        t
    }
}

/// Profile the `(n, m)` grid: `calls` simulated calls per cell.
pub fn latency_profile(
    model: &CostModel,
    n_values: &[usize],
    m_values: &[usize],
    calls: usize,
    seed: u64,
) -> Vec<LatencyCell> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(n_values.len() * m_values.len());
    for &n in n_values {
        for &m in m_values {
            let mut samples: Vec<f64> = (0..calls)
                .map(|_| model.simulate_call(n, m, &mut rng))
                .collect();
            samples.sort_by(f64::total_cmp);
            let median_ms = 1e3 * samples[samples.len() / 2];
            let p90_ms = 1e3 * samples[(samples.len() * 9 / 10).min(samples.len() - 1)];
            let mean_ms = 1e3 * samples.iter().sum::<f64>() / samples.len() as f64;
            cells.push(LatencyCell {
                n,
                m,
                calls,
                median_ms,
                mean_ms,
                p90_ms,
            });
        }
    }
    cells
}
