//! Short group signatures with opening (BBS-style, over BLS12-381).
//!
//! Every enrolled provider signs its requests under one shared group public
//! key, so nodes can check "this request came from *some* enrolled provider"
//! without learning which one. The registrar holds an opening key that maps
//! any valid signature back to the member who produced it; the billing
//! module invokes that only when a token double-spend proves misbehavior.
//!
//! A member key is a pair `(A, x)` with `A = g1^(1/(γ+x))` for the
//! registrar's secret `γ`. A signature is a linear encryption of `A` under
//! the opening key plus a Fiat-Shamir proof of knowledge of `(A, x)`.
//! Signatures are 336 bytes: three G1 points and six scalars.
//!
//! All pairing work in sign and verify is fused into one two-term Miller
//! loop with a single final exponentiation, and exponents are always folded
//! into the G1 arguments first; target-group exponentiations are roughly
//! seven times the cost of a G1 multiplication and never necessary.

use std::collections::BTreeMap;
use std::sync::Arc;

use blstrs::{G1Projective, G2Affine, G2Prepared, G2Projective, Scalar};
use ff::Field;
use group::prime::PrimeCurveAffine;
use group::{Curve, Group};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{
    self, g1_generator, gt_hash_bytes, hash_to_scalar, pairing_product, random_nonzero_scalar,
    CryptoError,
};

/// Encoded signature length: 3 G1 points (48 each) + 6 scalars (32 each).
pub const SIGNATURE_LEN: usize = 336;

const FS_DOMAIN: &[u8] = b"SIDECAR:V1:GSIG";

/// Group public key shared by all verifiers.
///
/// `h`, `u`, `v` are the commitment bases (`u^ξ1 = v^ξ2 = h` for the opening
/// secrets `ξ1, ξ2`), `w = g2^γ` is the issuing public value. Prepared forms
/// of the two G2 points are cached because every sign and verify pairs
/// against both.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "GpkWire", into = "GpkWire")]
pub struct GroupPublicKey {
    h: G1Projective,
    u: G1Projective,
    v: G1Projective,
    w: G2Affine,
    g2_prep: Arc<G2Prepared>,
    w_prep: Arc<G2Prepared>,
}

#[derive(Serialize, Deserialize, Clone)]
struct GpkWire {
    h: String,
    u: String,
    v: String,
    w: String,
}

impl From<GroupPublicKey> for GpkWire {
    fn from(k: GroupPublicKey) -> Self {
        GpkWire {
            h: hex::encode(crypto::g1_to_bytes(&k.h)),
            u: hex::encode(crypto::g1_to_bytes(&k.u)),
            v: hex::encode(crypto::g1_to_bytes(&k.v)),
            w: hex::encode(crypto::g2_to_bytes(&k.w)),
        }
    }
}

impl TryFrom<GpkWire> for GroupPublicKey {
    type Error = CryptoError;

    fn try_from(w: GpkWire) -> Result<Self, CryptoError> {
        let decode1 = |s: &str| -> Result<G1Projective, CryptoError> {
            crypto::g1_from_bytes(&hex::decode(s).map_err(|_| CryptoError::InvalidPoint)?)
        };
        let w_point = crypto::g2_from_bytes(
            &hex::decode(&w.w).map_err(|_| CryptoError::InvalidPoint)?,
        )?;
        Ok(GroupPublicKey::assemble(
            decode1(&w.h)?,
            decode1(&w.u)?,
            decode1(&w.v)?,
            w_point,
        ))
    }
}

impl GroupPublicKey {
    fn assemble(h: G1Projective, u: G1Projective, v: G1Projective, w: G2Affine) -> Self {
        GroupPublicKey {
            h,
            u,
            v,
            w,
            g2_prep: Arc::new(G2Prepared::from(G2Affine::generator())),
            w_prep: Arc::new(G2Prepared::from(w)),
        }
    }
}

impl std::fmt::Debug for GroupPublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroupPublicKey")
            .field("w", &hex::encode(&crypto::g2_to_bytes(&self.w)[..8]))
            .finish_non_exhaustive()
    }
}

/// Registrar secret: issuing exponent, opening exponents, and the roster
/// mapping each issued `A` to the member it was issued to.
#[derive(Clone, Serialize, Deserialize)]
pub struct GroupManagerKey {
    #[serde(with = "scalar_serde")]
    gamma: Scalar,
    #[serde(with = "scalar_serde")]
    xi1: Scalar,
    #[serde(with = "scalar_serde")]
    xi2: Scalar,
    /// hex(compressed A) -> member id.
    roster: BTreeMap<String, String>,
}

pub(crate) mod scalar_serde {
    use blstrs::Scalar;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Scalar, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(crate::crypto::scalar_to_bytes(v)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Scalar, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        crate::crypto::scalar_from_bytes(&bytes)
            .map_err(|_| serde::de::Error::custom("invalid scalar"))
    }
}

/// A member's signing key: the credential point and its exponent.
#[derive(Clone, Serialize, Deserialize)]
pub struct GroupSigningKey {
    #[serde(with = "crate::voprf::g1_serde")]
    a: G1Projective,
    #[serde(with = "scalar_serde")]
    x: Scalar,
}

/// A 336-byte group signature.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupSignature {
    t1: G1Projective,
    t2: G1Projective,
    t3: G1Projective,
    c: Scalar,
    s_alpha: Scalar,
    s_beta: Scalar,
    s_x: Scalar,
    s_delta1: Scalar,
    s_delta2: Scalar,
}

impl std::fmt::Debug for GroupSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GroupSignature({}…)", hex::encode(&self.to_bytes()[..6]))
    }
}

impl Serialize for GroupSignature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(self.to_bytes()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupSignature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        GroupSignature::from_bytes(&bytes)
            .map_err(|_| serde::de::Error::custom("invalid group signature"))
    }
}

impl GroupSignature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        let mut out = [0u8; SIGNATURE_LEN];
        out[0..48].copy_from_slice(&crypto::g1_to_bytes(&self.t1));
        out[48..96].copy_from_slice(&crypto::g1_to_bytes(&self.t2));
        out[96..144].copy_from_slice(&crypto::g1_to_bytes(&self.t3));
        let scalars = [
            &self.c,
            &self.s_alpha,
            &self.s_beta,
            &self.s_x,
            &self.s_delta1,
            &self.s_delta2,
        ];
        for (i, s) in scalars.iter().enumerate() {
            out[144 + 32 * i..176 + 32 * i].copy_from_slice(&crypto::scalar_to_bytes(s));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != SIGNATURE_LEN {
            return Err(CryptoError::InvalidPoint);
        }
        let mut scalars = [Scalar::ZERO; 6];
        for (i, s) in scalars.iter_mut().enumerate() {
            *s = crypto::scalar_from_bytes(&bytes[144 + 32 * i..176 + 32 * i])?;
        }
        Ok(GroupSignature {
            t1: crypto::g1_from_bytes(&bytes[0..48])?,
            t2: crypto::g1_from_bytes(&bytes[48..96])?,
            t3: crypto::g1_from_bytes(&bytes[96..144])?,
            c: scalars[0],
            s_alpha: scalars[1],
            s_beta: scalars[2],
            s_x: scalars[3],
            s_delta1: scalars[4],
            s_delta2: scalars[5],
        })
    }
}

/// Generate a fresh group: public key plus registrar secret.
pub fn gsetup(rng: &mut (impl RngCore + CryptoRng)) -> (GroupPublicKey, GroupManagerKey) {
    let gamma = random_nonzero_scalar(rng);
    let xi1 = random_nonzero_scalar(rng);
    let xi2 = random_nonzero_scalar(rng);
    let h = G1Projective::random(&mut *rng);
    let u = h * crypto::scalar_inv(&xi1).expect("nonzero");
    let v = h * crypto::scalar_inv(&xi2).expect("nonzero");
    let w = (G2Projective::generator() * gamma).to_affine();
    (
        GroupPublicKey::assemble(h, u, v, w),
        GroupManagerKey {
            gamma,
            xi1,
            xi2,
            roster: BTreeMap::new(),
        },
    )
}

/// Issue a member key for `member_id` and record it in the roster.
pub fn join(
    mgr: &mut GroupManagerKey,
    member_id: &str,
    rng: &mut (impl RngCore + CryptoRng),
) -> GroupSigningKey {
    loop {
        let x = random_nonzero_scalar(rng);
        let denom = mgr.gamma + x;
        if bool::from(denom.is_zero()) {
            continue;
        }
        let a = G1Projective::generator() * crypto::scalar_inv(&denom).expect("nonzero");
        let key = hex::encode(crypto::g1_to_bytes(&a));
        if mgr.roster.contains_key(&key) {
            continue;
        }
        mgr.roster.insert(key, member_id.to_string());
        return GroupSigningKey { a, x };
    }
}

impl GroupManagerKey {
    pub fn member_count(&self) -> usize {
        self.roster.len()
    }

    pub fn members(&self) -> impl Iterator<Item = &str> {
        self.roster.values().map(String::as_str)
    }
}

fn fiat_shamir_challenge(
    msg: &[u8],
    t1: &G1Projective,
    t2: &G1Projective,
    t3: &G1Projective,
    r1: &G1Projective,
    r2: &G1Projective,
    r3: &blstrs::Gt,
    r4: &G1Projective,
    r5: &G1Projective,
) -> Scalar {
    let mut buf = Vec::with_capacity(FS_DOMAIN.len() + msg.len() + 5 * 48 + 289 + 48 + 8);
    buf.extend_from_slice(FS_DOMAIN);
    buf.extend_from_slice(&(msg.len() as u64).to_be_bytes());
    buf.extend_from_slice(msg);
    for p in [t1, t2, t3, r1, r2] {
        buf.extend_from_slice(&crypto::g1_to_bytes(p));
    }
    buf.extend_from_slice(&gt_hash_bytes(r3));
    for p in [r4, r5] {
        buf.extend_from_slice(&crypto::g1_to_bytes(p));
    }
    hash_to_scalar(&buf)
}

/// Sign `msg` anonymously under the group key.
pub fn gsign(
    gpk: &GroupPublicKey,
    gsk: &GroupSigningKey,
    msg: &[u8],
    rng: &mut (impl RngCore + CryptoRng),
) -> GroupSignature {
    let alpha = random_nonzero_scalar(rng);
    let beta = random_nonzero_scalar(rng);
    let t1 = gpk.u * alpha;
    let t2 = gpk.v * beta;
    let t3 = gsk.a + gpk.h * (alpha + beta);
    let delta1 = gsk.x * alpha;
    let delta2 = gsk.x * beta;

    let r_alpha = Scalar::random(&mut *rng);
    let r_beta = Scalar::random(&mut *rng);
    let r_x = Scalar::random(&mut *rng);
    let r_delta1 = Scalar::random(&mut *rng);
    let r_delta2 = Scalar::random(&mut *rng);

    let r1 = gpk.u * r_alpha;
    let r2 = gpk.v * r_beta;
    let r4 = t1 * r_x - gpk.u * r_delta1;
    let r5 = t2 * r_x - gpk.v * r_delta2;
    let slot_g2 = (t3 * r_x - gpk.h * (r_delta1 + r_delta2)).to_affine();
    let slot_w = (-(gpk.h * (r_alpha + r_beta))).to_affine();
    let r3 = pairing_product(&[(&slot_g2, &gpk.g2_prep), (&slot_w, &gpk.w_prep)]);

    let c = fiat_shamir_challenge(msg, &t1, &t2, &t3, &r1, &r2, &r3, &r4, &r5);
    GroupSignature {
        t1,
        t2,
        t3,
        c,
        s_alpha: r_alpha + c * alpha,
        s_beta: r_beta + c * beta,
        s_x: r_x + c * gsk.x,
        s_delta1: r_delta1 + c * delta1,
        s_delta2: r_delta2 + c * delta2,
    }
}

/// Verify a group signature on `msg`.
pub fn gverify(gpk: &GroupPublicKey, msg: &[u8], sig: &GroupSignature) -> bool {
    let c = sig.c;
    let r1 = gpk.u * sig.s_alpha - sig.t1 * c;
    let r2 = gpk.v * sig.s_beta - sig.t2 * c;
    let r4 = sig.t1 * sig.s_x - gpk.u * sig.s_delta1;
    let r5 = sig.t2 * sig.s_x - gpk.v * sig.s_delta2;
    let slot_g2 = (sig.t3 * sig.s_x - gpk.h * (sig.s_delta1 + sig.s_delta2)
        - G1Projective::from(g1_generator()) * c)
        .to_affine();
    let slot_w = (sig.t3 * c - gpk.h * (sig.s_alpha + sig.s_beta)).to_affine();
    let r3 = pairing_product(&[(&slot_g2, &gpk.g2_prep), (&slot_w, &gpk.w_prep)]);
    fiat_shamir_challenge(msg, &sig.t1, &sig.t2, &sig.t3, &r1, &r2, &r3, &r4, &r5) == c
}

/// Recover which member produced a signature. Verifies first; an invalid
/// signature opens to nobody.
pub fn open(
    gpk: &GroupPublicKey,
    mgr: &GroupManagerKey,
    msg: &[u8],
    sig: &GroupSignature,
) -> Option<String> {
    if !gverify(gpk, msg, sig) {
        return None;
    }
    let a = sig.t3 - (sig.t1 * mgr.xi1 + sig.t2 * mgr.xi2);
    mgr.roster
        .get(&hex::encode(crypto::g1_to_bytes(&a)))
        .cloned()
}
