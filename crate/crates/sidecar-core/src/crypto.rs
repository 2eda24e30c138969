//! Pairing-group arithmetic, hashing, and authenticated encryption.
//!
//! Everything above this module works with four primitive kinds of values:
//!
//! - [`Digest`]: 32-byte SHA-256 outputs. All protocol identifiers (`cdt`,
//!   `csk`, `idx`, `hreq`, ...) are digests or concatenations of digests.
//! - [`Scalar`]: integers modulo the BLS12-381 scalar field order, used for
//!   blinding exponents and secret keys.
//! - [`G1Projective`] / [`G2Affine`]: points in the two pairing source
//!   groups. Hash-to-curve targets G1; verification keys live in G2 so the
//!   pairing checks `e(pk, H1(m)) = e(g, y)` are cheap on the G1 side.
//! - AEAD ciphertexts produced by [`aead_seal`] (XChaCha20-Poly1305 with the
//!   24-byte nonce prepended).
//!
//! Wire encodings are compressed points (48 bytes for G1, 96 for G2) and
//! 32-byte big-endian scalars. Deserialization rejects points that are off
//! the curve or outside the prime-order subgroup.

use blstrs::{Bls12, G1Affine, G1Projective, G2Affine, G2Prepared, G2Projective, Gt, Scalar};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::XChaCha20Poly1305;
use ff::Field;
use group::prime::PrimeCurveAffine;
use group::{Curve, Group};
use pairing::{MillerLoopResult, MultiMillerLoop};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Domain separation tag for hash-to-G1.
const DST_H1: &[u8] = b"SIDECAR:V1:H1:BLS12381G1_XMD:SHA-256_SSWU_RO";
/// Domain separation tag for hash-to-scalar.
const DST_HS: &[u8] = b"SIDECAR:V1:HS";

/// Byte length of an AEAD nonce (XChaCha20 extended nonce).
const NONCE_LEN: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    /// AEAD authentication failed: wrong key or tampered ciphertext. Record
    /// retrieval relies on this error to tell candidate call secrets apart.
    #[error("aead authentication failed (wrong key or tampered ciphertext)")]
    AeadAuth,
    #[error("ciphertext too short")]
    AeadTruncated,
    #[error("invalid point encoding")]
    InvalidPoint,
    #[error("invalid scalar encoding")]
    InvalidScalar,
    #[error("zero scalar where a nonzero scalar is required")]
    ZeroScalar,
}

/// 32-byte output of the system hash `H` (SHA-256).
///
/// Serializes as lowercase hex so digests are readable in logs and legal as
/// JSON object keys.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Digest::from_hex(&text).ok_or_else(|| serde::de::Error::custom("invalid digest hex"))
    }
}

impl Digest {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let v = hex::decode(s).ok()?;
        let arr: [u8; 32] = v.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({}…)", &self.to_hex()[..12])
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// `H(data)`: the system hash.
pub fn h_digest(data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(data);
    Digest(h.finalize().into())
}

/// `H(a ‖ b ‖ ...)` over a sequence of fields, hashed as one raw
/// concatenation. Callers are responsible for fixed-width or
/// self-delimiting fields.
pub fn h_concat(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// `H1(data)`: constant-time hash to the G1 group (RFC 9380 SSWU suite).
pub fn h_to_group(data: &[u8]) -> G1Projective {
    G1Projective::hash_to_curve(data, DST_H1, &[])
}

/// Hash arbitrary bytes to a scalar by rejection sampling over 255-bit
/// candidates. Deterministic, so both sides of a Fiat-Shamir exchange derive
/// the same challenge from the same bytes. Expected iterations ≈ 1.1.
pub fn hash_to_scalar(data: &[u8]) -> Scalar {
    for ctr in 0u8..=255 {
        let mut h = Sha256::new();
        h.update(DST_HS);
        h.update(data);
        h.update([ctr]);
        let mut bytes: [u8; 32] = h.finalize().into();
        bytes[0] &= 0x7f;
        let s = Scalar::from_bytes_be(&bytes);
        if s.is_some().into() {
            return s.unwrap();
        }
    }
    unreachable!("rejection sampling cannot fail 256 times on SHA-256 output")
}

/// A uniformly random nonzero scalar.
pub fn random_nonzero_scalar(rng: &mut (impl RngCore + CryptoRng)) -> Scalar {
    loop {
        let s = Scalar::random(&mut *rng);
        if !bool::from(s.is_zero()) {
            return s;
        }
    }
}

/// `p^e` in G1 (written multiplicatively in the protocol descriptions).
pub fn g1_exp(p: &G1Projective, e: &Scalar) -> G1Projective {
    p * e
}

/// Multiplicative inverse of a nonzero scalar.
pub fn scalar_inv(e: &Scalar) -> Result<Scalar, CryptoError> {
    let inv = e.invert();
    if bool::from(inv.is_some()) {
        Ok(inv.unwrap())
    } else {
        Err(CryptoError::ZeroScalar)
    }
}

/// The fixed G2 generator `g`.
pub fn g2_generator() -> G2Affine {
    G2Affine::generator()
}

/// The fixed G1 generator.
pub fn g1_generator() -> G1Affine {
    G1Affine::generator()
}

/// True iff `e(pk, h) = e(g, y)`.
///
/// Implemented as the product check `e(h, pk) · e(-y, g) = 1` with a fused
/// multi-Miller loop and a single final exponentiation, which is roughly the
/// cost of one pairing instead of two.
pub fn pairing_check(pk: &G2Affine, h: &G1Projective, g: &G2Affine, y: &G1Projective) -> bool {
    let pk_prep = G2Prepared::from(*pk);
    let g_prep = G2Prepared::from(*g);
    let h_aff = h.to_affine();
    let neg_y = (-y).to_affine();
    let r = Bls12::multi_miller_loop(&[(&h_aff, &pk_prep), (&neg_y, &g_prep)]);
    bool::from(r.final_exponentiation().is_identity())
}

/// Product-of-pairings check `∏ e(p_i, q_i) = 1` over prepared G2 points.
#[cfg(test)]
pub(crate) fn pairing_product_is_identity(terms: &[(&G1Affine, &G2Prepared)]) -> bool {
    let r = Bls12::multi_miller_loop(terms);
    bool::from(r.final_exponentiation().is_identity())
}

/// `∏ e(p_i, q_i)` evaluated with one shared final exponentiation.
pub(crate) fn pairing_product(terms: &[(&G1Affine, &G2Prepared)]) -> Gt {
    Bls12::multi_miller_loop(terms).final_exponentiation()
}

/// Canonical bytes of a Gt element for hashing. Uses torus compression
/// (288 bytes) with an explicit tag byte so the identity, which the
/// compression formula cannot represent, stays unambiguous.
pub(crate) fn gt_hash_bytes(e: &Gt) -> Vec<u8> {
    use blstrs::Compress;
    if bool::from(e.is_identity()) {
        let mut out = vec![0u8; 289];
        out[0] = 0x00;
        return out;
    }
    let mut out = Vec::with_capacity(289);
    out.push(0x01);
    e.write_compressed(&mut out)
        .expect("writing to a Vec cannot fail");
    out
}

// ---------------------------------------------------------------------------
// Point and scalar encodings
// ---------------------------------------------------------------------------

pub fn g1_to_bytes(p: &G1Projective) -> [u8; 48] {
    p.to_affine().to_compressed()
}

pub fn g1_affine_to_bytes(p: &G1Affine) -> [u8; 48] {
    p.to_compressed()
}

pub fn g1_from_bytes(bytes: &[u8]) -> Result<G1Projective, CryptoError> {
    let arr: [u8; 48] = bytes.try_into().map_err(|_| CryptoError::InvalidPoint)?;
    let p = G1Affine::from_compressed(&arr);
    if bool::from(p.is_some()) {
        Ok(p.unwrap().into())
    } else {
        Err(CryptoError::InvalidPoint)
    }
}

pub fn g2_to_bytes(p: &G2Affine) -> [u8; 96] {
    p.to_compressed()
}

pub fn g2_from_bytes(bytes: &[u8]) -> Result<G2Affine, CryptoError> {
    let arr: [u8; 96] = bytes.try_into().map_err(|_| CryptoError::InvalidPoint)?;
    let p = G2Affine::from_compressed(&arr);
    if bool::from(p.is_some()) {
        Ok(p.unwrap())
    } else {
        Err(CryptoError::InvalidPoint)
    }
}

pub fn scalar_to_bytes(s: &Scalar) -> [u8; 32] {
    s.to_bytes_be()
}

pub fn scalar_from_bytes(bytes: &[u8]) -> Result<Scalar, CryptoError> {
    let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::InvalidScalar)?;
    let s = Scalar::from_bytes_be(&arr);
    if bool::from(s.is_some()) {
        Ok(s.unwrap())
    } else {
        Err(CryptoError::InvalidScalar)
    }
}

/// `g2^sk`, the verification key for an OPRF secret key.
pub fn g2_mul_generator(sk: &Scalar) -> G2Affine {
    (G2Projective::generator() * sk).to_affine()
}

// ---------------------------------------------------------------------------
// AEAD
// ---------------------------------------------------------------------------

/// 32-byte symmetric key, normally `H(c0 ‖ csk)`.
#[derive(Clone)]
pub struct AeadKey(pub [u8; 32]);

impl From<Digest> for AeadKey {
    fn from(d: Digest) -> Self {
        AeadKey(d.0)
    }
}

/// Encrypt `msg`, prepending a fresh random 24-byte nonce.
pub fn aead_seal(key: &AeadKey, msg: &[u8], rng: &mut (impl RngCore + CryptoRng)) -> Vec<u8> {
    let cipher = XChaCha20Poly1305::new((&key.0).into());
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let body = cipher
        .encrypt((&nonce).into(), Payload::from(msg))
        .expect("encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(NONCE_LEN + body.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    out
}

/// Decrypt a ciphertext produced by [`aead_seal`]. Fails with
/// [`CryptoError::AeadAuth`] on any key or ciphertext mismatch.
pub fn aead_open(key: &AeadKey, ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ct.len() < NONCE_LEN + 16 {
        return Err(CryptoError::AeadTruncated);
    }
    let (nonce, body) = ct.split_at(NONCE_LEN);
    let cipher = XChaCha20Poly1305::new((&key.0).into());
    cipher
        .decrypt(nonce.into(), Payload::from(body))
        .map_err(|_| CryptoError::AeadAuth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(0x51dec0de)
    }

    #[test]
    fn h_digest_is_deterministic() {
        let a = h_digest(b"hello");
        let b = h_digest(b"hello");
        assert_eq!(a, b);
    }

    #[test]
    fn h_digest_empty_matches_sha256_test_vector() {
        // Published SHA-256 vector for the empty string.
        let expected = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
        assert_eq!(h_digest(b"").to_hex(), expected);
    }

    #[test]
    fn h_digest_abc_matches_sha256_test_vector() {
        // Published SHA-256 vector for "abc".
        let expected = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        assert_eq!(h_digest(b"abc").to_hex(), expected);
    }

    #[test]
    fn h_digest_no_collisions_over_random_pairs() {
        let mut r = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100_000 {
            let mut buf = [0u8; 16];
            r.fill_bytes(&mut buf);
            seen.insert(h_digest(&buf));
        }
        // Duplicate inputs are possible but vanishingly unlikely over 16-byte
        // random strings; any digest collision would shrink the set.
        assert_eq!(seen.len(), 100_000);
    }

    #[test]
    fn h_concat_equals_manual_concatenation() {
        let joined = h_digest(b"abcdef");
        let parts = h_concat(&[b"ab", b"cd", b"ef"]);
        assert_eq!(joined, parts);
    }

    #[test]
    fn h_to_group_outputs_are_on_curve_and_distinct() {
        let mut r = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let mut buf = [0u8; 24];
            r.fill_bytes(&mut buf);
            let p = h_to_group(&buf);
            // from_compressed on the roundtrip enforces curve and subgroup
            // membership; identity would signal a broken suite.
            assert!(!bool::from(p.is_identity()));
            let enc = g1_to_bytes(&p);
            assert!(g1_from_bytes(&enc).is_ok());
            seen.insert(enc);
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn h_to_group_identity_exponent() {
        let p = h_to_group(b"fixed input");
        assert_eq!(g1_exp(&p, &Scalar::from(1u64)), p);
    }

    #[test]
    fn g1_exp_matches_double_and_add_oracle() {
        // Independent small-exponent oracle: repeated group addition.
        let p = h_to_group(b"oracle point");
        let mut acc = G1Projective::identity();
        for k in 0u64..16 {
            assert_eq!(g1_exp(&p, &Scalar::from(k)), acc, "exponent {k}");
            acc += p;
        }
    }

    #[test]
    fn g1_exp_inverse_law() {
        let mut r = rng();
        for _ in 0..32 {
            let p = h_to_group(&r.next_u64().to_be_bytes());
            let e = random_nonzero_scalar(&mut r);
            let inv = scalar_inv(&e).unwrap();
            assert_eq!(g1_exp(&g1_exp(&p, &e), &inv), p);
        }
    }

    #[test]
    fn scalar_inv_rejects_zero() {
        assert!(matches!(
            scalar_inv(&Scalar::from(0u64)),
            Err(CryptoError::ZeroScalar)
        ));
    }

    #[test]
    fn pairing_check_bilinearity() {
        let mut r = rng();
        let g = g2_generator();
        for _ in 0..1_000 {
            let a = random_nonzero_scalar(&mut r);
            let h = h_to_group(&r.next_u64().to_be_bytes());
            let pk = g2_mul_generator(&a);
            let y = g1_exp(&h, &a);
            assert!(pairing_check(&pk, &h, &g, &y));
        }
    }

    #[test]
    fn pairing_check_rejects_mismatched_exponents() {
        let mut r = rng();
        let g = g2_generator();
        for _ in 0..64 {
            let a = random_nonzero_scalar(&mut r);
            let b = random_nonzero_scalar(&mut r);
            if a == b {
                continue;
            }
            let h = h_to_group(&r.next_u64().to_be_bytes());
            let pk = g2_mul_generator(&a);
            let y = g1_exp(&h, &b);
            assert!(!pairing_check(&pk, &h, &g, &y));
        }
    }

    #[test]
    fn pairing_check_identity_exponent() {
        let g = g2_generator();
        let h = h_to_group(b"identity exponent case");
        assert!(pairing_check(&g, &h, &g, &h));
    }

    #[test]
    fn hash_to_scalar_deterministic_and_distinct() {
        let a = hash_to_scalar(b"one");
        let b = hash_to_scalar(b"one");
        let c = hash_to_scalar(b"two");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn point_and_scalar_encodings_roundtrip() {
        let mut r = rng();
        for _ in 0..128 {
            let s = Scalar::random(&mut r);
            assert_eq!(scalar_from_bytes(&scalar_to_bytes(&s)).unwrap(), s);
            let p = h_to_group(&r.next_u64().to_be_bytes());
            assert_eq!(g1_from_bytes(&g1_to_bytes(&p)).unwrap(), p);
            let q = g2_mul_generator(&s);
            assert_eq!(g2_from_bytes(&g2_to_bytes(&q)).unwrap(), q);
        }
    }

    #[test]
    fn invalid_point_encodings_rejected() {
        let mut bad = [0xffu8; 48];
        assert!(g1_from_bytes(&bad).is_err());
        bad[0] = 0x8a;
        assert!(g1_from_bytes(&bad).is_err());
        assert!(g1_from_bytes(&[0u8; 47]).is_err());
        assert!(g2_from_bytes(&[0xffu8; 96]).is_err());
        // A scalar encoding at or above the group order is invalid.
        assert!(scalar_from_bytes(&[0xffu8; 32]).is_err());
    }

    #[test]
    fn aead_roundtrip_various_lengths() {
        let mut r = rng();
        let key = AeadKey(h_digest(b"key material").0);
        for len in [0usize, 1, 31, 32, 33, 1000, 4096] {
            let mut msg = vec![0u8; len];
            r.fill_bytes(&mut msg);
            let ct = aead_seal(&key, &msg, &mut r);
            assert_eq!(aead_open(&key, &ct).unwrap(), msg, "len {len}");
        }
    }

    #[test]
    fn aead_rejects_every_single_bit_key_flip() {
        let mut r = rng();
        let key = AeadKey(h_digest(b"the right key").0);
        let ct = aead_seal(&key, b"payload", &mut r);
        let mut trials = 0;
        for byte in 0..32 {
            for bit in 0..8 {
                let mut k2 = key.0;
                k2[byte] ^= 1 << bit;
                assert!(matches!(
                    aead_open(&AeadKey(k2), &ct),
                    Err(CryptoError::AeadAuth)
                ));
                trials += 1;
            }
        }
        assert_eq!(trials, 256);
        // Top up to >= 10^3 trials with random wrong keys.
        for _ in 0..800 {
            let mut k2 = [0u8; 32];
            r.fill_bytes(&mut k2);
            if k2 == key.0 {
                continue;
            }
            assert!(aead_open(&AeadKey(k2), &ct).is_err());
        }
    }

    #[test]
    fn aead_rejects_every_flipped_ciphertext_byte() {
        let mut r = rng();
        let key = AeadKey(h_digest(b"k").0);
        let ct = aead_seal(&key, b"short test payload", &mut r);
        for i in 0..ct.len() {
            let mut c2 = ct.clone();
            c2[i] ^= 0x01;
            assert!(aead_open(&key, &c2).is_err(), "byte {i} accepted");
        }
    }

    #[test]
    fn aead_truncated_ciphertext_rejected() {
        let mut r = rng();
        let key = AeadKey([7u8; 32]);
        let ct = aead_seal(&key, b"x", &mut r);
        assert!(matches!(
            aead_open(&key, &ct[..NONCE_LEN + 10]),
            Err(CryptoError::AeadTruncated)
        ));
    }

    #[test]
    fn aead_nonces_are_fresh_per_seal() {
        let mut r = rng();
        let key = AeadKey([1u8; 32]);
        let a = aead_seal(&key, b"m", &mut r);
        let b = aead_seal(&key, b"m", &mut r);
        assert_ne!(a[..NONCE_LEN], b[..NONCE_LEN]);
    }

    #[test]
    fn gt_hash_bytes_distinguishes_elements() {
        use group::Group;
        let mut r = rng();
        let gt = blstrs::Gt::random(&mut r);
        let id = blstrs::Gt::identity();
        assert_ne!(gt_hash_bytes(&gt), gt_hash_bytes(&id));
        assert_eq!(gt_hash_bytes(&gt), gt_hash_bytes(&gt));
        assert_eq!(gt_hash_bytes(&id)[0], 0x00);
    }
}
