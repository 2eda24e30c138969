//! Verifiable oblivious pseudorandom function (2HashDH over BLS12-381).
//!
//! A provider blinds a call descriptor, an evaluator raises the blinded
//! point to its secret key, and the provider unblinds the result. The
//! evaluator never sees the descriptor; the provider never sees the key.
//! Because the evaluator publishes `pk = g^sk` in G2, the provider can check
//! the pairing relation `e(pk, H1(input)) = e(g, v)` and detect a wrong or
//! stale key before using the output.
//!
//! Outputs are G1 points. Protocol layers hash them (or products of them)
//! down to digests; this module stays at the group level.

use blstrs::{G1Projective, G2Affine, Scalar};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{
    self, g1_exp, g2_generator, h_to_group, pairing_check, random_nonzero_scalar, scalar_inv,
    CryptoError,
};

/// Evaluator-side OPRF secret key.
#[derive(Clone)]
pub struct OprfSecretKey(pub(crate) Scalar);

/// Public verification key `g^sk` in G2.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct OprfPublicKey(pub(crate) G2Affine);

/// Client-held blinding exponent, needed once to unblind.
pub struct BlindingFactor(Scalar);

/// `H1(input)^r`, safe to send to an untrusted evaluator.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BlindedElement(#[serde(with = "g1_serde")] pub(crate) G1Projective);

/// `blinded^sk`, the evaluator's answer.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct EvaluatedElement(#[serde(with = "g1_serde")] pub(crate) G1Projective);

/// Unblinded output `H1(input)^sk`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct OprfOutput(#[serde(with = "g1_serde")] pub(crate) G1Projective);

pub(crate) mod g1_serde {
    use blstrs::G1Projective;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &G1Projective, s: S) -> Result<S::Ok, S::Error> {
        hex::encode(crate::crypto::g1_to_bytes(p)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<G1Projective, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        crate::crypto::g1_from_bytes(&bytes)
            .map_err(|_| serde::de::Error::custom("invalid G1 point"))
    }
}

impl OprfSecretKey {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        OprfSecretKey(random_nonzero_scalar(rng))
    }

    pub fn public_key(&self) -> OprfPublicKey {
        OprfPublicKey(crypto::g2_mul_generator(&self.0))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        crypto::scalar_to_bytes(&self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        Ok(OprfSecretKey(crypto::scalar_from_bytes(bytes)?))
    }
}

impl OprfPublicKey {
    pub fn to_bytes(&self) -> [u8; 96] {
        crypto::g2_to_bytes(&self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        Ok(OprfPublicKey(crypto::g2_from_bytes(bytes)?))
    }

    pub fn as_g2(&self) -> &G2Affine {
        &self.0
    }
}

impl BlindedElement {
    pub fn to_bytes(&self) -> [u8; 48] {
        crypto::g1_to_bytes(&self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        Ok(BlindedElement(crypto::g1_from_bytes(bytes)?))
    }
}

impl EvaluatedElement {
    pub fn to_bytes(&self) -> [u8; 48] {
        crypto::g1_to_bytes(&self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        Ok(EvaluatedElement(crypto::g1_from_bytes(bytes)?))
    }
}

impl OprfOutput {
    pub fn to_bytes(&self) -> [u8; 48] {
        crypto::g1_to_bytes(&self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        Ok(OprfOutput(crypto::g1_from_bytes(bytes)?))
    }

    pub fn as_g1(&self) -> &G1Projective {
        &self.0
    }
}

/// Blind `input` with a fresh exponent: `x = H1(input)^r`.
pub fn blind(
    input: &[u8],
    rng: &mut (impl RngCore + CryptoRng),
) -> (BlindingFactor, BlindedElement) {
    let r = random_nonzero_scalar(rng);
    let x = g1_exp(&h_to_group(input), &r);
    (BlindingFactor(r), BlindedElement(x))
}

/// Evaluator side: `y = x^sk`.
pub fn evaluate(sk: &OprfSecretKey, blinded: &BlindedElement) -> EvaluatedElement {
    EvaluatedElement(g1_exp(&blinded.0, &sk.0))
}

/// Remove the blinding exponent: `v = y^(1/r) = H1(input)^sk`.
pub fn unblind(r: &BlindingFactor, evaluated: &EvaluatedElement) -> OprfOutput {
    let inv = scalar_inv(&r.0).expect("blinding factors are sampled nonzero");
    OprfOutput(g1_exp(&evaluated.0, &inv))
}

/// Check `e(pk, H1(input)) = e(g, v)`: `v` is the OPRF of `input` under the
/// key behind `pk`.
pub fn verify_output(pk: &OprfPublicKey, input: &[u8], output: &OprfOutput) -> bool {
    pairing_check(&pk.0, &h_to_group(input), &g2_generator(), &output.0)
}

/// Group product of several outputs, the value protocol layers hash into a
/// shared secret. Every contributor must supply one factor, so the result
/// is unpredictable to anyone missing even a single evaluator's answer.
pub fn combine_outputs<'a>(outputs: impl IntoIterator<Item = &'a OprfOutput>) -> OprfOutput {
    use group::Group;
    OprfOutput(
        outputs
            .into_iter()
            .fold(G1Projective::identity(), |acc, o| acc + o.0),
    )
}

/// Check the same relation on still-blinded values: `e(pk, x) = e(g, y)`.
/// Used by dispute resolution, which only ever sees blinded transcripts.
pub fn verify_blinded_pair(
    pk: &OprfPublicKey,
    blinded: &BlindedElement,
    evaluated: &EvaluatedElement,
) -> bool {
    pairing_check(&pk.0, &blinded.0, &g2_generator(), &evaluated.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{RngCore, SeedableRng};

    fn rng() -> StdRng {
        StdRng::seed_from_u64(0x0b1d)
    }

    /// Direct computation of the function the protocol is supposed to
    /// realize, with no blinding involved.
    fn oracle(sk: &OprfSecretKey, input: &[u8]) -> G1Projective {
        g1_exp(&h_to_group(input), &sk.0)
    }

    #[test]
    fn roundtrip_matches_unblinded_oracle() {
        let mut r = rng();
        for _ in 0..32 {
            let sk = OprfSecretKey::generate(&mut r);
            let input = r.next_u64().to_be_bytes();
            let (bf, x) = blind(&input, &mut r);
            let y = evaluate(&sk, &x);
            let v = unblind(&bf, &y);
            assert_eq!(v.0, oracle(&sk, &input));
        }
    }

    #[test]
    fn output_is_deterministic_across_blindings() {
        let mut r = rng();
        let sk = OprfSecretKey::generate(&mut r);
        let input = b"same descriptor";
        let (bf1, x1) = blind(input, &mut r);
        let (bf2, x2) = blind(input, &mut r);
        assert_ne!(x1, x2, "fresh blinds must differ");
        let v1 = unblind(&bf1, &evaluate(&sk, &x1));
        let v2 = unblind(&bf2, &evaluate(&sk, &x2));
        assert_eq!(v1, v2);
    }

    #[test]
    fn verify_output_accepts_honest_evaluation() {
        let mut r = rng();
        for _ in 0..16 {
            let sk = OprfSecretKey::generate(&mut r);
            let pk = sk.public_key();
            let input = r.next_u64().to_be_bytes();
            let (bf, x) = blind(&input, &mut r);
            let v = unblind(&bf, &evaluate(&sk, &x));
            assert!(verify_output(&pk, &input, &v));
        }
    }

    #[test]
    fn verify_output_rejects_wrong_key() {
        let mut r = rng();
        for _ in 0..16 {
            let sk = OprfSecretKey::generate(&mut r);
            let sk2 = OprfSecretKey::generate(&mut r);
            let pk = sk.public_key();
            let input = r.next_u64().to_be_bytes();
            let (bf, x) = blind(&input, &mut r);
            // Evaluated under sk2 but verified against pk of sk.
            let v = unblind(&bf, &evaluate(&sk2, &x));
            assert!(!verify_output(&pk, &input, &v));
        }
    }

    #[test]
    fn verify_output_rejects_wrong_input() {
        let mut r = rng();
        let sk = OprfSecretKey::generate(&mut r);
        let pk = sk.public_key();
        let (bf, x) = blind(b"input A", &mut r);
        let v = unblind(&bf, &evaluate(&sk, &x));
        assert!(!verify_output(&pk, b"input B", &v));
    }

    #[test]
    fn verify_blinded_pair_matches_unblinded_verdict() {
        let mut r = rng();
        let sk = OprfSecretKey::generate(&mut r);
        let wrong = OprfSecretKey::generate(&mut r);
        let pk = sk.public_key();
        let (_bf, x) = blind(b"transcript", &mut r);
        assert!(verify_blinded_pair(&pk, &x, &evaluate(&sk, &x)));
        assert!(!verify_blinded_pair(&pk, &x, &evaluate(&wrong, &x)));
    }

    #[test]
    fn key_and_element_encodings_roundtrip() {
        let mut r = rng();
        let sk = OprfSecretKey::generate(&mut r);
        let pk = sk.public_key();
        assert_eq!(
            OprfSecretKey::from_bytes(&sk.to_bytes()).unwrap().0,
            sk.0
        );
        assert_eq!(OprfPublicKey::from_bytes(&pk.to_bytes()).unwrap(), pk);
        let (_bf, x) = blind(b"enc", &mut r);
        assert_eq!(BlindedElement::from_bytes(&x.to_bytes()).unwrap(), x);
        let y = evaluate(&sk, &x);
        assert_eq!(EvaluatedElement::from_bytes(&y.to_bytes()).unwrap(), y);
    }

    /// Obliviousness check: an adversary holding only blinded elements
    /// should do no better than coin-flipping at telling which of two known
    /// inputs was blinded. The classifier splits on the lexicographic median
    /// of encodings, the strongest simple statistic available to it.
    #[test]
    fn blinded_elements_leak_nothing_about_the_input() {
        let mut r = rng();
        let inputs: [&[u8]; 2] = [b"input zero", b"input one"];
        let mut samples: Vec<([u8; 48], usize)> = Vec::with_capacity(10_000);
        for i in 0..10_000 {
            let which = (i % 2) as usize;
            let (_bf, x) = blind(inputs[which], &mut r);
            samples.push((x.to_bytes(), which));
        }
        let mut sorted: Vec<[u8; 48]> = samples.iter().map(|(b, _)| *b).collect();
        sorted.sort();
        let median = sorted[sorted.len() / 2];
        let correct = samples
            .iter()
            .filter(|(b, which)| usize::from(*b >= median) == *which)
            .count();
        let acc = correct as f64 / samples.len() as f64;
        assert!(
            (acc - 0.5).abs() < 0.02,
            "classifier accuracy {acc} is too far from chance"
        );
    }
}
