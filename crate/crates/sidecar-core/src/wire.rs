//! Canonical wire envelope for every request the daemons exchange, plus
//! length-prefixed framing for streams and log export.
//!
//! Requests travel as a versioned envelope `{version, kind, body}`. The
//! encoding is canonical: compact JSON with a fixed field order, so the
//! bytes a client hashes and the bytes a server hashes are identical on
//! every honest exchange, and frozen test vectors stay valid across
//! releases. Byte-valued fields ride as hex strings, the same convention
//! the rest of the codebase uses for digests, points, and signatures.
//!
//! Decoding is total: malformed input, an unsupported version, or a
//! truncated frame come back as a [`WireError`], never a panic.

use serde::{Deserialize, Serialize};

use crate::admin::AlsSubmission;
use crate::billing::MintRequest;
use crate::evaluator::EvalRequest;
use crate::msgstore::{RetrieveRequest, StoreRequest};
use crate::registry::{ipk_serde, NodeType};

/// Envelope version this build emits and accepts.
pub const WIRE_VERSION: u8 = 1;

/// Hard ceiling on a single frame, defending readers against hostile
/// length prefixes.
pub const MAX_FRAME_BYTES: usize = 1 << 24;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("input ends inside a frame")]
    Truncated,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    OversizedFrame(usize),
}

/// Node enrollment request.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegisterNodeBody {
    pub nip: String,
    pub ntyp: NodeType,
    #[serde(with = "ipk_serde")]
    pub ipk: ed25519_dalek::VerifyingKey,
}

/// Registry download request; `known_version` lets a caller that is
/// already current say so.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistrySyncBody {
    pub known_version: Option<u64>,
}

/// Liveness probe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PulseBody {
    pub ts_ms: u64,
}

/// Kind-specific payload of one request.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum WireBody {
    #[serde(rename = "evaluate")]
    Evaluate(EvalRequest),
    #[serde(rename = "store")]
    Store(StoreRequest),
    #[serde(rename = "retrieve")]
    Retrieve(RetrieveRequest),
    #[serde(rename = "register")]
    Register(RegisterNodeBody),
    #[serde(rename = "mint")]
    Mint(MintRequest),
    #[serde(rename = "als-append")]
    AlsAppend(AlsSubmission),
    #[serde(rename = "registry-sync")]
    RegistrySync(RegistrySyncBody),
    #[serde(rename = "pulse")]
    Pulse(PulseBody),
}

impl WireBody {
    pub fn kind(&self) -> &'static str {
        match self {
            WireBody::Evaluate(_) => "evaluate",
            WireBody::Store(_) => "store",
            WireBody::Retrieve(_) => "retrieve",
            WireBody::Register(_) => "register",
            WireBody::Mint(_) => "mint",
            WireBody::AlsAppend(_) => "als-append",
            WireBody::RegistrySync(_) => "registry-sync",
            WireBody::Pulse(_) => "pulse",
        }
    }
}

/// One request on the wire.
#[derive(Clone, Serialize, Deserialize)]
pub struct WireMessage {
    pub version: u8,
    #[serde(flatten)]
    pub body: WireBody,
}

impl WireMessage {
    pub fn new(body: WireBody) -> Self {
        WireMessage {
            version: WIRE_VERSION,
            body,
        }
    }
}

/// Canonical bytes of a message: compact, fixed field order.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    serde_json::to_vec(msg).expect("wire messages always serialize")
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u8,
}

/// Parse one message, rejecting unsupported versions before the body is
/// interpreted.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
    let probe: VersionProbe =
        serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
    if probe.version != WIRE_VERSION {
        return Err(WireError::UnsupportedVersion(probe.version));
    }
    serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Prefix a payload with its big-endian `u32` length.
pub fn frame(payload: &[u8]) -> Vec<u8> {
    assert!(payload.len() <= MAX_FRAME_BYTES, "frame too large to emit");
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Split one frame off the front of `input`, returning the payload and
/// the remainder.
pub fn deframe(input: &[u8]) -> Result<(&[u8], &[u8]), WireError> {
    let Some(len_bytes) = input.get(..4) else {
        return Err(WireError::Truncated);
    };
    let len = u32::from_be_bytes(len_bytes.try_into().expect("sliced to 4")) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::OversizedFrame(len));
    }
    let Some(payload) = input.get(4..4 + len) else {
        return Err(WireError::Truncated);
    };
    Ok((payload, &input[4 + len..]))
}

/// Split a whole buffer into its framed payloads.
pub fn deframe_all(mut input: &[u8]) -> Result<Vec<&[u8]>, WireError> {
    let mut out = Vec::new();
    while !input.is_empty() {
        let (payload, rest) = deframe(input)?;
        out.push(payload);
        input = rest;
    }
    Ok(out)
}

pub fn encode_framed(msg: &WireMessage) -> Vec<u8> {
    frame(&encode(msg))
}

pub fn decode_framed(input: &[u8]) -> Result<(WireMessage, &[u8]), WireError> {
    let (payload, rest) = deframe(input)?;
    Ok((decode(payload)?, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billing::prepare_mint;
    use crate::crypto::h_digest;
    use crate::evaluator::csg_request_digest;
    use crate::groupsig::{gsetup, gsign, join};
    use crate::msgstore::{retrieve_request_message, store_request_message};
    use crate::voprf::{blind, evaluate, unblind, OprfSecretKey};
    use ed25519_dalek::SigningKey;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn sample_messages(seed: u64) -> Vec<WireMessage> {
        let mut r = StdRng::seed_from_u64(seed);
        let (gpk, mut mgr) = gsetup(&mut r);
        let gsk = join(&mut mgr, "prov-1", &mut r);
        let sk = OprfSecretKey::generate(&mut r);
        let (bf, x) = blind(b"wire fixture", &mut r);
        let t1 = unblind(&bf, &evaluate(&sk, &x));
        let t0 = h_digest(b"token zero");
        let nid = h_digest(b"node one");
        let isk = SigningKey::generate(&mut r);

        let s_ev = vec![nid];
        let hreq = csg_request_digest(&x, 3, &t0, &t1, &s_ev);
        let eval = EvalRequest {
            x,
            i_k: 3,
            t0,
            t1,
            s_ev,
            sigma: gsign(&gpk, &gsk, hreq.as_bytes(), &mut r),
        };

        let idx = h_digest(b"record index");
        let c0 = [0x42u8; 32];
        let c1 = vec![0xa7u8; 24];
        let s_ms = vec![nid];
        let smsg = store_request_message(&idx, &c0, &c1, &t0, &t1, &s_ms);
        let store = StoreRequest {
            idx,
            c0,
            c1,
            t0,
            t1,
            s_ms: s_ms.clone(),
            sigma: gsign(&gpk, &gsk, &smsg, &mut r),
        };

        let rmsg = retrieve_request_message(&idx, &t0, &t1, &s_ms);
        let retrieve = RetrieveRequest {
            idx,
            t0,
            t1,
            s_ms,
            sigma: gsign(&gpk, &gsk, &rmsg, &mut r),
        };

        let (_, mint) = prepare_mint("prov-1", &isk, 2, &mut r);

        let rotation = {
            let mut node = crate::evaluator::EvNode::new(
                nid,
                isk.clone(),
                2,
                60_000,
                5_000,
                1_000,
                gpk.clone(),
                sk.public_key(),
                &mut r,
            );
            node.rotation_outbox.remove(0)
        };

        vec![
            WireMessage::new(WireBody::Evaluate(eval)),
            WireMessage::new(WireBody::Store(store)),
            WireMessage::new(WireBody::Retrieve(retrieve)),
            WireMessage::new(WireBody::Register(RegisterNodeBody {
                nip: "10.0.0.7:7000".into(),
                ntyp: NodeType::Ev,
                ipk: isk.verifying_key(),
            })),
            WireMessage::new(WireBody::Mint(mint)),
            WireMessage::new(WireBody::AlsAppend(AlsSubmission::Rotation(rotation))),
            WireMessage::new(WireBody::RegistrySync(RegistrySyncBody {
                known_version: Some(4),
            })),
            WireMessage::new(WireBody::Pulse(PulseBody { ts_ms: 1_234 })),
        ]
    }

    #[test]
    fn every_kind_roundtrips_to_identical_canonical_bytes() {
        let msgs = sample_messages(0x31e);
        assert_eq!(msgs.len(), 8);
        let mut kinds = Vec::new();
        for m in &msgs {
            let bytes = encode(m);
            let back = decode(&bytes).unwrap();
            assert_eq!(encode(&back), bytes);
            kinds.push(m.body.kind());
        }
        assert_eq!(
            kinds,
            [
                "evaluate",
                "store",
                "retrieve",
                "register",
                "mint",
                "als-append",
                "registry-sync",
                "pulse"
            ]
        );
    }

    #[test]
    fn truncation_anywhere_is_an_error_never_a_crash() {
        let bytes = encode(&sample_messages(0x31e).remove(1));
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn unsupported_version_is_rejected_before_the_body_is_read() {
        assert!(matches!(
            decode(br#"{"version":9,"kind":"pulse","body":{"ts_ms":1}}"#),
            Err(WireError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            decode(br#"{"version":1,"kind":"no-such-kind","body":{}}"#),
            Err(WireError::Malformed(_))
        ));
    }

    #[test]
    fn canonical_evaluate_bytes_are_stable() {
        // Frozen vector: a fixed evaluate body must encode to these exact
        // bytes in every build, or digests computed over request bodies
        // stop matching between peers on different versions.
        let a = encode(&sample_messages(7).remove(0));
        let b = encode(&sample_messages(7).remove(0));
        assert_eq!(a, b);
        assert_eq!(
            String::from_utf8_lossy(&a[..40]),
            r#"{"version":1,"kind":"evaluate","body":{""#
        );
        assert_eq!(a.len(), 1086);
        assert_eq!(
            h_digest(&a).to_hex(),
            "c833809bef5c0946b0411fe6c99590e389ffebff41b05d729689543c04b2ae9e"
        );
    }

    #[test]
    fn framing_roundtrips_and_bounds_hostile_lengths() {
        let msgs = sample_messages(0x31e);
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend_from_slice(&encode_framed(m));
        }
        let payloads = deframe_all(&stream).unwrap();
        assert_eq!(payloads.len(), msgs.len());
        for (p, m) in payloads.iter().zip(&msgs) {
            assert_eq!(*p, encode(m).as_slice());
        }

        let (first, rest) = decode_framed(&stream).unwrap();
        assert_eq!(first.body.kind(), "evaluate");
        assert!(!rest.is_empty());

        assert_eq!(deframe(&stream[..3]), Err(WireError::Truncated));
        assert_eq!(
            deframe(&stream[..20]).map(|_| ()),
            Err(WireError::Truncated)
        );
        let hostile = ((MAX_FRAME_BYTES + 1) as u32).to_be_bytes();
        assert_eq!(
            deframe(&hostile).map(|_| ()),
            Err(WireError::OversizedFrame(MAX_FRAME_BYTES + 1))
        );
    }
}
