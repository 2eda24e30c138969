//! Core library for Sidecar, a distributed out-of-band signaling system for
//! telephony. Sidecar lets the providers on a call path exchange call metadata
//! (such as STIR/SHAKEN PASSporTs) through a privacy-preserving key-value
//! channel: nobody operating or observing the channel learns who is calling
//! whom, records expire within seconds both physically and cryptographically,
//! and every request is anonymously authenticated yet accountable after the
//! fact.
//!
//! # Architecture
//!
//! The system has three kinds of participants:
//!
//! - **Providers** sit on the call path. The originating side derives a
//!   per-call secret, encrypts the payload, and publishes it; the terminating
//!   side independently derives the same secret and retrieves the payload.
//! - **CPS nodes** form two subsystems: *Evaluators* (EVs) hold rings of
//!   rotating OPRF keys and answer blinded evaluation requests, and *Message
//!   Stores* (MSs) cache encrypted records for at most `t_max` seconds.
//! - The **Admin / ALS** manages group membership and revocation, runs the
//!   billing clearinghouse, and hosts the append-only Audit Log Server used
//!   for transparency, dispute resolution, and billing reconciliation.
//!
//! # Module map
//!
//! - [`crypto`]: pairing-group arithmetic, hashing, and AEAD primitives.
//! - [`voprf`]: the verifiable oblivious PRF (blind / evaluate / unblind /
//!   verify) used for call secrets and billing tokens.
//! - [`groupsig`]: the anonymous group-signature scheme providers sign
//!   requests with, including manager-side opening.
//! - [`registry`]: the public node registry and XOR-metric node selection.
//! - [`billing`]: anonymous pay-per-use tokens, spent ledgers, reconciliation,
//!   and double-spend deanonymization.
//! - [`evaluator`]: EV node logic with the rotating key schedule and the
//!   just-expired-key edge case.
//! - [`msgstore`]: MS node logic with enforced record expiry.
//! - [`provider`]: the provider-side client driving call-secret generation,
//!   publish, and retrieval.
//! - [`admin`]: Admin, clearinghouse host, revocation list, the ALS logs, and
//!   dispute resolution.
//! - [`wire`]: canonical wire encoding shared by the HTTP runtime and the
//!   digests both sides compute over request bodies.
//! - [`sim`]: the desk-scale simulation and benchmarking harness (scenario
//!   runner with fault injection, burden and latency studies, resource
//!   estimator).
//!
//! All node handlers take the current time as an explicit argument, so tests
//! and the simulator drive them with a virtual clock while daemons use the
//! system clock.

pub mod admin;
pub mod billing;
pub mod crypto;
pub mod evaluator;
pub mod groupsig;
pub mod msgstore;
pub mod provider;
pub mod registry;
pub mod sim;
pub mod voprf;
pub mod wire;

pub use crypto::Digest;
