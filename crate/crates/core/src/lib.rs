//! Swarm attestation over broadcast-authenticated mesh networks.
//!
//! A trusted verifier periodically attests a swarm of constrained devices in
//! one collective round: broadcasts are authenticated by delayed disclosure
//! of one-way-chain session keys, physical absence is detected through
//! chained nonce updates, software integrity through XOR-aggregated memory
//! digests, and communication cost is tuned by a constrained cluster-selection
//! optimizer. A deterministic discrete-event simulator drives the protocol
//! over tree, mesh, and mobile topologies at up to 100K nodes.

pub mod cluster;
pub mod crypto;
pub mod device;
pub mod keychain;
pub mod machine;
pub mod prover;
pub mod verifier;
pub mod report;
pub mod schedule;
pub mod wire;
