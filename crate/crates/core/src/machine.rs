//! Shared vocabulary of the prover and verifier state machines: the effects
//! they hand back to whatever drives them (the simulator, or a test bench
//! feeding packets by hand), and the per-device operation costs.

use crate::device::DeviceId;
use crate::schedule::Micros;
use crate::wire::Packet;

/// What a state machine wants done. Send times are absolute: handlers add
/// their own processing costs before a packet may leave the device.
#[derive(Debug, Clone)]
pub enum Effect {
    /// Flood to all neighbors.
    Broadcast { packet: Packet, at: Micros },
    /// Addressed send to one neighbor.
    Unicast { to: DeviceId, packet: Packet, at: Micros },
    /// Wake me at `at` with this tag.
    Timer { tag: TimerTag, at: Micros },
    /// Metric pulse for the driver to count.
    Note(Pulse),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerTag {
    /// Parent choice settles once the disclosure that triggered it is processed.
    AckDecision { epoch: u32 },
    /// No child acks by now means this node is a leaf this epoch.
    LeafCheck { epoch: u32 },
    /// Stop waiting for child reports and send what we have.
    ReportDeadline { epoch: u32 },
}

/// Countable events surfaced by the state machines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pulse {
    DroppedInadmissible,
    DroppedDuplicate,
    DroppedBadMac,
    /// A buffered packet authenticated via a hash-walk-recovered key; without
    /// the recovery mechanism this device would have dropped out.
    RecoveredViaSkip,
    LateChildReport,
}

/// Handler verdict: effects plus how long the device stays busy processing.
#[derive(Debug, Clone, Default)]
pub struct Output {
    pub effects: Vec<Effect>,
    pub busy_until: Micros,
}

impl Output {
    pub fn none() -> Output {
        Output::default()
    }
}

/// Per-operation runtime of a device, in µs. Values come from the delay
/// model's platform table; the state machines add them up so that outgoing
/// packets and state changes land at honest times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlatformCosts {
    /// Authenticating one hash-walk step of a disclosed session key.
    pub session_key_auth: Micros,
    /// Applying one chained nonce update.
    pub nonce_update: Micros,
    /// Deriving the request key, authenticating and decrypting the request.
    pub attest_request_handle: Micros,
    /// Building/aggregating an attestation report.
    pub report_prep: Micros,
    /// OR of two 255-byte vectors; scaled linearly with vector length.
    pub vector_or_255b: Micros,
    /// Verifying a 32-byte MAC.
    pub mac_verify: Micros,
    /// Recomputing the memory digest (charged off the attestation path).
    pub digest_recompute: Micros,
    /// Bookkeeping to dedup/buffer/forward a flooded packet.
    pub forward: Micros,
}

impl PlatformCosts {
    /// A zero-cost profile (used by the verifier, which is a powerful node).
    pub const FREE: PlatformCosts = PlatformCosts {
        session_key_auth: 0,
        nonce_update: 0,
        attest_request_handle: 0,
        report_prep: 0,
        vector_or_255b: 0,
        mac_verify: 0,
        digest_recompute: 0,
        forward: 0,
    };

    /// OR cost for vectors of `bytes` length, scaled from the 255-byte row.
    pub fn vector_or(&self, bytes: usize) -> Micros {
        (self.vector_or_255b * bytes as u64).div_ceil(255)
    }
}
