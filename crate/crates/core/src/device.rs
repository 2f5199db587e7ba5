//! Device and cluster identities.

use serde::{Deserialize, Serialize};

/// 3-byte device identifier. Provers are numbered densely from 1; id 0 is the
/// verifier (and doubles as the "no parent yet" sentinel on the wire).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

pub const DEVICE_ID_MAX: u32 = 0xFF_FF_FF;

impl DeviceId {
    pub const VERIFIER: DeviceId = DeviceId(0);

    pub fn is_verifier(&self) -> bool {
        self.0 == 0
    }

    pub fn to_wire(&self) -> [u8; 3] {
        let b = self.0.to_be_bytes();
        [b[1], b[2], b[3]]
    }

    pub fn from_wire(b: [u8; 3]) -> DeviceId {
        DeviceId(u32::from_be_bytes([0, b[0], b[1], b[2]]))
    }
}

impl std::fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "D{}", self.0)
    }
}

impl std::fmt::Display for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 1-byte cluster identifier (deployments use at most 255 clusters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterId(pub u8);

/// Prover hardware class; selects the per-operation cost row of the delay
/// model. `A` is the smaller 16 MHz / 32 KB-flash platform, `B` the larger
/// 10 MHz / 128 KB-flash one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Platform {
    A,
    B,
}

/// Split devices 1..=dev_num into `m` contiguous, nearly equal clusters.
/// Earlier clusters take the remainder, so sizes differ by at most one.
pub fn contiguous_clusters(dev_num: u32, m: u8) -> Vec<(ClusterId, std::ops::RangeInclusive<u32>)> {
    assert!(m >= 1, "at least one cluster");
    let m32 = m as u32;
    let base = dev_num / m32;
    let rem = dev_num % m32;
    let mut out = Vec::with_capacity(m as usize);
    let mut next = 1u32;
    for c in 0..m32 {
        let size = base + if c < rem { 1 } else { 0 };
        if size == 0 {
            // An empty range; start > end iterates nothing.
            out.push((ClusterId(c as u8), next..=next - 1));
            continue;
        }
        let end = next + size - 1;
        out.push((ClusterId(c as u8), next..=end));
        next = end + 1;
    }
    out
}

/// Cluster of a given device under the contiguous split.
pub fn cluster_of(dev_num: u32, m: u8, id: DeviceId) -> ClusterId {
    debug_assert!(id.0 >= 1 && id.0 <= dev_num);
    let m32 = m as u32;
    let base = dev_num / m32;
    let rem = dev_num % m32;
    let idx = id.0 - 1;
    let fat = (base + 1) * rem; // devices living in remainder-padded clusters
    let c = if idx < fat {
        idx / (base + 1)
    } else {
        rem + (idx - fat) / base.max(1)
    };
    ClusterId(c.min(m32 - 1) as u8)
}
