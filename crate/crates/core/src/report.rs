//! Report payloads that climb the spanning tree: the n-bit presence vector
//! and the XOR-folded attestation aggregate with its participant id list.
//!
//! Both are stored as sorted id runs. Healthy swarms produce long contiguous
//! runs, so this keeps 100K-node simulations cheap while the wire encoding
//! of the presence vector stays the exact n-bit bitmap (bit `i-1` = device
//! `i`, LSB-first within each byte, zero-padded to whole bytes).

use crate::crypto::Digest;
use crate::device::{ClusterId, DeviceId};
use std::collections::BTreeMap;

/// Sorted, disjoint, coalesced inclusive runs of device ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdRuns {
    runs: Vec<(u32, u32)>,
}

impl IdRuns {
    pub fn new() -> IdRuns {
        IdRuns::default()
    }

    pub fn singleton(id: u32) -> IdRuns {
        IdRuns { runs: vec![(id, id)] }
    }

    pub fn insert(&mut self, id: u32) {
        self.union_runs(&[(id, id)]);
    }

    pub fn union(&mut self, other: &IdRuns) {
        self.union_runs(&other.runs);
    }

    fn union_runs(&mut self, other: &[(u32, u32)]) {
        if other.is_empty() {
            return;
        }
        let mut merged = Vec::with_capacity(self.runs.len() + other.len());
        let mut a = self.runs.iter().peekable();
        let mut b = other.iter().peekable();
        let push = |run: (u32, u32), out: &mut Vec<(u32, u32)>| {
            if let Some(last) = out.last_mut() {
                // Coalesce overlap or adjacency.
                if run.0 <= last.1.saturating_add(1) {
                    last.1 = last.1.max(run.1);
                    return;
                }
            }
            out.push(run);
        };
        loop {
            let next = match (a.peek(), b.peek()) {
                (Some(x), Some(y)) => {
                    if x.0 <= y.0 {
                        *a.next().unwrap()
                    } else {
                        *b.next().unwrap()
                    }
                }
                (Some(_), None) => *a.next().unwrap(),
                (None, Some(_)) => *b.next().unwrap(),
                (None, None) => break,
            };
            push(next, &mut merged);
        }
        self.runs = merged;
    }

    pub fn contains(&self, id: u32) -> bool {
        self.runs
            .binary_search_by(|&(s, e)| {
                if id < s {
                    std::cmp::Ordering::Greater
                } else if id > e {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .is_ok()
    }

    pub fn count(&self) -> u64 {
        self.runs.iter().map(|&(s, e)| (e - s + 1) as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn from_runs(mut runs: Vec<(u32, u32)>) -> IdRuns {
        runs.sort_unstable();
        let mut out = IdRuns::new();
        out.union_runs(&runs);
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(s, e)| s..=e)
    }
}

/// The n-bit physical-presence vector. Bit `i-1` set means device `i`
/// participated in the epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceVector {
    dev_num: u32,
    set: IdRuns,
}

impl PresenceVector {
    pub fn new(dev_num: u32) -> PresenceVector {
        PresenceVector { dev_num, set: IdRuns::new() }
    }

    pub fn dev_num(&self) -> u32 {
        self.dev_num
    }

    pub fn set(&mut self, id: DeviceId) {
        debug_assert!(id.0 >= 1 && id.0 <= self.dev_num);
        self.set.insert(id.0);
    }

    pub fn get(&self, id: DeviceId) -> bool {
        self.set.contains(id.0)
    }

    /// Bytewise OR, expressed as a run union.
    pub fn or_with(&mut self, other: &PresenceVector) {
        assert_eq!(self.dev_num, other.dev_num, "vectors of one epoch share DevNum");
        self.set.union(&other.set);
    }

    pub fn count_set(&self) -> u64 {
        self.set.count()
    }

    pub fn byte_len(&self) -> usize {
        self.dev_num.div_ceil(8) as usize
    }

    /// The exact wire bitmap: ceil(DevNum/8) bytes, zero-padded.
    pub fn bitmap_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.byte_len()];
        for &(s, e) in self.set.runs() {
            for id in s..=e {
                let bit = (id - 1) as usize;
                out[bit / 8] |= 1 << (bit % 8);
            }
        }
        out
    }

    pub fn from_bitmap(dev_num: u32, bytes: &[u8]) -> Option<PresenceVector> {
        if bytes.len() != dev_num.div_ceil(8) as usize {
            return None;
        }
        let mut runs = Vec::new();
        let mut open: Option<u32> = None;
        for id in 1..=dev_num {
            let bit = (id - 1) as usize;
            let set = bytes[bit / 8] & (1 << (bit % 8)) != 0;
            match (set, open) {
                (true, None) => open = Some(id),
                (false, Some(s)) => {
                    runs.push((s, id - 1));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            runs.push((s, dev_num));
        }
        // Padding bits past dev_num must be zero.
        for id in dev_num + 1..=(bytes.len() as u32 * 8) {
            let bit = (id - 1) as usize;
            if bytes[bit / 8] & (1 << (bit % 8)) != 0 {
                return None;
            }
        }
        Some(PresenceVector { dev_num, set: IdRuns::from_runs(runs) })
    }

    pub fn absent_ids(&self) -> Vec<DeviceId> {
        let mut out = Vec::new();
        let mut next = 1u32;
        for &(s, e) in self.set.runs() {
            for id in next..s {
                out.push(DeviceId(id));
            }
            next = e + 1;
        }
        for id in next..=self.dev_num {
            out.push(DeviceId(id));
        }
        out
    }
}

/// XOR of per-device attest values plus the sorted participant list, grouped
/// by cluster so that sibling aggregates merge without ambiguity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateReport {
    pub attest_xor: Digest,
    ids: BTreeMap<ClusterId, IdRuns>,
}

impl AggregateReport {
    pub fn empty() -> AggregateReport {
        AggregateReport { attest_xor: Digest::ZERO, ids: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.values().all(|r| r.is_empty())
    }

    /// Fold in one device's attest value.
    pub fn add(&mut self, cluster: ClusterId, id: DeviceId, attest: Digest) {
        self.attest_xor = self.attest_xor.xor(&attest);
        self.ids.entry(cluster).or_default().insert(id.0);
    }

    /// Merge a child aggregate (XOR of digests, union of id sets).
    pub fn fold(&mut self, other: &AggregateReport) {
        self.attest_xor = self.attest_xor.xor(&other.attest_xor);
        for (cluster, runs) in &other.ids {
            self.ids.entry(*cluster).or_default().union(runs);
        }
    }

    pub fn participant_count(&self) -> u64 {
        self.ids.values().map(IdRuns::count).sum()
    }

    pub fn contains(&self, cluster: ClusterId, id: DeviceId) -> bool {
        self.ids.get(&cluster).is_some_and(|r| r.contains(id.0))
    }

    /// All participant ids in ascending order. Clusters are contiguous id
    /// bands, so per-cluster order concatenates into global order.
    pub fn id_list(&self) -> Vec<DeviceId> {
        let mut out: Vec<DeviceId> = self
            .ids
            .values()
            .flat_map(|runs| runs.iter().map(DeviceId))
            .collect();
        out.sort_unstable();
        debug_assert!(out.windows(2).all(|w| w[0] < w[1]), "ids unique");
        out
    }

    pub fn clusters(&self) -> impl Iterator<Item = (&ClusterId, &IdRuns)> {
        self.ids.iter()
    }

    pub fn from_parts(attest_xor: Digest, parts: Vec<(ClusterId, IdRuns)>) -> AggregateReport {
        let mut ids = BTreeMap::new();
        for (c, runs) in parts {
            let entry: &mut IdRuns = ids.entry(c).or_default();
            entry.union(&runs);
        }
        AggregateReport { attest_xor, ids }
    }
}
