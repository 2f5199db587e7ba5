//! The root state machine: epoch orchestration, report verification, device
//! labeling, and post-compromise secret rotation.
//!
//! Per epoch the verifier emits, at the four sub-interval starts: the nonce
//! update, the encrypted attestation request, and the two key disclosures.
//! It applies its own nonce updates right after building each broadcast, so
//! its group state stays bit-identical to every healthy prover's.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::crypto::{self, Digest, SymKey16, SymKey32};
use crate::device::{cluster_of, ClusterId, DeviceId, Platform};
use crate::keychain::KeyChain;
use crate::machine::Output;
use crate::prover::{derive_request_key, link_key};
use crate::report::{AggregateReport, PresenceVector};
use crate::schedule::{EpochSchedule, Micros};
use crate::wire::{
    AttestBody, AttestRequestMsg, ClusterRekeyMsg, CommitmentRotateMsg, GroupSecretUpdateMsg,
    KeyDiscloseMsg, NonceUpdateMsg, Packet,
};

/// Per-device verdict for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Label {
    Healthy,
    RemotelyCompromised,
    PhysicallyCompromised,
    /// Present, but its cluster was not asked for software attestation.
    NotAsked,
}

impl Label {
    pub fn is_compromised(&self) -> bool {
        matches!(self, Label::RemotelyCompromised | Label::PhysicallyCompromised)
    }
}

/// What the verifier knows about one device.
#[derive(Debug, Clone)]
pub struct DeviceRecord {
    pub id: DeviceId,
    pub cluster: ClusterId,
    pub auth_key: SymKey16,
    pub integrity_key: SymKey16,
    /// MAC of the reference memory image under the device's integrity key.
    pub expected_digest: Digest,
    pub platform: Platform,
}

/// The verifier's registry: device rows, cluster keys, and membership.
#[derive(Debug, Clone)]
pub struct DeviceRegistry {
    pub dev_num: u32,
    pub cluster_count: u8,
    devices: Vec<DeviceRecord>,
    cluster_keys: Vec<SymKey16>,
}

impl DeviceRegistry {
    pub fn new(devices: Vec<DeviceRecord>, cluster_keys: Vec<SymKey16>) -> DeviceRegistry {
        let dev_num = devices.len() as u32;
        assert!(dev_num >= 1);
        for (i, d) in devices.iter().enumerate() {
            assert_eq!(d.id.0 as usize, i + 1, "ids dense in 1..=dev_num");
        }
        DeviceRegistry {
            dev_num,
            cluster_count: cluster_keys.len() as u8,
            devices,
            cluster_keys,
        }
    }

    pub fn device(&self, id: DeviceId) -> &DeviceRecord {
        &self.devices[(id.0 - 1) as usize]
    }

    pub fn devices(&self) -> &[DeviceRecord] {
        &self.devices
    }

    pub fn cluster_key(&self, c: ClusterId) -> SymKey16 {
        self.cluster_keys[c.0 as usize]
    }

    pub fn members(&self, c: ClusterId) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.iter().filter(move |d| d.cluster == c)
    }

    pub fn all_clusters(&self) -> Vec<ClusterId> {
        (0..self.cluster_count).map(ClusterId).collect()
    }

    pub fn cluster_sizes(&self) -> Vec<u32> {
        let mut sizes = vec![0u32; self.cluster_count as usize];
        for d in &self.devices {
            sizes[d.cluster.0 as usize] += 1;
        }
        sizes
    }
}

/// Which clusters attest now and which precompute for next time.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub attest_now: Vec<ClusterId>,
    pub precompute: Vec<ClusterId>,
}

/// Outcome of one attestation epoch.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub epoch: u32,
    /// Index `id-1`.
    pub labels: Vec<Label>,
    pub attested_clusters: Vec<ClusterId>,
    /// Epoch start to the last root report arrival.
    pub duration: Micros,
    pub unverifiable: bool,
    /// No root report at all: the degenerate outcome is flagged, not hidden.
    pub degenerate: bool,
    pub reports_received: u32,
}

impl EpochOutcome {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn label_of(&self, id: DeviceId) -> Label {
        self.labels[(id.0 - 1) as usize]
    }

    pub fn compromised_ids(&self) -> BTreeSet<DeviceId> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_compromised())
            .map(|(i, _)| DeviceId(i as u32 + 1))
            .collect()
    }

    /// Compact JSON record: counts plus the exceptional id lists.
    pub fn to_json(&self) -> serde_json::Value {
        let ids = |want: Label| -> Vec<u32> {
            self.labels
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l == want)
                .map(|(i, _)| i as u32 + 1)
                .collect()
        };
        serde_json::json!({
            "epoch": self.epoch,
            "duration_ms": self.duration / 1_000,
            "unverifiable": self.unverifiable,
            "degenerate": self.degenerate,
            "reports_received": self.reports_received,
            "attested_clusters": self.attested_clusters.iter().map(|c| c.0).collect::<Vec<_>>(),
            "healthy": self.count(Label::Healthy),
            "not_asked": self.count(Label::NotAsked),
            "remotely_compromised": ids(Label::RemotelyCompromised),
            "physically_compromised": ids(Label::PhysicallyCompromised),
        })
    }
}

/// Check the root aggregate against the registry and label every device.
///
/// `epoch_nonce` is the group nonce after the epoch's two updates, the value
/// healthy provers folded into their attests.
pub fn verify_reports(
    registry: &DeviceRegistry,
    epoch_nonce: &SymKey32,
    presence: &PresenceVector,
    aggregate: &AggregateReport,
    attest_now: &[ClusterId],
) -> (Vec<Label>, bool) {
    let asked: BTreeSet<ClusterId> = attest_now.iter().copied().collect();

    let mut expected = Digest::ZERO;
    let mut unverifiable = false;
    for id in aggregate.id_list() {
        if id.0 < 1 || id.0 > registry.dev_num {
            unverifiable = true;
            break;
        }
        let rec = registry.device(id);
        if !asked.contains(&rec.cluster) {
            // A contribution from a cluster that was never asked.
            unverifiable = true;
            break;
        }
        expected = expected.xor(&crypto::hash_concat(&[
            rec.expected_digest.as_bytes(),
            epoch_nonce.as_bytes(),
        ]));
    }
    if expected != aggregate.attest_xor {
        unverifiable = true;
    }

    let labels = registry
        .devices
        .iter()
        .map(|rec| {
            if !presence.get(rec.id) {
                Label::PhysicallyCompromised
            } else if unverifiable || !asked.contains(&rec.cluster) {
                // A rejected aggregate carries no trustworthy software
                // verdicts; fall back to presence-only labeling.
                Label::NotAsked
            } else if aggregate.contains(rec.cluster, rec.id) {
                Label::Healthy
            } else {
                Label::RemotelyCompromised
            }
        })
        .collect();
    (labels, unverifiable)
}

#[derive(Debug, Clone)]
struct VerifierEpoch {
    epoch: u32,
    selection: Selection,
    dev_num: u32,
    children: BTreeSet<DeviceId>,
    reported: BTreeSet<DeviceId>,
    presence: PresenceVector,
    aggregate: AggregateReport,
    start: Micros,
    last_report_at: Option<Micros>,
    reports_received: u32,
}

/// The root of the swarm. Drives epochs, absorbs acks and reports, labels
/// devices, and rotates secrets.
pub struct Verifier {
    pub registry: DeviceRegistry,
    pub schedule: EpochSchedule,
    chain: KeyChain,
    chain_start_epoch: u32,
    pub nonce: SymKey32,
    rng: ChaCha12Rng,
    rotation_seq: u32,
    ctx: Option<VerifierEpoch>,
    /// Simulated cost of verifying the aggregated reports, charged to the
    /// verifier host at epoch end (reported, not on the attestation clock).
    pub aggregate_verify_cost: Micros,
}

impl Verifier {
    pub fn new(
        registry: DeviceRegistry,
        schedule: EpochSchedule,
        initial_nonce: SymKey32,
        chain: KeyChain,
        master_seed: [u8; 32],
    ) -> Verifier {
        Verifier {
            registry,
            schedule,
            chain,
            chain_start_epoch: 0,
            nonce: initial_nonce,
            rng: ChaCha12Rng::from_seed(master_seed),
            rotation_seq: 0,
            ctx: None,
            aggregate_verify_cost: 0,
        }
    }

    pub fn commitment(&self) -> SymKey32 {
        self.chain.commitment()
    }

    pub fn chain(&self) -> &KeyChain {
        &self.chain
    }

    fn draw32(&mut self) -> SymKey32 {
        let mut b = [0u8; 32];
        self.rng.fill_bytes(&mut b);
        SymKey32(b)
    }

    fn draw16(&mut self) -> SymKey16 {
        let mut b = [0u8; 16];
        self.rng.fill_bytes(&mut b);
        SymKey16(b)
    }

    /// Session keys serving `epoch` under the current chain.
    fn session_keys(&self, epoch: u32) -> (u32, SymKey32, u32, SymKey32) {
        let off = epoch - self.chain_start_epoch;
        let (i1, i2) = KeyChain::epoch_keys(off);
        (i1, self.chain.key(i1), i2, self.chain.key(i2))
    }

    /// Build the epoch's four broadcasts, timed at the sub-interval starts,
    /// and advance the verifier's own nonce through both updates.
    pub fn begin_epoch(&mut self, epoch: u32, selection: Selection) -> Vec<(Micros, Packet)> {
        assert!(
            epoch >= self.chain_start_epoch
                && epoch - self.chain_start_epoch < self.chain.epochs_available(),
            "keychain must cover the epoch; rotate first"
        );
        let (i1, k1, i2, k2) = self.session_keys(epoch);
        let base = self.schedule.epoch_start_of(epoch as u64);
        let offsets: Vec<Micros> =
            self.schedule.intervals.iter().map(|iv| iv.start_offset).collect();
        let at = |i: usize| base + offsets[i];

        let mut plan = Vec::with_capacity(4);

        // Sub-interval 0: fresh value, MAC'd with the still-secret key; then
        // the first nonce update.
        let n1 = self.draw32();
        plan.push((at(0), Packet::NonceUpdate(NonceUpdateMsg::seal(epoch, n1, &k1))));
        self.nonce = SymKey32::from_digest(crypto::hash_concat(&[
            self.nonce.as_bytes(),
            n1.as_bytes(),
        ]));

        // Sub-interval 1: the encrypted request under the once-updated nonce,
        // then the second update.
        let n2 = self.draw32();
        let body = AttestBody {
            n_new: n2,
            dev_num: self.registry.dev_num,
            attest_now: selection.attest_now.clone(),
            precompute: selection.precompute.clone(),
        };
        let enc_key = derive_request_key(&k2, &self.nonce);
        plan.push((
            at(1),
            Packet::AttestRequest(AttestRequestMsg::seal(epoch, &body, &enc_key, &k2)),
        ));
        self.nonce = SymKey32::from_digest(crypto::hash_concat(&[
            self.nonce.as_bytes(),
            n2.as_bytes(),
        ]));

        // Sub-intervals 2 and 3: the disclosures.
        plan.push((
            at(2),
            Packet::KeyDisclose(KeyDiscloseMsg { epoch, key_index: i1 as u8, key: k1 }),
        ));
        plan.push((
            at(3),
            Packet::KeyDisclose(KeyDiscloseMsg { epoch, key_index: i2 as u8, key: k2 }),
        ));

        self.ctx = Some(VerifierEpoch {
            epoch,
            dev_num: self.registry.dev_num,
            selection,
            children: BTreeSet::new(),
            reported: BTreeSet::new(),
            presence: PresenceVector::new(self.registry.dev_num),
            aggregate: AggregateReport::empty(),
            start: base,
            last_report_at: None,
            reports_received: 0,
        });
        plan
    }

    pub fn link_key(&self) -> Digest {
        link_key(&self.chain.commitment(), &self.nonce)
    }

    pub fn on_packet(&mut self, packet: &Packet, _from: DeviceId, now: Micros) -> Output {
        let lk = self.link_key();
        let Some(ctx) = self.ctx.as_mut() else { return Output::none() };
        match packet {
            Packet::Ack(m) => {
                if m.parent == DeviceId::VERIFIER && m.epoch == ctx.epoch && m.verify(&lk) {
                    ctx.children.insert(m.child);
                }
            }
            Packet::ReportUp(m) => {
                if m.parent == DeviceId::VERIFIER
                    && m.epoch == ctx.epoch
                    && m.presence.dev_num() == ctx.dev_num
                    && m.verify(&lk)
                    && !ctx.reported.contains(&m.sender)
                {
                    ctx.reported.insert(m.sender);
                    ctx.presence.or_with(&m.presence);
                    ctx.aggregate.fold(&m.aggregate);
                    ctx.reports_received += 1;
                    ctx.last_report_at = Some(now);
                }
            }
            _ => {}
        }
        Output::none()
    }

    /// Close the epoch: verify the aggregate, label every device.
    pub fn end_epoch(&mut self) -> EpochOutcome {
        let ctx = self.ctx.take().expect("epoch in progress");
        let (labels, unverifiable) = verify_reports(
            &self.registry,
            &self.nonce,
            &ctx.presence,
            &ctx.aggregate,
            &ctx.selection.attest_now,
        );
        EpochOutcome {
            epoch: ctx.epoch,
            labels,
            attested_clusters: ctx.selection.attest_now.clone(),
            duration: ctx.last_report_at.map_or(0, |t| t - ctx.start),
            unverifiable,
            degenerate: ctx.reports_received == 0,
            reports_received: ctx.reports_received,
        }
    }

    /// Refresh the group secrets after a detected physical compromise.
    ///
    /// Fully healthy clusters each get the new nonce and commitment under
    /// their cluster key. A cluster containing compromised devices first gets
    /// a rekey message (the new cluster key encrypted per healthy member),
    /// then the group secrets under the new cluster key. Clusters with no
    /// healthy members get nothing. Broadcast order follows the returned
    /// list. `first_epoch` is the epoch from which the new secrets apply.
    pub fn rotate_group_secrets(
        &mut self,
        compromised: &BTreeSet<DeviceId>,
        first_epoch: u32,
    ) -> Vec<Packet> {
        assert!(!compromised.is_empty());
        self.rotation_seq = first_epoch;
        let rotation = self.rotation_seq;

        let new_nonce = self.draw32();
        let chain_seed = self.draw32();
        let new_chain = KeyChain::generate(chain_seed.as_bytes(), self.chain.len()).unwrap();
        let new_commitment = new_chain.commitment();

        let mut healthy_updates = Vec::new();
        let mut rekeys = Vec::new();
        let mut followups = Vec::new();

        for cluster in self.registry.all_clusters() {
            let members: Vec<&DeviceRecord> = self.registry.members(cluster).collect();
            if members.is_empty() {
                continue;
            }
            let healthy: Vec<(DeviceId, SymKey16)> = members
                .iter()
                .filter(|d| !compromised.contains(&d.id))
                .map(|d| (d.id, d.auth_key))
                .collect();
            if healthy.is_empty() {
                continue;
            }
            let had_compromise = healthy.len() != members.len();
            if had_compromise {
                let new_cluster_key = self.draw16();
                rekeys.push(Packet::ClusterRekey(ClusterRekeyMsg::seal(
                    rotation,
                    cluster,
                    &healthy,
                    &new_cluster_key,
                )));
                self.registry.cluster_keys[cluster.0 as usize] = new_cluster_key;
                followups.push(Packet::GroupSecretUpdate(GroupSecretUpdateMsg::seal(
                    rotation,
                    cluster,
                    &new_nonce,
                    &new_commitment,
                    &new_cluster_key,
                )));
            } else {
                healthy_updates.push(Packet::GroupSecretUpdate(GroupSecretUpdateMsg::seal(
                    rotation,
                    cluster,
                    &new_nonce,
                    &new_commitment,
                    &self.registry.cluster_key(cluster),
                )));
            }
        }

        self.nonce = new_nonce;
        self.chain = new_chain;
        self.chain_start_epoch = first_epoch;

        let mut out = healthy_updates;
        out.extend(rekeys);
        out.extend(followups);
        out
    }

    /// Rotate the keychain commitment when the chain cannot serve the next
    /// epoch. No-op if a group-secret rotation already installed a fresh one.
    pub fn maybe_rotate_commitment(&mut self, next_epoch: u32) -> Option<Packet> {
        if next_epoch - self.chain_start_epoch < self.chain.epochs_available() {
            return None;
        }
        self.rotation_seq = next_epoch;
        let old = self.chain.commitment();
        let seed = self.draw32();
        let new_chain = KeyChain::generate(seed.as_bytes(), self.chain.len()).unwrap();
        let msg = CommitmentRotateMsg::seal(next_epoch, &old, &new_chain.commitment());
        self.chain = new_chain;
        self.chain_start_epoch = next_epoch;
        Some(Packet::CommitmentRotate(msg))
    }
}

/// Deterministically provision a deployment: registry plus each device's
/// secret block and memory image.
pub struct Provisioned {
    pub registry: DeviceRegistry,
    pub initial_nonce: SymKey32,
    pub chain: KeyChain,
    pub secrets: Vec<crate::wire::PersistentSecrets>,
    pub images: Vec<Vec<u8>>,
    pub master_seed: [u8; 32],
}

pub fn provision(
    dev_num: u32,
    cluster_count: u8,
    image_len: usize,
    platform_of: impl Fn(DeviceId) -> Platform,
    seed: u64,
) -> Provisioned {
    let mut rng = ChaCha12Rng::from_seed(crypto::hash_concat(&[b"provision", &seed.to_be_bytes()]).0);
    let draw16 = |rng: &mut ChaCha12Rng| {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        SymKey16(b)
    };

    let mut chain_seed = [0u8; 32];
    rng.fill_bytes(&mut chain_seed);
    let chain = KeyChain::generate(&chain_seed, crate::keychain::DEFAULT_CHAIN_LEN).unwrap();
    let mut nonce_bytes = [0u8; 32];
    rng.fill_bytes(&mut nonce_bytes);
    let initial_nonce = SymKey32(nonce_bytes);
    let mut master_seed = [0u8; 32];
    rng.fill_bytes(&mut master_seed);

    let cluster_keys: Vec<SymKey16> = (0..cluster_count).map(|_| draw16(&mut rng)).collect();

    let mut devices = Vec::with_capacity(dev_num as usize);
    let mut secrets = Vec::with_capacity(dev_num as usize);
    let mut images = Vec::with_capacity(dev_num as usize);
    for raw in 1..=dev_num {
        let id = DeviceId(raw);
        let cluster = cluster_of(dev_num, cluster_count, id);
        let auth_key = draw16(&mut rng);
        let integrity_key = draw16(&mut rng);
        // A small synthetic image; the digest work the real hardware would
        // spend on flash-sized images is charged by the delay model instead.
        let image: Vec<u8> = crypto::hash_concat(&[b"image", &raw.to_be_bytes()])
            .0
            .iter()
            .cycle()
            .take(image_len)
            .copied()
            .collect();
        let expected_digest = crypto::mac(&integrity_key.0, &image).unwrap();
        devices.push(DeviceRecord {
            id,
            cluster,
            auth_key,
            integrity_key,
            expected_digest,
            platform: platform_of(id),
        });
        secrets.push(crate::wire::PersistentSecrets {
            id,
            parent: None,
            cluster,
            auth_key,
            integrity_key,
            cluster_key: cluster_keys[cluster.0 as usize],
            commitment: chain.commitment(),
            nonce: initial_nonce,
            reference_digest: expected_digest,
        });
        images.push(image);
    }

    Provisioned {
        registry: DeviceRegistry::new(devices, cluster_keys),
        initial_nonce,
        chain,
        secrets,
        images,
        master_seed,
    }
}

/// Group devices by label for quick assertions.
pub fn labels_by_kind(labels: &[Label]) -> BTreeMap<Label, Vec<DeviceId>> {
    let mut out: BTreeMap<Label, Vec<DeviceId>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        out.entry(*l).or_default().push(DeviceId(i as u32 + 1));
    }
    out
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        fn rank(l: &Label) -> u8 {
            match l {
                Label::Healthy => 0,
                Label::NotAsked => 1,
                Label::RemotelyCompromised => 2,
                Label::PhysicallyCompromised => 3,
            }
        }
        rank(self).cmp(&rank(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Effect, PlatformCosts, TimerTag};
    use crate::prover::{ProverConfig, ProverState};
    use crate::schedule::{LocalClock, SubInterval, MS};

    fn test_schedule() -> EpochSchedule {
        EpochSchedule {
            epoch_start: 0,
            epoch_duration: 4_000 * MS,
            intervals: [
                SubInterval { start_offset: 0, duration: 300 * MS },
                SubInterval { start_offset: 300 * MS, duration: 300 * MS },
                SubInterval { start_offset: 700 * MS, duration: 400 * MS },
                SubInterval { start_offset: 1_100 * MS, duration: 2_000 * MS },
            ],
            disclosure_delay: 30 * MS,
            sync_error: 10 * MS,
        }
    }

    fn setup(n: u32, clusters: u8) -> (Verifier, Vec<ProverState>) {
        let p = provision(n, clusters, 64, |_| Platform::A, 42);
        let verifier = Verifier::new(
            p.registry,
            test_schedule(),
            p.initial_nonce,
            p.chain,
            p.master_seed,
        );
        let provers = p
            .secrets
            .into_iter()
            .zip(p.images)
            .map(|(s, img)| {
                ProverState::provision(
                    s,
                    img,
                    test_schedule(),
                    LocalClock::TRUE,
                    PlatformCosts::FREE,
                    ProverConfig::default(),
                )
            })
            .collect();
        (verifier, provers)
    }

    /// Feed the verifier's broadcast plan straight into each prover (a
    /// zero-latency star topology) and run the prover timers.
    fn run_star_epoch(
        verifier: &mut Verifier,
        provers: &mut [ProverState],
        epoch: u32,
        selection: Selection,
    ) -> EpochOutcome {
        let plan = verifier.begin_epoch(epoch, selection);
        let mut prover_fx: Vec<Vec<Effect>> = vec![vec![]; provers.len()];
        for (at, pkt) in &plan {
            for (i, p) in provers.iter_mut().enumerate() {
                prover_fx[i].extend(p.on_packet(pkt, DeviceId::VERIFIER, *at + MS).effects);
            }
        }
        // Timers, then deliver acks/reports to the verifier.
        for (i, p) in provers.iter_mut().enumerate() {
            loop {
                let mut timers: Vec<(Micros, TimerTag)> = prover_fx[i]
                    .iter()
                    .filter_map(|e| match e {
                        Effect::Timer { tag, at } => Some((*at, *tag)),
                        _ => None,
                    })
                    .collect();
                prover_fx[i].retain(|e| !matches!(e, Effect::Timer { .. }));
                if timers.is_empty() {
                    break;
                }
                timers.sort();
                for (at, tag) in timers {
                    prover_fx[i].extend(p.on_timer(tag, at).effects);
                }
            }
        }
        for fx in &prover_fx {
            for e in fx {
                if let Effect::Unicast { to, packet, at } = e {
                    if *to == DeviceId::VERIFIER {
                        verifier.on_packet(packet, DeviceId(0), *at);
                    }
                }
            }
        }
        verifier.end_epoch()
    }

    #[test]
    fn healthy_star_epoch_labels_everyone() {
        let (mut verifier, mut provers) = setup(5, 2);
        let selection = Selection {
            attest_now: verifier.registry.all_clusters(),
            precompute: verifier.registry.all_clusters(),
        };
        let outcome = run_star_epoch(&mut verifier, &mut provers, 0, selection);
        assert!(!outcome.unverifiable && !outcome.degenerate);
        assert_eq!(outcome.count(Label::Healthy), 5);

        // Lockstep invariant: every healthy prover's nonce matches the
        // verifier's, bit for bit.
        for p in &provers {
            assert_eq!(p.nonce, verifier.nonce);
            assert_eq!(p.current_link_key(), verifier.link_key());
        }
    }

    #[test]
    fn partial_attestation_labels_not_asked() {
        let (mut verifier, mut provers) = setup(6, 3);
        let selection = Selection {
            attest_now: vec![ClusterId(1)],
            precompute: verifier.registry.all_clusters(),
        };
        let outcome = run_star_epoch(&mut verifier, &mut provers, 0, selection);
        assert!(!outcome.unverifiable);
        for rec in verifier.registry.devices() {
            let label = outcome.label_of(rec.id);
            if rec.cluster == ClusterId(1) {
                assert_eq!(label, Label::Healthy);
            } else {
                assert_eq!(label, Label::NotAsked);
            }
        }
    }

    #[test]
    fn physical_only_attestation_all_not_asked() {
        let (mut verifier, mut provers) = setup(4, 2);
        let selection = Selection { attest_now: vec![], precompute: vec![] };
        let outcome = run_star_epoch(&mut verifier, &mut provers, 0, selection);
        assert!(!outcome.unverifiable);
        assert_eq!(outcome.count(Label::NotAsked), 4);
        assert_eq!(outcome.count(Label::PhysicallyCompromised), 0);
    }

    #[test]
    fn tampered_device_detected_after_precompute_cycle() {
        let (mut verifier, mut provers) = setup(5, 1);
        let all = Selection {
            attest_now: vec![ClusterId(0)],
            precompute: vec![ClusterId(0)],
        };
        // Malware lands before epoch 0: the cached digest is still clean, so
        // epoch 0 passes, but the post-report recompute poisons it.
        provers[2].memory_image[7] ^= 0x40;
        let outcome0 = run_star_epoch(&mut verifier, &mut provers, 0, all.clone());
        assert_eq!(outcome0.count(Label::Healthy), 5, "blind window");
        let outcome1 = run_star_epoch(&mut verifier, &mut provers, 1, all);
        assert_eq!(outcome1.label_of(DeviceId(3)), Label::RemotelyCompromised);
        assert_eq!(outcome1.count(Label::Healthy), 4);
        assert!(!outcome1.unverifiable, "the rest of the aggregate still verifies");
    }

    #[test]
    fn absent_device_is_physically_compromised() {
        let (mut verifier, mut provers) = setup(5, 1);
        let selection = Selection {
            attest_now: vec![ClusterId(0)],
            precompute: vec![ClusterId(0)],
        };
        // Device 4 hears nothing this epoch.
        let plan = verifier.begin_epoch(0, selection);
        let mut fx: Vec<Vec<Effect>> = vec![vec![]; provers.len()];
        for (at, pkt) in &plan {
            for (i, p) in provers.iter_mut().enumerate() {
                if i == 3 {
                    continue;
                }
                fx[i].extend(p.on_packet(pkt, DeviceId::VERIFIER, *at + MS).effects);
            }
        }
        for (i, p) in provers.iter_mut().enumerate() {
            let mut timers: Vec<(Micros, TimerTag)> = fx[i]
                .iter()
                .filter_map(|e| match e {
                    Effect::Timer { tag, at } => Some((*at, *tag)),
                    _ => None,
                })
                .collect();
            while !timers.is_empty() {
                fx[i].retain(|e| !matches!(e, Effect::Timer { .. }));
                timers.sort();
                for (at, tag) in timers.drain(..) {
                    fx[i].extend(p.on_timer(tag, at).effects);
                }
                timers = fx[i]
                    .iter()
                    .filter_map(|e| match e {
                        Effect::Timer { tag, at } => Some((*at, *tag)),
                        _ => None,
                    })
                    .collect();
            }
        }
        for f in &fx {
            for e in f {
                if let Effect::Unicast { to, packet, at } = e {
                    if *to == DeviceId::VERIFIER {
                        verifier.on_packet(packet, DeviceId(0), *at);
                    }
                }
            }
        }
        let outcome = verifier.end_epoch();
        assert_eq!(outcome.label_of(DeviceId(4)), Label::PhysicallyCompromised);
        assert_eq!(outcome.count(Label::Healthy), 4);
    }

    #[test]
    fn aggregate_bitflip_is_unverifiable_never_healthy() {
        let (verifier, _) = setup(4, 1);
        let nonce = SymKey32([9; 32]);
        let mut presence = PresenceVector::new(4);
        let mut agg = AggregateReport::empty();
        for rec in verifier.registry.devices() {
            presence.set(rec.id);
            agg.add(
                rec.cluster,
                rec.id,
                crypto::hash_concat(&[rec.expected_digest.as_bytes(), nonce.as_bytes()]),
            );
        }
        let (labels, unverifiable) =
            verify_reports(&verifier.registry, &nonce, &presence, &agg, &[ClusterId(0)]);
        assert!(!unverifiable);
        assert!(labels.iter().all(|l| *l == Label::Healthy));

        // Flip any byte of the fold: the whole aggregate is rejected and
        // nobody gets a Healthy software verdict.
        let mut bad = agg.clone();
        let mut flipped = bad.attest_xor.0;
        flipped[13] ^= 0x20;
        bad.attest_xor = Digest(flipped);
        let (labels, unverifiable) =
            verify_reports(&verifier.registry, &nonce, &presence, &bad, &[ClusterId(0)]);
        assert!(unverifiable);
        assert!(labels.iter().all(|l| *l != Label::Healthy));
        assert!(labels.iter().all(|l| !l.is_compromised()));
    }

    #[test]
    fn missing_member_in_aggregate_is_remotely_compromised() {
        let (verifier, _) = setup(4, 1);
        let nonce = SymKey32([9; 32]);
        let mut presence = PresenceVector::new(4);
        let mut agg = AggregateReport::empty();
        for rec in verifier.registry.devices() {
            presence.set(rec.id);
            if rec.id != DeviceId(2) {
                agg.add(
                    rec.cluster,
                    rec.id,
                    crypto::hash_concat(&[rec.expected_digest.as_bytes(), nonce.as_bytes()]),
                );
            }
        }
        let (labels, unverifiable) =
            verify_reports(&verifier.registry, &nonce, &presence, &agg, &[ClusterId(0)]);
        assert!(!unverifiable);
        assert_eq!(labels[1], Label::RemotelyCompromised);
        assert_eq!(labels.iter().filter(|l| **l == Label::Healthy).count(), 3);
    }

    #[test]
    fn rotation_message_counts_follow_cluster_health() {
        let (mut verifier, _) = setup(16, 8);
        let before_nonce = verifier.nonce;
        // One compromised device in cluster 0.
        let compromised: BTreeSet<DeviceId> = [DeviceId(1)].into();
        let msgs = verifier.rotate_group_secrets(&compromised, 1);
        let a_count = msgs
            .iter()
            .filter(|p| matches!(p, Packet::GroupSecretUpdate(_)))
            .count();
        let b_count = msgs.iter().filter(|p| matches!(p, Packet::ClusterRekey(_))).count();
        // 7 healthy clusters + 1 rekey + 1 follow-up under the new key.
        assert_eq!(a_count, 8);
        assert_eq!(b_count, 1);
        assert_eq!(msgs.len(), 9);
        assert_ne!(verifier.nonce, before_nonce);

        // A fully compromised cluster gets nothing at all.
        let (mut verifier, _) = setup(16, 8);
        let compromised: BTreeSet<DeviceId> = [DeviceId(1), DeviceId(2)].into();
        let msgs = verifier.rotate_group_secrets(&compromised, 1);
        assert_eq!(msgs.len(), 7, "no message for the dead cluster");
        assert!(msgs.iter().all(|p| matches!(p, Packet::GroupSecretUpdate(_))));
    }

    #[test]
    fn commitment_rotation_when_chain_exhausted() {
        let (mut verifier, _) = setup(3, 1);
        // Default chain serves 2 epochs.
        assert!(verifier.maybe_rotate_commitment(1).is_none());
        let old_commitment = verifier.commitment();
        let msg = verifier.maybe_rotate_commitment(2).expect("chain exhausted");
        assert_ne!(verifier.commitment(), old_commitment);
        match msg {
            Packet::CommitmentRotate(m) => {
                assert_eq!(m.open(&old_commitment), Some(verifier.commitment()));
            }
            _ => panic!("wrong packet kind"),
        }
    }
}
