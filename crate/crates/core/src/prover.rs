//! The per-device state machine.
//!
//! A prover buffers broadcasts it cannot yet authenticate, re-broadcasts
//! every fresh admissible packet exactly once, authenticates disclosed
//! session keys against its cursor (recovering skipped intermediates), then
//! executes the buffered requests in sub-interval order: the chained nonce
//! update first, the encrypted attestation request second. Hearing the
//! second session key adopts a parent, forming the spanning tree; reports
//! aggregate presence bits and attest values up that tree.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::crypto::{self, Digest, SymKey16, SymKey32};
use crate::device::{ClusterId, DeviceId};
use crate::keychain::{KeyChain, KeyCursor};
use crate::machine::{Effect, Output, PlatformCosts, Pulse, TimerTag};
use crate::report::{AggregateReport, PresenceVector};
use crate::schedule::{EpochSchedule, LocalClock, Micros};
use crate::wire::{
    AckMsg, AttestBody, AttestRequestMsg, KeyDiscloseMsg, MutableSecrets, NonceUpdateMsg, Packet,
    PersistentSecrets, ReportUpMsg,
};

/// Inter-prover MAC key: `hash(commitment || nonce)` at the sender's state.
pub fn link_key(commitment: &SymKey32, nonce: &SymKey32) -> Digest {
    crypto::hash_concat(&[commitment.as_bytes(), nonce.as_bytes()])
}

/// Request-encryption key: the hash of the session key and the once-updated
/// nonce, truncated to cipher size.
pub fn derive_request_key(session_key: &SymKey32, nonce: &SymKey32) -> SymKey16 {
    crypto::derive_key16(&[session_key.as_bytes(), nonce.as_bytes()])
}

/// Timeouts governing spanning-tree formation and report aggregation.
#[derive(Debug, Clone, Copy)]
pub struct ProverConfig {
    /// How long after the parent decision to wait for child acks before
    /// concluding leafhood.
    pub ack_wait: Micros,
    /// How long after the parent decision to wait for child reports before
    /// sending a partial report.
    pub child_report_timeout: Micros,
}

impl Default for ProverConfig {
    fn default() -> Self {
        ProverConfig { ack_wait: 150_000, child_report_timeout: 2_000_000 }
    }
}

/// Per-epoch volatile context; replaced at the first packet of a new epoch.
#[derive(Debug, Clone)]
struct EpochCtx {
    epoch: u32,
    buffered_nonce_update: Option<NonceUpdateMsg>,
    buffered_request: Option<AttestRequestMsg>,
    first_update_done: bool,
    body: Option<AttestBody>,
    /// Best (arrival, sender) for parent adoption; earliest wins, then
    /// smaller id.
    parent_best: Option<(Micros, DeviceId)>,
    parent: Option<DeviceId>,
    ack_timer_set: bool,
    leaf_check_done: bool,
    deadline_passed: bool,
    children: BTreeSet<DeviceId>,
    reported: BTreeSet<DeviceId>,
    acc_presence: Option<PresenceVector>,
    acc_aggregate: AggregateReport,
    report_sent: bool,
    used_recovery: bool,
}

impl EpochCtx {
    fn new(epoch: u32) -> EpochCtx {
        EpochCtx {
            epoch,
            buffered_nonce_update: None,
            buffered_request: None,
            first_update_done: false,
            body: None,
            parent_best: None,
            parent: None,
            ack_timer_set: false,
            leaf_check_done: false,
            deadline_passed: false,
            children: BTreeSet::new(),
            reported: BTreeSet::new(),
            acc_presence: None,
            acc_aggregate: AggregateReport::empty(),
            report_sent: false,
            used_recovery: false,
        }
    }
}

/// End-of-epoch digest for the driver's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSummary {
    pub epoch: u32,
    pub sent_report: bool,
    pub decoded_request: bool,
    pub used_recovery: bool,
}

#[derive(Debug, Clone)]
pub struct ProverState {
    // Identity and persistent secrets.
    pub id: DeviceId,
    pub cluster: ClusterId,
    pub auth_key: SymKey16,
    pub integrity_key: SymKey16,
    pub cluster_key: SymKey16,
    pub commitment: SymKey32,
    pub nonce: SymKey32,
    pub reference_digest: Digest,

    // Mutable, unprotected state (the adversary may write these).
    pub cached_digest: Digest,
    pub memory_image: Vec<u8>,

    pub cursor: KeyCursor,
    pub clock: LocalClock,
    pub costs: PlatformCosts,
    pub config: ProverConfig,
    schedule: EpochSchedule,

    /// First epoch served by the current keychain.
    chain_start_epoch: u32,
    /// Session keys learned this chain: index -> (key, learned via recovery).
    known_keys: BTreeMap<u32, (SymKey32, bool)>,
    /// Highest group-secret rotation applied / cluster rekey applied.
    applied_rotation: u32,
    rekey_rotation: u32,

    ctx: Option<EpochCtx>,
    seen: HashSet<Digest>,
}

impl ProverState {
    pub fn provision(
        secrets: PersistentSecrets,
        memory_image: Vec<u8>,
        schedule: EpochSchedule,
        clock: LocalClock,
        costs: PlatformCosts,
        config: ProverConfig,
    ) -> ProverState {
        let cached_digest = crypto::mac(&secrets.integrity_key.0, &memory_image).unwrap();
        ProverState {
            id: secrets.id,
            cluster: secrets.cluster,
            auth_key: secrets.auth_key,
            integrity_key: secrets.integrity_key,
            cluster_key: secrets.cluster_key,
            commitment: secrets.commitment,
            nonce: secrets.nonce,
            reference_digest: secrets.reference_digest,
            cached_digest,
            memory_image,
            cursor: KeyCursor::at_commitment(secrets.commitment),
            clock,
            costs,
            config,
            schedule,
            chain_start_epoch: 0,
            known_keys: BTreeMap::new(),
            applied_rotation: 0,
            rekey_rotation: 0,
            ctx: None,
            seen: HashSet::new(),
        }
    }

    pub fn current_link_key(&self) -> Digest {
        link_key(&self.commitment, &self.nonce)
    }

    pub fn persistent_block(&self) -> [u8; crate::wire::PERSISTENT_BLOCK_LEN] {
        PersistentSecrets {
            id: self.id,
            parent: self.ctx.as_ref().and_then(|c| c.parent),
            cluster: self.cluster,
            auth_key: self.auth_key,
            integrity_key: self.integrity_key,
            cluster_key: self.cluster_key,
            commitment: self.commitment,
            nonce: self.nonce,
            reference_digest: self.reference_digest,
        }
        .serialize()
    }

    pub fn mutable_block(&self) -> [u8; crate::wire::MUTABLE_BLOCK_LEN] {
        MutableSecrets {
            cached_digest: self.cached_digest,
            last_session_key: self.cursor.last_authenticated,
        }
        .serialize()
    }

    pub fn epoch_summary(&self) -> Option<EpochSummary> {
        self.ctx.as_ref().map(|c| EpochSummary {
            epoch: c.epoch,
            sent_report: c.report_sent,
            decoded_request: c.body.is_some(),
            used_recovery: c.used_recovery,
        })
    }

    pub fn parent(&self) -> Option<DeviceId> {
        self.ctx.as_ref().and_then(|c| c.parent)
    }

    pub fn children(&self) -> Vec<DeviceId> {
        self.ctx.as_ref().map(|c| c.children.iter().copied().collect()).unwrap_or_default()
    }

    /// Make sure the live context is for `epoch`, rolling the old one (and
    /// the duplicate cache) if the epoch advanced. False means the packet is
    /// from a past epoch.
    fn ensure_ctx(&mut self, epoch: u32) -> bool {
        match &self.ctx {
            Some(c) if c.epoch == epoch => true,
            Some(c) if c.epoch > epoch => false,
            _ => {
                self.ctx = Some(EpochCtx::new(epoch));
                self.seen.clear();
                true
            }
        }
    }

    // -----------------------------------------------------------------
    // Packet dispatch
    // -----------------------------------------------------------------

    pub fn on_packet(&mut self, packet: &Packet, from: DeviceId, now: Micros) -> Output {
        match packet {
            Packet::NonceUpdate(m) => self.on_nonce_update(packet, m, now),
            Packet::AttestRequest(m) => self.on_attest_request(packet, m, now),
            Packet::KeyDisclose(m) => self.on_key_disclose(packet, m, from, now),
            Packet::Ack(m) => self.on_ack(m, now),
            Packet::ReportUp(m) => self.on_report_up(m, now),
            Packet::GroupSecretUpdate(_) | Packet::ClusterRekey(_) | Packet::CommitmentRotate(_) => {
                self.on_control(packet, now)
            }
        }
    }

    /// Duplicate suppression by content digest. Returns true if fresh.
    fn fresh(&mut self, packet: &Packet) -> bool {
        self.seen.insert(packet.content_digest())
    }

    fn current_epoch(&self, now: Micros) -> Option<u64> {
        self.schedule.current_interval(self.clock.local(now)).ok().map(|s| s.epoch)
    }

    fn on_nonce_update(&mut self, packet: &Packet, m: &NonceUpdateMsg, now: Micros) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        if self.current_epoch(now) != Some(m.epoch as u64)
            || !self.schedule.packet_admissible(&self.clock, m.epoch as u64, 0, now)
        {
            out.effects.push(Effect::Note(Pulse::DroppedInadmissible));
            return out;
        }
        if !self.ensure_ctx(m.epoch) {
            out.effects.push(Effect::Note(Pulse::DroppedInadmissible));
            return out;
        }
        if !self.fresh(packet) {
            out.effects.push(Effect::Note(Pulse::DroppedDuplicate));
            return out;
        }
        let ctx = self.ctx.as_mut().unwrap();
        if ctx.buffered_nonce_update.is_none() {
            ctx.buffered_nonce_update = Some(m.clone());
        }
        let t = now + self.costs.forward;
        out.effects.push(Effect::Broadcast { packet: packet.clone(), at: t });
        out.busy_until = t;
        out
    }

    fn on_attest_request(&mut self, packet: &Packet, m: &AttestRequestMsg, now: Micros) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        if self.current_epoch(now) != Some(m.epoch as u64)
            || !self.schedule.packet_admissible(&self.clock, m.epoch as u64, 1, now)
        {
            out.effects.push(Effect::Note(Pulse::DroppedInadmissible));
            return out;
        }
        if !self.ensure_ctx(m.epoch) {
            out.effects.push(Effect::Note(Pulse::DroppedInadmissible));
            return out;
        }
        if !self.fresh(packet) {
            out.effects.push(Effect::Note(Pulse::DroppedDuplicate));
            return out;
        }
        let ctx = self.ctx.as_mut().unwrap();
        if ctx.buffered_request.is_none() {
            ctx.buffered_request = Some(m.clone());
        }
        let t = now + self.costs.forward;
        out.effects.push(Effect::Broadcast { packet: packet.clone(), at: t });
        out.busy_until = t;
        out
    }

    fn on_key_disclose(
        &mut self,
        packet: &Packet,
        m: &KeyDiscloseMsg,
        from: DeviceId,
        now: Micros,
    ) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        if m.key_index == 0 {
            out.effects.push(Effect::Note(Pulse::DroppedInadmissible));
            return out;
        }
        let (chain_off, interval) = KeyChain::key_slot(m.key_index as u32);
        let expected_epoch = self.chain_start_epoch.checked_add(chain_off);
        if expected_epoch != Some(m.epoch)
            || self.current_epoch(now) != Some(m.epoch as u64)
            || !self.schedule.key_arrival_plausible(&self.clock, m.epoch as u64, interval, now)
        {
            out.effects.push(Effect::Note(Pulse::DroppedInadmissible));
            return out;
        }

        // The second session key's transmitter is the parent candidate; ties
        // settle by earliest arrival then smaller sender id, so duplicates
        // still compete before being suppressed.
        if interval == 1 && self.ensure_ctx(m.epoch) {
            let ctx = self.ctx.as_mut().unwrap();
            let cand = (now, from);
            if ctx.parent.is_none() && ctx.parent_best.map_or(true, |best| cand < best) {
                ctx.parent_best = Some(cand);
            }
        }

        if !self.fresh(packet) {
            out.effects.push(Effect::Note(Pulse::DroppedDuplicate));
            return out;
        }

        // Forward per schedule before authenticating.
        let mut t = now + self.costs.forward;
        out.effects.push(Effect::Broadcast { packet: packet.clone(), at: t });

        let steps = (m.key_index as u32).saturating_sub(self.cursor.last_index);
        match self.cursor.authenticate(m.key, m.key_index as u32) {
            Ok(next) => {
                t += self.costs.session_key_auth * steps as u64;
                for (idx, key) in self.cursor.recover_intermediate(m.key, m.key_index as u32) {
                    self.known_keys.insert(idx, (key, true));
                }
                self.known_keys.insert(m.key_index as u32, (m.key, false));
                self.cursor = next;
                self.try_execute(&mut t, &mut out.effects);
                if interval == 1 {
                    if let Some(ctx) = self.ctx.as_mut().filter(|c| c.epoch == m.epoch) {
                        if !ctx.ack_timer_set {
                            ctx.ack_timer_set = true;
                            out.effects.push(Effect::Timer {
                                tag: TimerTag::AckDecision { epoch: m.epoch },
                                at: t,
                            });
                        }
                    }
                }
            }
            Err(_) => {
                out.effects.push(Effect::Note(Pulse::DroppedBadMac));
            }
        }
        out.busy_until = t;
        out
    }

    /// Deferred authentication and execution of buffered broadcasts, in
    /// sub-interval order. Advances `t` by the work actually performed.
    fn try_execute(&mut self, t: &mut Micros, effects: &mut Vec<Effect>) {
        let Some(ctx) = self.ctx.as_mut() else { return };
        let Some((k1_idx, k2_idx)) = ({
            let off = ctx.epoch.checked_sub(self.chain_start_epoch);
            off.map(KeyChain::epoch_keys)
        }) else {
            return;
        };

        if !ctx.first_update_done {
            if let (Some(pkt), Some(&(key, via_recovery))) =
                (&ctx.buffered_nonce_update, self.known_keys.get(&k1_idx))
            {
                *t += self.costs.mac_verify;
                if pkt.verify(&key) {
                    *t += self.costs.nonce_update;
                    self.nonce = SymKey32::from_digest(crypto::hash_concat(&[
                        self.nonce.as_bytes(),
                        pkt.n_new.as_bytes(),
                    ]));
                    ctx.first_update_done = true;
                    if via_recovery {
                        ctx.used_recovery = true;
                        effects.push(Effect::Note(Pulse::RecoveredViaSkip));
                    }
                } else {
                    ctx.buffered_nonce_update = None;
                    effects.push(Effect::Note(Pulse::DroppedBadMac));
                }
            }
        }

        if ctx.first_update_done && ctx.body.is_none() {
            if let (Some(pkt), Some(&(key, via_recovery))) =
                (&ctx.buffered_request, self.known_keys.get(&k2_idx))
            {
                *t += self.costs.attest_request_handle;
                if pkt.verify(&key) {
                    let enc_key = derive_request_key(&key, &self.nonce);
                    match pkt.open(&enc_key) {
                        Some(body) if body.dev_num >= self.id.0 => {
                            *t += self.costs.nonce_update;
                            self.nonce = SymKey32::from_digest(crypto::hash_concat(&[
                                self.nonce.as_bytes(),
                                body.n_new.as_bytes(),
                            ]));
                            if via_recovery {
                                ctx.used_recovery = true;
                                effects.push(Effect::Note(Pulse::RecoveredViaSkip));
                            }
                            ctx.body = Some(body);
                        }
                        _ => {
                            // Wrong derived key (stale nonce) or ill-formed
                            // body: stay silent this epoch.
                            ctx.buffered_request = None;
                        }
                    }
                } else {
                    ctx.buffered_request = None;
                    effects.push(Effect::Note(Pulse::DroppedBadMac));
                }
            }
        }
    }

    fn on_ack(&mut self, m: &AckMsg, now: Micros) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        let lk = self.current_link_key();
        let Some(ctx) = self.ctx.as_mut() else { return out };
        if m.parent != self.id || m.epoch != ctx.epoch {
            return out;
        }
        out.busy_until = now + self.costs.mac_verify;
        if !m.verify(&lk) {
            out.effects.push(Effect::Note(Pulse::DroppedBadMac));
            return out;
        }
        if ctx.report_sent {
            // Too late to matter; the subtree will surface as absent.
            return out;
        }
        ctx.children.insert(m.child);
        out
    }

    fn on_report_up(&mut self, m: &ReportUpMsg, now: Micros) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        let lk = self.current_link_key();
        let costs = self.costs;
        let Some(ctx) = self.ctx.as_mut() else { return out };
        if m.parent != self.id || m.epoch != ctx.epoch {
            return out;
        }
        let mut t = now + costs.mac_verify;
        if !m.verify(&lk) {
            out.effects.push(Effect::Note(Pulse::DroppedBadMac));
            out.busy_until = t;
            return out;
        }
        if ctx.report_sent || !ctx.children.contains(&m.sender) || ctx.reported.contains(&m.sender)
        {
            out.effects.push(Effect::Note(Pulse::LateChildReport));
            out.busy_until = t;
            return out;
        }
        if let Some(body) = &ctx.body {
            if m.presence.dev_num() != body.dev_num {
                out.effects.push(Effect::Note(Pulse::DroppedBadMac));
                out.busy_until = t;
                return out;
            }
        }
        ctx.reported.insert(m.sender);
        t += costs.vector_or(m.presence.byte_len());
        match &mut ctx.acc_presence {
            Some(acc) => acc.or_with(&m.presence),
            none => *none = Some(m.presence.clone()),
        }
        ctx.acc_aggregate.fold(&m.aggregate);

        // All awaited children in: the subtree is complete.
        if ctx.leaf_check_done && ctx.reported.len() == ctx.children.len() {
            self.build_report(&mut t, &mut out.effects);
        }
        out.busy_until = t;
        out
    }

    fn on_control(&mut self, packet: &Packet, now: Micros) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        if !self.fresh(packet) {
            out.effects.push(Effect::Note(Pulse::DroppedDuplicate));
            return out;
        }
        let mut t = now + self.costs.forward;
        out.effects.push(Effect::Broadcast { packet: packet.clone(), at: t });

        match packet {
            Packet::GroupSecretUpdate(m) => {
                if m.cluster == self.cluster && m.rotation > self.applied_rotation {
                    t += self.costs.attest_request_handle / 4; // small decrypt
                    if let Some((new_nonce, new_commitment)) = m.open(&self.cluster_key) {
                        self.nonce = new_nonce;
                        self.install_commitment(new_commitment, m.rotation);
                        self.applied_rotation = m.rotation;
                    }
                }
            }
            Packet::ClusterRekey(m) => {
                if m.cluster == self.cluster && m.rotation > self.rekey_rotation {
                    t += self.costs.attest_request_handle / 4;
                    if let Some(new_key) = m.open_for(self.id, &self.auth_key) {
                        self.cluster_key = new_key;
                        self.rekey_rotation = m.rotation;
                    }
                }
            }
            Packet::CommitmentRotate(m) => {
                if m.rotation > self.applied_rotation {
                    t += self.costs.mac_verify;
                    if let Some(new_commitment) = m.open(&self.commitment) {
                        self.install_commitment(new_commitment, m.rotation);
                        self.applied_rotation = m.rotation;
                    }
                }
            }
            _ => unreachable!("dispatched as control"),
        }
        out.busy_until = t;
        out
    }

    fn install_commitment(&mut self, new_commitment: SymKey32, first_epoch: u32) {
        self.commitment = new_commitment;
        self.cursor = KeyCursor::at_commitment(new_commitment);
        self.chain_start_epoch = first_epoch;
        self.known_keys.clear();
    }

    // -----------------------------------------------------------------
    // Timers
    // -----------------------------------------------------------------

    pub fn on_timer(&mut self, tag: TimerTag, now: Micros) -> Output {
        let mut out = Output { effects: vec![], busy_until: now };
        match tag {
            TimerTag::AckDecision { epoch } => {
                let id = self.id;
                let lk = self.current_link_key();
                let ack_wait = self.config.ack_wait;
                let Some(ctx) = self.ctx.as_mut().filter(|c| c.epoch == epoch) else {
                    return out;
                };
                if ctx.parent.is_some() {
                    return out;
                }
                let Some((_, parent)) = ctx.parent_best else { return out };
                ctx.parent = Some(parent);
                let ack = AckMsg::seal(epoch, id, parent, &lk);
                out.effects.push(Effect::Unicast {
                    to: parent,
                    packet: Packet::Ack(ack),
                    at: now,
                });
                out.effects.push(Effect::Timer {
                    tag: TimerTag::LeafCheck { epoch },
                    at: now + ack_wait,
                });
            }
            TimerTag::LeafCheck { epoch } => {
                let timeout = self.config.child_report_timeout;
                let Some(ctx) = self.ctx.as_mut().filter(|c| c.epoch == epoch) else {
                    return out;
                };
                ctx.leaf_check_done = true;
                if ctx.children.is_empty() || ctx.reported.len() == ctx.children.len() {
                    let mut t = now;
                    self.build_report(&mut t, &mut out.effects);
                    out.busy_until = t;
                } else {
                    out.effects.push(Effect::Timer {
                        tag: TimerTag::ReportDeadline { epoch },
                        at: now + timeout,
                    });
                }
            }
            TimerTag::ReportDeadline { epoch } => {
                if self.ctx.as_ref().is_some_and(|c| c.epoch == epoch && !c.report_sent) {
                    if let Some(ctx) = self.ctx.as_mut() {
                        ctx.deadline_passed = true;
                    }
                    let mut t = now;
                    self.build_report(&mut t, &mut out.effects);
                    out.busy_until = t;
                }
            }
        }
        out
    }

    /// Assemble and send this node's (aggregated) report, then run the
    /// post-report digest precomputation if this cluster was asked to.
    fn build_report(&mut self, t: &mut Micros, effects: &mut Vec<Effect>) {
        let id = self.id;
        let cluster = self.cluster;
        let lk = self.current_link_key();
        let costs = self.costs;
        let healthy = self.cached_digest == self.reference_digest;
        let attest = crypto::hash_concat(&[self.cached_digest.as_bytes(), self.nonce.as_bytes()]);

        let Some(ctx) = self.ctx.as_mut() else { return };
        if ctx.report_sent {
            return;
        }
        // Without a decoded request there is no vector length to use and no
        // report at all: the device stays silent and will appear absent.
        let (Some(body), Some(parent)) = (&ctx.body, ctx.parent) else { return };

        ctx.report_sent = true;
        *t += costs.report_prep;
        let mut presence = ctx
            .acc_presence
            .take()
            .unwrap_or_else(|| PresenceVector::new(body.dev_num));
        presence.set(id);
        let mut aggregate = std::mem::replace(&mut ctx.acc_aggregate, AggregateReport::empty());
        if body.attest_now.contains(&cluster) && healthy {
            aggregate.add(cluster, id, attest);
        }
        let report = ReportUpMsg::seal(ctx.epoch, id, parent, presence, aggregate, &lk);
        effects.push(Effect::Unicast { to: parent, packet: Packet::ReportUp(report), at: *t });

        if body.precompute.contains(&cluster) {
            // Charged after the report leaves; the refreshed digest feeds the
            // next epoch.
            *t += costs.digest_recompute;
            self.cached_digest = crypto::mac(&self.integrity_key.0, &self.memory_image).unwrap();
        }
    }
}
