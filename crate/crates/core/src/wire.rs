//! Bit-exact wire formats for the protocol's packet types, plus the
//! encrypt-then-MAC layering and the prover secret-block layouts.
//!
//! Every layout is big-endian with a 1-byte type tag prefix:
//!
//! | tag | message            | layout                                                          |
//! |-----|--------------------|-----------------------------------------------------------------|
//! | 1   | NonceUpdate        | tag, epoch u32, n_new 32, mac 32                                |
//! | 2   | AttestRequest      | tag, epoch u32, ct_len u16, ct, mac 32                          |
//! | 3   | KeyDisclose        | tag, epoch u32, key_index u8, key 32  (exactly 38 bytes)        |
//! | 4   | Ack                | tag, epoch u32, child 3, parent 3, mac 32                       |
//! | 5   | ReportUp           | tag, epoch u32, sender 3, parent 3, dev_num u32, bitmap,        |
//! |     |                    | attest_xor 32, cluster_cnt u8, clusters, mac 32                 |
//! | 6   | GroupSecretUpdate  | tag, rotation u32, cluster u8, ct 72                            |
//! | 7   | ClusterRekey       | tag, rotation u32, cluster u8, count u16, entries (id 3, ct 20) |
//! | 8   | CommitmentRotate   | tag, rotation u32, ct 40, mac 32                                |
//!
//! ReportUp clusters: per cluster `cluster u8, run_cnt u16, runs (start 3,
//! end 3)`. The presence bitmap is the exact n-bit vector (LSB-first per
//! byte). MACs cover every byte that precedes them. Encrypted payloads carry
//! a truncated inner hash so a wrong-key decryption is detected
//! structurally; authenticity comes from the outer MAC where one exists and
//! from key possession otherwise.

use crate::crypto::{self, Digest, SymKey16, SymKey32};
use crate::device::{ClusterId, DeviceId};
use crate::keychain::{self, RotationPayload};
use crate::report::{AggregateReport, IdRuns, PresenceVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

type Result<T> = std::result::Result<T, WireError>;

pub const TAG_NONCE_UPDATE: u8 = 1;
pub const TAG_ATTEST_REQUEST: u8 = 2;
pub const TAG_KEY_DISCLOSE: u8 = 3;
pub const TAG_ACK: u8 = 4;
pub const TAG_REPORT_UP: u8 = 5;
pub const TAG_GROUP_SECRET_UPDATE: u8 = 6;
pub const TAG_CLUSTER_REKEY: u8 = 7;
pub const TAG_COMMITMENT_ROTATE: u8 = 8;

/// Wire sentinel for "no parent".
const NO_PARENT: [u8; 3] = [0xFF, 0xFF, 0xFF];

/// CTR initialization vector: epoch (or rotation sequence), sub-interval,
/// message type, and a message-class-specific discriminator. Unique per
/// (key, message) across the protocol's key usage.
pub fn make_iv(epoch: u32, interval: u8, msg_type: u8, aux: u32) -> [u8; 16] {
    let mut iv = [0u8; 16];
    iv[..4].copy_from_slice(&epoch.to_be_bytes());
    iv[4] = interval;
    iv[5] = msg_type;
    iv[6..10].copy_from_slice(&aux.to_be_bytes());
    iv
}

const ATTEST_BODY_CHECK_LEN: usize = 8;
const GROUP_UPDATE_CHECK_LEN: usize = 8;
const REKEY_CHECK_LEN: usize = 4;
pub const GROUP_UPDATE_CT_LEN: usize = 64 + GROUP_UPDATE_CHECK_LEN;
pub const REKEY_ENTRY_CT_LEN: usize = 16 + REKEY_CHECK_LEN;
pub const REKEY_ENTRY_LEN: usize = 3 + REKEY_ENTRY_CT_LEN;
pub const ROTATE_CT_LEN: usize = 40;
pub const KEY_DISCLOSE_LEN: usize = 38;

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// Sub-interval-0 broadcast: the fresh random value driving the first nonce
/// update, MAC'd with a still-secret session key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonceUpdateMsg {
    pub epoch: u32,
    pub n_new: SymKey32,
    pub mac_tag: Digest,
}

impl NonceUpdateMsg {
    pub fn seal(epoch: u32, n_new: SymKey32, session_key: &SymKey32) -> NonceUpdateMsg {
        let mut msg = NonceUpdateMsg { epoch, n_new, mac_tag: Digest::ZERO };
        msg.mac_tag = crypto::mac(session_key.as_bytes(), &msg.mac_input()).unwrap();
        msg
    }

    pub fn verify(&self, session_key: &SymKey32) -> bool {
        crypto::mac(session_key.as_bytes(), &self.mac_input()).unwrap() == self.mac_tag
    }

    fn mac_input(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(37);
        b.push(TAG_NONCE_UPDATE);
        b.extend_from_slice(&self.epoch.to_be_bytes());
        b.extend_from_slice(self.n_new.as_bytes());
        b
    }
}

/// Decrypted attestation-request body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestBody {
    pub n_new: SymKey32,
    pub dev_num: u32,
    /// Clusters that must report software integrity this epoch.
    pub attest_now: Vec<ClusterId>,
    /// Clusters that must recompute their memory digest afterwards.
    pub precompute: Vec<ClusterId>,
}

impl AttestBody {
    fn core_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(38 + self.attest_now.len() + self.precompute.len());
        b.extend_from_slice(self.n_new.as_bytes());
        b.extend_from_slice(&self.dev_num.to_be_bytes());
        b.push(self.attest_now.len() as u8);
        b.extend(self.attest_now.iter().map(|c| c.0));
        b.push(self.precompute.len() as u8);
        b.extend(self.precompute.iter().map(|c| c.0));
        b
    }

    fn plaintext(&self) -> Vec<u8> {
        let mut b = self.core_bytes();
        let check = crypto::hash_concat(&[b"attest-body-check", &b]);
        b.extend_from_slice(&check.as_bytes()[..ATTEST_BODY_CHECK_LEN]);
        b
    }

    fn from_plaintext(p: &[u8]) -> Option<AttestBody> {
        if p.len() < 38 + ATTEST_BODY_CHECK_LEN {
            return None;
        }
        let (core, check) = p.split_at(p.len() - ATTEST_BODY_CHECK_LEN);
        let expect = crypto::hash_concat(&[b"attest-body-check", core]);
        if check != &expect.as_bytes()[..ATTEST_BODY_CHECK_LEN] {
            return None;
        }
        let n_new = SymKey32::from_slice(&core[..32])?;
        let dev_num = u32::from_be_bytes(core[32..36].try_into().ok()?);
        let send_cnt = core[36] as usize;
        let rest = &core[37..];
        if rest.len() < send_cnt + 1 {
            return None;
        }
        let attest_now = rest[..send_cnt].iter().map(|&c| ClusterId(c)).collect();
        let calc_cnt = rest[send_cnt] as usize;
        let calc = &rest[send_cnt + 1..];
        if calc.len() != calc_cnt {
            return None;
        }
        let precompute = calc.iter().map(|&c| ClusterId(c)).collect();
        Some(AttestBody { n_new, dev_num, attest_now, precompute })
    }
}

/// Sub-interval-1 broadcast: the encrypted attestation request, MAC'd with
/// the interval's session key over the ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestRequestMsg {
    pub epoch: u32,
    pub ciphertext: Vec<u8>,
    pub mac_tag: Digest,
}

impl AttestRequestMsg {
    pub fn seal(
        epoch: u32,
        body: &AttestBody,
        enc_key: &SymKey16,
        session_key: &SymKey32,
    ) -> AttestRequestMsg {
        let iv = make_iv(epoch, 1, TAG_ATTEST_REQUEST, 0);
        let ciphertext = crypto::encrypt(enc_key, &iv, &body.plaintext());
        let mut msg = AttestRequestMsg { epoch, ciphertext, mac_tag: Digest::ZERO };
        msg.mac_tag = crypto::mac(session_key.as_bytes(), &msg.mac_input()).unwrap();
        msg
    }

    pub fn verify(&self, session_key: &SymKey32) -> bool {
        crypto::mac(session_key.as_bytes(), &self.mac_input()).unwrap() == self.mac_tag
    }

    /// Decrypt and structurally validate the body. `None` means the key was
    /// wrong (a stale-nonce derivation) or the plaintext was mangled.
    pub fn open(&self, enc_key: &SymKey16) -> Option<AttestBody> {
        let iv = make_iv(self.epoch, 1, TAG_ATTEST_REQUEST, 0);
        let plain = crypto::decrypt(enc_key, &iv, &self.ciphertext);
        AttestBody::from_plaintext(&plain)
    }

    fn mac_input(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(7 + self.ciphertext.len());
        b.push(TAG_ATTEST_REQUEST);
        b.extend_from_slice(&self.epoch.to_be_bytes());
        b.extend_from_slice(&(self.ciphertext.len() as u16).to_be_bytes());
        b.extend_from_slice(&self.ciphertext);
        b
    }
}

/// Plaintext disclosure of a session key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyDiscloseMsg {
    pub epoch: u32,
    pub key_index: u8,
    pub key: SymKey32,
}

/// One-shot parent acknowledgement, MAC'd with the inter-prover link key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckMsg {
    pub epoch: u32,
    pub child: DeviceId,
    pub parent: DeviceId,
    pub mac_tag: Digest,
}

impl AckMsg {
    pub fn seal(epoch: u32, child: DeviceId, parent: DeviceId, link_key: &Digest) -> AckMsg {
        let mut msg = AckMsg { epoch, child, parent, mac_tag: Digest::ZERO };
        msg.mac_tag = crypto::mac(link_key.as_bytes(), &msg.mac_input()).unwrap();
        msg
    }

    pub fn verify(&self, link_key: &Digest) -> bool {
        crypto::mac(link_key.as_bytes(), &self.mac_input()).unwrap() == self.mac_tag
    }

    fn mac_input(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(11);
        b.push(TAG_ACK);
        b.extend_from_slice(&self.epoch.to_be_bytes());
        b.extend_from_slice(&self.child.to_wire());
        b.extend_from_slice(&self.parent.to_wire());
        b
    }
}

/// Aggregated presence vector and attestation report, unicast to the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportUpMsg {
    pub epoch: u32,
    pub sender: DeviceId,
    pub parent: DeviceId,
    pub presence: PresenceVector,
    pub aggregate: AggregateReport,
    pub mac_tag: Digest,
}

impl ReportUpMsg {
    pub fn seal(
        epoch: u32,
        sender: DeviceId,
        parent: DeviceId,
        presence: PresenceVector,
        aggregate: AggregateReport,
        link_key: &Digest,
    ) -> ReportUpMsg {
        let mut msg = ReportUpMsg {
            epoch,
            sender,
            parent,
            presence,
            aggregate,
            mac_tag: Digest::ZERO,
        };
        msg.mac_tag = msg.compute_mac(link_key);
        msg
    }

    pub fn verify(&self, link_key: &Digest) -> bool {
        self.compute_mac(link_key) == self.mac_tag
    }

    fn compute_mac(&self, link_key: &Digest) -> Digest {
        let mut m = crypto::mac_stream(link_key.as_bytes()).unwrap();
        self.write_mac_input(&mut |chunk| m.update(chunk));
        m.finish()
    }

    fn write_mac_input(&self, sink: &mut dyn FnMut(&[u8])) {
        sink(&[TAG_REPORT_UP]);
        sink(&self.epoch.to_be_bytes());
        sink(&self.sender.to_wire());
        sink(&self.parent.to_wire());
        sink(&self.presence.dev_num().to_be_bytes());
        sink(&self.presence.bitmap_bytes());
        sink(self.aggregate.attest_xor.as_bytes());
        let clusters: Vec<_> = self.aggregate.clusters().collect();
        sink(&[clusters.len() as u8]);
        for (cid, runs) in clusters {
            sink(&[cid.0]);
            sink(&(runs.runs().len() as u16).to_be_bytes());
            for &(s, e) in runs.runs() {
                sink(&DeviceId(s).to_wire());
                sink(&DeviceId(e).to_wire());
            }
        }
    }

    /// Exact serialized length, computed without serializing (the simulator
    /// charges transmission time by this).
    pub fn wire_size(&self) -> usize {
        let runs_bytes: usize = self
            .aggregate
            .clusters()
            .map(|(_, runs)| 3 + 6 * runs.runs().len())
            .sum();
        1 + 4 + 3 + 3 + 4 + self.presence.byte_len() + 32 + 1 + runs_bytes + 32
    }
}

/// Post-compromise group-secret refresh for one healthy cluster (the new
/// nonce and commitment under the cluster key). No outer MAC: possession of
/// the cluster key both decrypts and vouches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSecretUpdateMsg {
    pub rotation: u32,
    pub cluster: ClusterId,
    pub ciphertext: Vec<u8>,
}

fn group_update_cipher_key(cluster_key: &SymKey16) -> SymKey16 {
    crypto::derive_key16(&[b"group-secret-update", &cluster_key.0])
}

impl GroupSecretUpdateMsg {
    pub fn seal(
        rotation: u32,
        cluster: ClusterId,
        new_nonce: &SymKey32,
        new_commitment: &SymKey32,
        cluster_key: &SymKey16,
    ) -> GroupSecretUpdateMsg {
        let mut plain = Vec::with_capacity(GROUP_UPDATE_CT_LEN);
        plain.extend_from_slice(new_nonce.as_bytes());
        plain.extend_from_slice(new_commitment.as_bytes());
        let check = crypto::hash_concat(&[b"group-update-check", &plain]);
        plain.extend_from_slice(&check.as_bytes()[..GROUP_UPDATE_CHECK_LEN]);
        let iv = make_iv(rotation, 0xFF, TAG_GROUP_SECRET_UPDATE, cluster.0 as u32);
        let ciphertext = crypto::encrypt(&group_update_cipher_key(cluster_key), &iv, &plain);
        GroupSecretUpdateMsg { rotation, cluster, ciphertext }
    }

    /// Returns (new nonce, new commitment) if the cluster key decrypts it.
    pub fn open(&self, cluster_key: &SymKey16) -> Option<(SymKey32, SymKey32)> {
        if self.ciphertext.len() != GROUP_UPDATE_CT_LEN {
            return None;
        }
        let iv = make_iv(self.rotation, 0xFF, TAG_GROUP_SECRET_UPDATE, self.cluster.0 as u32);
        let plain = crypto::decrypt(&group_update_cipher_key(cluster_key), &iv, &self.ciphertext);
        let (core, check) = plain.split_at(64);
        let expect = crypto::hash_concat(&[b"group-update-check", core]);
        if check != &expect.as_bytes()[..GROUP_UPDATE_CHECK_LEN] {
            return None;
        }
        Some((
            SymKey32::from_slice(&core[..32]).unwrap(),
            SymKey32::from_slice(&core[32..]).unwrap(),
        ))
    }
}

/// Post-compromise cluster-key replacement: one ciphertext of the new
/// cluster key per healthy member, all appended into one broadcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterRekeyMsg {
    pub rotation: u32,
    pub cluster: ClusterId,
    /// (device id, ciphertext of the new cluster key under that device's
    /// personal auth key), sorted by device id.
    pub entries: Vec<(DeviceId, [u8; REKEY_ENTRY_CT_LEN])>,
}

impl ClusterRekeyMsg {
    pub fn seal(
        rotation: u32,
        cluster: ClusterId,
        members: &[(DeviceId, SymKey16)],
        new_cluster_key: &SymKey16,
    ) -> ClusterRekeyMsg {
        let mut entries = Vec::with_capacity(members.len());
        for (id, auth_key) in members {
            let mut plain = Vec::with_capacity(REKEY_ENTRY_CT_LEN);
            plain.extend_from_slice(&new_cluster_key.0);
            let check =
                crypto::hash_concat(&[b"rekey-check", &new_cluster_key.0, &id.to_wire()]);
            plain.extend_from_slice(&check.as_bytes()[..REKEY_CHECK_LEN]);
            let iv = make_iv(rotation, 0xFF, TAG_CLUSTER_REKEY, id.0);
            let ct = crypto::encrypt(auth_key, &iv, &plain);
            entries.push((*id, ct.try_into().unwrap()));
        }
        entries.sort_by_key(|(id, _)| *id);
        ClusterRekeyMsg { rotation, cluster, entries }
    }

    /// A member scans for its own entry and decrypts with its auth key.
    pub fn open_for(&self, id: DeviceId, auth_key: &SymKey16) -> Option<SymKey16> {
        let idx = self.entries.binary_search_by_key(&id, |(d, _)| *d).ok()?;
        let iv = make_iv(self.rotation, 0xFF, TAG_CLUSTER_REKEY, id.0);
        let plain = crypto::decrypt(auth_key, &iv, &self.entries[idx].1);
        let key = SymKey16(plain[..16].try_into().unwrap());
        let check = crypto::hash_concat(&[b"rekey-check", &key.0, &id.to_wire()]);
        if plain[16..] != check.as_bytes()[..REKEY_CHECK_LEN] {
            return None;
        }
        Some(key)
    }

    pub fn wire_size(&self) -> usize {
        1 + 4 + 1 + 2 + self.entries.len() * REKEY_ENTRY_LEN
    }
}

/// Keychain refresh between epochs: the next commitment under the old one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitmentRotateMsg {
    pub rotation: u32,
    pub payload: RotationPayload,
}

impl CommitmentRotateMsg {
    pub fn seal(
        rotation: u32,
        old_commitment: &SymKey32,
        new_commitment: &SymKey32,
    ) -> CommitmentRotateMsg {
        let iv = make_iv(rotation, 0xFF, TAG_COMMITMENT_ROTATE, 0);
        CommitmentRotateMsg {
            rotation,
            payload: keychain::rotate_commitment(old_commitment, new_commitment, &iv),
        }
    }

    pub fn open(&self, old_commitment: &SymKey32) -> Option<SymKey32> {
        let iv = make_iv(self.rotation, 0xFF, TAG_COMMITMENT_ROTATE, 0);
        keychain::apply_rotation(&self.payload, old_commitment, &iv).ok()
    }
}

// ---------------------------------------------------------------------------
// Packet: the tagged union flowing through the network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    NonceUpdate(NonceUpdateMsg),
    AttestRequest(AttestRequestMsg),
    KeyDisclose(KeyDiscloseMsg),
    Ack(AckMsg),
    ReportUp(ReportUpMsg),
    GroupSecretUpdate(GroupSecretUpdateMsg),
    ClusterRekey(ClusterRekeyMsg),
    CommitmentRotate(CommitmentRotateMsg),
}

impl Packet {
    pub fn tag(&self) -> u8 {
        match self {
            Packet::NonceUpdate(_) => TAG_NONCE_UPDATE,
            Packet::AttestRequest(_) => TAG_ATTEST_REQUEST,
            Packet::KeyDisclose(_) => TAG_KEY_DISCLOSE,
            Packet::Ack(_) => TAG_ACK,
            Packet::ReportUp(_) => TAG_REPORT_UP,
            Packet::GroupSecretUpdate(_) => TAG_GROUP_SECRET_UPDATE,
            Packet::ClusterRekey(_) => TAG_CLUSTER_REKEY,
            Packet::CommitmentRotate(_) => TAG_COMMITMENT_ROTATE,
        }
    }

    /// Exact serialized length in bytes.
    pub fn wire_size(&self) -> usize {
        match self {
            Packet::NonceUpdate(_) => 1 + 4 + 32 + 32,
            Packet::AttestRequest(m) => 1 + 4 + 2 + m.ciphertext.len() + 32,
            Packet::KeyDisclose(_) => KEY_DISCLOSE_LEN,
            Packet::Ack(_) => 1 + 4 + 3 + 3 + 32,
            Packet::ReportUp(m) => m.wire_size(),
            Packet::GroupSecretUpdate(m) => 1 + 4 + 1 + m.ciphertext.len(),
            Packet::ClusterRekey(m) => m.wire_size(),
            Packet::CommitmentRotate(m) => 1 + 4 + m.payload.ciphertext.len() + 32,
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_size());
        match self {
            Packet::NonceUpdate(m) => {
                out.extend_from_slice(&m.mac_input());
                out.extend_from_slice(m.mac_tag.as_bytes());
            }
            Packet::AttestRequest(m) => {
                out.extend_from_slice(&m.mac_input());
                out.extend_from_slice(m.mac_tag.as_bytes());
            }
            Packet::KeyDisclose(m) => {
                out.push(TAG_KEY_DISCLOSE);
                out.extend_from_slice(&m.epoch.to_be_bytes());
                out.push(m.key_index);
                out.extend_from_slice(m.key.as_bytes());
            }
            Packet::Ack(m) => {
                out.extend_from_slice(&m.mac_input());
                out.extend_from_slice(m.mac_tag.as_bytes());
            }
            Packet::ReportUp(m) => {
                m.write_mac_input(&mut |chunk| out.extend_from_slice(chunk));
                out.extend_from_slice(m.mac_tag.as_bytes());
            }
            Packet::GroupSecretUpdate(m) => {
                out.push(TAG_GROUP_SECRET_UPDATE);
                out.extend_from_slice(&m.rotation.to_be_bytes());
                out.push(m.cluster.0);
                out.extend_from_slice(&m.ciphertext);
            }
            Packet::ClusterRekey(m) => {
                out.push(TAG_CLUSTER_REKEY);
                out.extend_from_slice(&m.rotation.to_be_bytes());
                out.push(m.cluster.0);
                out.extend_from_slice(&(m.entries.len() as u16).to_be_bytes());
                for (id, ct) in &m.entries {
                    out.extend_from_slice(&id.to_wire());
                    out.extend_from_slice(ct);
                }
            }
            Packet::CommitmentRotate(m) => {
                out.push(TAG_COMMITMENT_ROTATE);
                out.extend_from_slice(&m.rotation.to_be_bytes());
                out.extend_from_slice(&m.payload.ciphertext);
                out.extend_from_slice(m.payload.mac_tag.as_bytes());
            }
        }
        debug_assert_eq!(out.len(), self.wire_size());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Packet> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let pkt = match tag {
            TAG_NONCE_UPDATE => {
                let epoch = r.u32()?;
                let n_new = SymKey32(r.arr::<32>()?);
                let mac_tag = Digest(r.arr::<32>()?);
                Packet::NonceUpdate(NonceUpdateMsg { epoch, n_new, mac_tag })
            }
            TAG_ATTEST_REQUEST => {
                let epoch = r.u32()?;
                let ct_len = r.u16()? as usize;
                let ciphertext = r.bytes(ct_len)?.to_vec();
                let mac_tag = Digest(r.arr::<32>()?);
                Packet::AttestRequest(AttestRequestMsg { epoch, ciphertext, mac_tag })
            }
            TAG_KEY_DISCLOSE => {
                let epoch = r.u32()?;
                let key_index = r.u8()?;
                let key = SymKey32(r.arr::<32>()?);
                Packet::KeyDisclose(KeyDiscloseMsg { epoch, key_index, key })
            }
            TAG_ACK => {
                let epoch = r.u32()?;
                let child = DeviceId::from_wire(r.arr::<3>()?);
                let parent = DeviceId::from_wire(r.arr::<3>()?);
                let mac_tag = Digest(r.arr::<32>()?);
                Packet::Ack(AckMsg { epoch, child, parent, mac_tag })
            }
            TAG_REPORT_UP => {
                let epoch = r.u32()?;
                let sender = DeviceId::from_wire(r.arr::<3>()?);
                let parent = DeviceId::from_wire(r.arr::<3>()?);
                let dev_num = r.u32()?;
                if dev_num == 0 || dev_num > crate::device::DEVICE_ID_MAX {
                    return Err(WireError::Malformed("dev_num out of range"));
                }
                let bitmap = r.bytes(dev_num.div_ceil(8) as usize)?;
                let presence = PresenceVector::from_bitmap(dev_num, bitmap)
                    .ok_or(WireError::Malformed("presence bitmap padding"))?;
                let attest_xor = Digest(r.arr::<32>()?);
                let cluster_cnt = r.u8()? as usize;
                let mut parts = Vec::with_capacity(cluster_cnt);
                for _ in 0..cluster_cnt {
                    let cid = ClusterId(r.u8()?);
                    let run_cnt = r.u16()? as usize;
                    let mut runs = Vec::with_capacity(run_cnt);
                    for _ in 0..run_cnt {
                        let s = DeviceId::from_wire(r.arr::<3>()?).0;
                        let e = DeviceId::from_wire(r.arr::<3>()?).0;
                        if s > e {
                            return Err(WireError::Malformed("inverted id run"));
                        }
                        runs.push((s, e));
                    }
                    parts.push((cid, IdRuns::from_runs(runs)));
                }
                let aggregate = AggregateReport::from_parts(attest_xor, parts);
                let mac_tag = Digest(r.arr::<32>()?);
                Packet::ReportUp(ReportUpMsg {
                    epoch,
                    sender,
                    parent,
                    presence,
                    aggregate,
                    mac_tag,
                })
            }
            TAG_GROUP_SECRET_UPDATE => {
                let rotation = r.u32()?;
                let cluster = ClusterId(r.u8()?);
                let ciphertext = r.bytes(GROUP_UPDATE_CT_LEN)?.to_vec();
                Packet::GroupSecretUpdate(GroupSecretUpdateMsg { rotation, cluster, ciphertext })
            }
            TAG_CLUSTER_REKEY => {
                let rotation = r.u32()?;
                let cluster = ClusterId(r.u8()?);
                let count = r.u16()? as usize;
                let mut entries = Vec::with_capacity(count);
                for _ in 0..count {
                    let id = DeviceId::from_wire(r.arr::<3>()?);
                    let ct = r.arr::<REKEY_ENTRY_CT_LEN>()?;
                    entries.push((id, ct));
                }
                Packet::ClusterRekey(ClusterRekeyMsg { rotation, cluster, entries })
            }
            TAG_COMMITMENT_ROTATE => {
                let rotation = r.u32()?;
                let ciphertext = r.bytes(ROTATE_CT_LEN)?.to_vec();
                let mac_tag = Digest(r.arr::<32>()?);
                Packet::CommitmentRotate(CommitmentRotateMsg {
                    rotation,
                    payload: RotationPayload { ciphertext, mac_tag },
                })
            }
            _ => return Err(WireError::Malformed("unknown type tag")),
        };
        if !r.at_end() {
            return Err(WireError::Malformed("trailing bytes"));
        }
        Ok(pkt)
    }

    /// Content digest used for flood duplicate suppression.
    pub fn content_digest(&self) -> Digest {
        crypto::hash(&self.serialize())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Malformed("truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.arr::<2>()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.arr::<4>()?))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

// ---------------------------------------------------------------------------
// Prover secret blocks
// ---------------------------------------------------------------------------

pub const PERSISTENT_BLOCK_LEN: usize = 153;
pub const MUTABLE_BLOCK_LEN: usize = 64;

/// The write-protected per-device block: identities, personal keys, group
/// secrets, and the reference memory digest. Exactly 153 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistentSecrets {
    pub id: DeviceId,
    pub parent: Option<DeviceId>,
    pub cluster: ClusterId,
    pub auth_key: SymKey16,
    pub integrity_key: SymKey16,
    pub cluster_key: SymKey16,
    pub commitment: SymKey32,
    pub nonce: SymKey32,
    pub reference_digest: Digest,
}

impl PersistentSecrets {
    pub fn serialize(&self) -> [u8; PERSISTENT_BLOCK_LEN] {
        let mut out = [0u8; PERSISTENT_BLOCK_LEN];
        let mut w = Writer(&mut out);
        w.put(&self.id.to_wire());
        w.put(&self.parent.map_or(NO_PARENT, |p| p.to_wire()));
        // Cluster ids are stored in the same 3-byte slot as device ids.
        w.put(&[0, 0, self.cluster.0]);
        w.put(&self.auth_key.0);
        w.put(&self.integrity_key.0);
        w.put(&self.cluster_key.0);
        w.put(self.commitment.as_bytes());
        w.put(self.nonce.as_bytes());
        w.put(self.reference_digest.as_bytes());
        w.finish();
        out
    }

    pub fn deserialize(b: &[u8; PERSISTENT_BLOCK_LEN]) -> PersistentSecrets {
        let parent_raw: [u8; 3] = b[3..6].try_into().unwrap();
        PersistentSecrets {
            id: DeviceId::from_wire(b[..3].try_into().unwrap()),
            parent: (parent_raw != NO_PARENT).then(|| DeviceId::from_wire(parent_raw)),
            cluster: ClusterId(b[8]),
            auth_key: SymKey16(b[9..25].try_into().unwrap()),
            integrity_key: SymKey16(b[25..41].try_into().unwrap()),
            cluster_key: SymKey16(b[41..57].try_into().unwrap()),
            commitment: SymKey32::from_slice(&b[57..89]).unwrap(),
            nonce: SymKey32::from_slice(&b[89..121]).unwrap(),
            reference_digest: Digest::from_slice(&b[121..153]).unwrap(),
        }
    }
}

/// The mutable per-device block: the precomputed memory digest and the last
/// authenticated session key. Exactly 64 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutableSecrets {
    pub cached_digest: Digest,
    pub last_session_key: SymKey32,
}

impl MutableSecrets {
    pub fn serialize(&self) -> [u8; MUTABLE_BLOCK_LEN] {
        let mut out = [0u8; MUTABLE_BLOCK_LEN];
        out[..32].copy_from_slice(self.cached_digest.as_bytes());
        out[32..].copy_from_slice(self.last_session_key.as_bytes());
        out
    }

    pub fn deserialize(b: &[u8; MUTABLE_BLOCK_LEN]) -> MutableSecrets {
        MutableSecrets {
            cached_digest: Digest::from_slice(&b[..32]).unwrap(),
            last_session_key: SymKey32::from_slice(&b[32..]).unwrap(),
        }
    }
}

struct Writer<'a>(&'a mut [u8]);

impl Writer<'_> {
    fn put(&mut self, bytes: &[u8]) {
        let buf = std::mem::take(&mut self.0);
        buf[..bytes.len()].copy_from_slice(bytes);
        self.0 = &mut buf[bytes.len()..];
    }

    fn finish(self) {
        assert!(self.0.is_empty(), "block layout fully written");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_report() -> ReportUpMsg {
        let mut presence = PresenceVector::new(20);
        for id in [1u32, 2, 3, 9, 10, 11, 20] {
            presence.set(DeviceId(id));
        }
        let mut agg = AggregateReport::empty();
        agg.add(ClusterId(0), DeviceId(2), crypto::hash(b"a"));
        agg.add(ClusterId(0), DeviceId(3), crypto::hash(b"b"));
        agg.add(ClusterId(1), DeviceId(9), crypto::hash(b"c"));
        ReportUpMsg::seal(
            4,
            DeviceId(2),
            DeviceId(1),
            presence,
            agg,
            &crypto::hash(b"link"),
        )
    }

    #[test]
    fn key_disclose_is_exactly_38_bytes() {
        let p = Packet::KeyDisclose(KeyDiscloseMsg {
            epoch: 7,
            key_index: 2,
            key: SymKey32([5; 32]),
        });
        assert_eq!(p.wire_size(), 38);
        assert_eq!(p.serialize().len(), 38);
    }

    #[test]
    fn roundtrip_every_type() {
        let link = crypto::hash(b"link");
        let k = SymKey32([3; 32]);
        let enc = SymKey16([9; 16]);
        let body = AttestBody {
            n_new: SymKey32([1; 32]),
            dev_num: 20,
            attest_now: vec![ClusterId(0), ClusterId(3)],
            precompute: vec![ClusterId(1)],
        };
        let packets = vec![
            Packet::NonceUpdate(NonceUpdateMsg::seal(3, SymKey32([2; 32]), &k)),
            Packet::AttestRequest(AttestRequestMsg::seal(3, &body, &enc, &k)),
            Packet::KeyDisclose(KeyDiscloseMsg { epoch: 3, key_index: 1, key: k }),
            Packet::Ack(AckMsg::seal(3, DeviceId(5), DeviceId(2), &link)),
            Packet::ReportUp(sample_report()),
            Packet::GroupSecretUpdate(GroupSecretUpdateMsg::seal(
                1,
                ClusterId(2),
                &SymKey32([7; 32]),
                &SymKey32([8; 32]),
                &enc,
            )),
            Packet::ClusterRekey(ClusterRekeyMsg::seal(
                1,
                ClusterId(2),
                &[(DeviceId(4), SymKey16([1; 16])), (DeviceId(9), SymKey16([2; 16]))],
                &SymKey16([6; 16]),
            )),
            Packet::CommitmentRotate(CommitmentRotateMsg::seal(1, &k, &SymKey32([4; 32]))),
        ];
        for p in packets {
            let bytes = p.serialize();
            assert_eq!(bytes.len(), p.wire_size(), "{:?}", p.tag());
            assert_eq!(Packet::parse(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn attest_request_opens_only_with_right_key() {
        let body = AttestBody {
            n_new: SymKey32([1; 32]),
            dev_num: 100,
            attest_now: vec![ClusterId(0)],
            precompute: vec![],
        };
        let enc = SymKey16([9; 16]);
        let k = SymKey32([3; 32]);
        let msg = AttestRequestMsg::seal(5, &body, &enc, &k);
        assert!(msg.verify(&k));
        assert!(!msg.verify(&SymKey32([4; 32])));
        assert_eq!(msg.open(&enc).unwrap(), body);
        // Stale-nonce derivation: wrong key fails the structural check.
        assert!(msg.open(&SymKey16([8; 16])).is_none());
    }

    #[test]
    fn ciphertext_bitflip_fails_mac() {
        let body = AttestBody {
            n_new: SymKey32([1; 32]),
            dev_num: 10,
            attest_now: vec![],
            precompute: vec![],
        };
        let k = SymKey32([3; 32]);
        let mut msg = AttestRequestMsg::seal(5, &body, &SymKey16([9; 16]), &k);
        for i in 0..msg.ciphertext.len() {
            msg.ciphertext[i] ^= 0x01;
            assert!(!msg.verify(&k), "flip at byte {i} must break the MAC");
            msg.ciphertext[i] ^= 0x01;
        }
        assert!(msg.verify(&k));
    }

    #[test]
    fn rekey_targets_only_listed_members() {
        let new_key = SymKey16([0xAA; 16]);
        let a = (DeviceId(4), SymKey16([1; 16]));
        let b = (DeviceId(9), SymKey16([2; 16]));
        let msg = ClusterRekeyMsg::seal(2, ClusterId(1), &[a, b], &new_key);
        assert_eq!(msg.open_for(a.0, &a.1).unwrap(), new_key);
        assert_eq!(msg.open_for(b.0, &b.1).unwrap(), new_key);
        // Wrong key or unlisted device gets nothing.
        assert!(msg.open_for(a.0, &b.1).is_none());
        assert!(msg.open_for(DeviceId(5), &a.1).is_none());
    }

    #[test]
    fn secret_blocks_have_pinned_sizes() {
        let p = PersistentSecrets {
            id: DeviceId(12),
            parent: Some(DeviceId(3)),
            cluster: ClusterId(1),
            auth_key: SymKey16([1; 16]),
            integrity_key: SymKey16([2; 16]),
            cluster_key: SymKey16([3; 16]),
            commitment: SymKey32([4; 32]),
            nonce: SymKey32([5; 32]),
            reference_digest: crypto::hash(b"image"),
        };
        let bytes = p.serialize();
        assert_eq!(bytes.len(), 153);
        assert_eq!(PersistentSecrets::deserialize(&bytes), p);

        let none_parent = PersistentSecrets { parent: None, ..p };
        let bytes = none_parent.serialize();
        assert_eq!(PersistentSecrets::deserialize(&bytes).parent, None);

        let m = MutableSecrets {
            cached_digest: crypto::hash(b"image"),
            last_session_key: SymKey32([6; 32]),
        };
        let bytes = m.serialize();
        assert_eq!(bytes.len(), 64);
        assert_eq!(MutableSecrets::deserialize(&bytes), m);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(Packet::parse(&[]).is_err());
        assert!(Packet::parse(&[0xEE, 1, 2, 3]).is_err());
        let good = Packet::KeyDisclose(KeyDiscloseMsg {
            epoch: 1,
            key_index: 1,
            key: SymKey32([0; 32]),
        })
        .serialize();
        assert!(Packet::parse(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(Packet::parse(&trailing).is_err());
    }

    proptest! {
        #[test]
        fn report_roundtrip_fuzzed(present in proptest::collection::btree_set(1u32..=50, 1..40),
                                   members in proptest::collection::btree_set(1u32..=50, 0..20),
                                   epoch in 0u32..100) {
            let mut presence = PresenceVector::new(50);
            for &id in &present {
                presence.set(DeviceId(id));
            }
            let mut agg = AggregateReport::empty();
            for &id in &members {
                let cluster = ClusterId((id % 4) as u8);
                agg.add(cluster, DeviceId(id), crypto::hash(&id.to_be_bytes()));
            }
            let link = crypto::hash(b"k");
            let msg = ReportUpMsg::seal(epoch, DeviceId(1), DeviceId::VERIFIER,
                                        presence, agg, &link);
            let p = Packet::ReportUp(msg.clone());
            let bytes = p.serialize();
            prop_assert_eq!(bytes.len(), p.wire_size());
            let back = Packet::parse(&bytes).unwrap();
            prop_assert_eq!(&back, &p);
            if let Packet::ReportUp(m2) = back {
                prop_assert!(m2.verify(&link));
                prop_assert_eq!(m2.aggregate.id_list(), msg.aggregate.id_list());
            }
        }
    }
}
