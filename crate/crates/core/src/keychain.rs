//! The one-way keychain: the verifier generates `K_0..K_j` with
//! `K_{i-1} = F(K_i)`, commits `K_0` to every prover, and discloses later
//! keys in order. Provers authenticate a disclosed key by hash-walking down
//! to their last authenticated key, recovering any skipped intermediates on
//! the way.

use crate::crypto::{self, Digest, SymKey16, SymKey32};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeychainError {
    #[error("keychain length must be at least 1")]
    ChainTooShort,
    #[error("claimed index {claimed} does not advance past {current}")]
    StaleKey { claimed: u32, current: u32 },
    #[error("candidate key does not hash-walk to the last authenticated key")]
    ForgedKey,
    #[error("rotation payload failed authentication")]
    BadRotation,
}

/// The verifier-side chain. `keys[0]` is the public commitment, `keys[j]`
/// the randomly drawn head.
#[derive(Clone)]
pub struct KeyChain {
    keys: Vec<SymKey32>,
}

/// Two session keys are consumed per epoch (one per broadcast sub-interval),
/// so the default chain covers two epochs before a commitment rotation.
pub const DEFAULT_CHAIN_LEN: u32 = 4;
pub const KEYS_PER_EPOCH: u32 = 2;

/// Deterministic PRNG for the chain head: counter-mode hashing over the seed.
fn chain_head(seed: &[u8]) -> SymKey32 {
    SymKey32::from_digest(crypto::hash_concat(&[b"keychain-head", seed]))
}

impl KeyChain {
    /// Build a chain of length `j` from a seed: draw `K_j`, then hash down.
    pub fn generate(seed: &[u8], j: u32) -> Result<KeyChain, KeychainError> {
        if j == 0 {
            return Err(KeychainError::ChainTooShort);
        }
        let mut keys = vec![SymKey32([0u8; 32]); j as usize + 1];
        keys[j as usize] = chain_head(seed);
        for i in (0..j as usize).rev() {
            keys[i] = SymKey32::from_digest(crypto::hash(keys[i + 1].as_bytes()));
        }
        Ok(KeyChain { keys })
    }

    /// Chain length `j` (number of session keys, commitment excluded).
    pub fn len(&self) -> u32 {
        self.keys.len() as u32 - 1
    }

    /// The public commitment `K_0`.
    pub fn commitment(&self) -> SymKey32 {
        self.keys[0]
    }

    /// Session key `K_i`, `1 <= i <= j`.
    pub fn key(&self, i: u32) -> SymKey32 {
        self.keys[i as usize]
    }

    /// Which session keys epoch `offset` (0-based within this chain) uses:
    /// the nonce-update key and the attestation-request key.
    pub fn epoch_keys(offset: u32) -> (u32, u32) {
        (offset * KEYS_PER_EPOCH + 1, offset * KEYS_PER_EPOCH + 2)
    }

    /// Map a chain index to (epoch offset within the chain, sub-interval).
    pub fn key_slot(index: u32) -> (u32, u8) {
        debug_assert!(index >= 1);
        ((index - 1) / KEYS_PER_EPOCH, ((index - 1) % KEYS_PER_EPOCH) as u8)
    }

    /// How many whole epochs this chain can serve.
    pub fn epochs_available(&self) -> u32 {
        self.len() / KEYS_PER_EPOCH
    }
}

/// Prover-side authentication state: the last key this device verified
/// against the commitment, and its index (0 = the commitment itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyCursor {
    pub last_authenticated: SymKey32,
    pub last_index: u32,
}

impl KeyCursor {
    pub fn at_commitment(commitment: SymKey32) -> KeyCursor {
        KeyCursor { last_authenticated: commitment, last_index: 0 }
    }

    /// Authenticate a disclosed key claiming `claimed_index`: hashing it
    /// `claimed_index - last_index` times must land exactly on the last
    /// authenticated key. On success returns the advanced cursor.
    pub fn authenticate(
        &self,
        candidate: SymKey32,
        claimed_index: u32,
    ) -> Result<KeyCursor, KeychainError> {
        if claimed_index <= self.last_index {
            return Err(KeychainError::StaleKey {
                claimed: claimed_index,
                current: self.last_index,
            });
        }
        let mut walk = candidate;
        for _ in 0..(claimed_index - self.last_index) {
            walk = SymKey32::from_digest(crypto::hash(walk.as_bytes()));
        }
        if walk != self.last_authenticated {
            return Err(KeychainError::ForgedKey);
        }
        Ok(KeyCursor { last_authenticated: candidate, last_index: claimed_index })
    }

    /// Keys skipped between this cursor and an accepted later key, derived by
    /// hash-walking from the accepted key. Lets buffered packets from missed
    /// sub-intervals authenticate after the fact.
    pub fn recover_intermediate(
        &self,
        accepted: SymKey32,
        accepted_index: u32,
    ) -> Vec<(u32, SymKey32)> {
        debug_assert!(accepted_index > self.last_index);
        let span = accepted_index - self.last_index;
        let mut out = Vec::new();
        let mut walk = accepted;
        for step in 1..span {
            walk = SymKey32::from_digest(crypto::hash(walk.as_bytes()));
            out.push((accepted_index - step, walk));
        }
        out.reverse();
        out
    }
}

/// Commitment-rotation payload: the new `K_0` encrypted under a key derived
/// from the old one, authenticated with the old `K_0` as MAC key. An inner
/// check digest lets the receiver detect a wrong-key decryption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotationPayload {
    pub ciphertext: Vec<u8>,
    pub mac_tag: Digest,
}

const ROTATION_CHECK_LEN: usize = 8;

fn rotation_cipher_key(old_commitment: &SymKey32) -> SymKey16 {
    crypto::derive_key16(&[b"commitment-rotation", old_commitment.as_bytes()])
}

pub fn rotate_commitment(
    old_commitment: &SymKey32,
    new_commitment: &SymKey32,
    iv: &[u8; 16],
) -> RotationPayload {
    let check = crypto::hash_concat(&[b"rotation-check", new_commitment.as_bytes()]);
    let mut plain = Vec::with_capacity(32 + ROTATION_CHECK_LEN);
    plain.extend_from_slice(new_commitment.as_bytes());
    plain.extend_from_slice(&check.as_bytes()[..ROTATION_CHECK_LEN]);
    let ciphertext = crypto::encrypt(&rotation_cipher_key(old_commitment), iv, &plain);
    let mac_tag = crypto::mac(old_commitment.as_bytes(), &ciphertext)
        .expect("commitment is non-empty");
    RotationPayload { ciphertext, mac_tag }
}

/// Prover side of a rotation: verify, decrypt, and return the new commitment.
pub fn apply_rotation(
    payload: &RotationPayload,
    old_commitment: &SymKey32,
    iv: &[u8; 16],
) -> Result<SymKey32, KeychainError> {
    let expect = crypto::mac(old_commitment.as_bytes(), &payload.ciphertext)
        .expect("commitment is non-empty");
    if expect != payload.mac_tag {
        return Err(KeychainError::BadRotation);
    }
    let plain = crypto::decrypt(&rotation_cipher_key(old_commitment), iv, &payload.ciphertext);
    if plain.len() != 32 + ROTATION_CHECK_LEN {
        return Err(KeychainError::BadRotation);
    }
    let new_commitment = SymKey32::from_slice(&plain[..32]).unwrap();
    let check = crypto::hash_concat(&[b"rotation-check", new_commitment.as_bytes()]);
    if plain[32..] != check.as_bytes()[..ROTATION_CHECK_LEN] {
        return Err(KeychainError::BadRotation);
    }
    Ok(new_commitment)
}
