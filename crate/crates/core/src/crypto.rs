//! Symmetric primitives shared by every protocol module.
//!
//! The concrete bindings are fixed here and only here: the one-way function
//! is SHA-256, the keyed MAC is HMAC-SHA-256, and the cipher is AES-128 in
//! counter mode. Everything above this module talks in terms of the abstract
//! operations (`hash`, `mac`, `encrypt`, `derive_key16`).

use aes::Aes128;
use ctr::cipher::{KeyIvInit, StreamCipher};
use ctr::Ctr128BE;
use hmac::{Hmac, KeyInit, Mac};
use sha2::{Digest as Sha2Digest, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;
type Aes128Ctr = Ctr128BE<Aes128>;

pub const DIGEST_LEN: usize = 32;
pub const KEY16_LEN: usize = 16;
pub const KEY32_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("MAC key must not be empty")]
    EmptyKey,
}

/// 32-byte output of the one-way function or the MAC.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Digest> {
        bytes.try_into().ok().map(Digest)
    }

    /// Bytewise XOR, the fold used for aggregate attestation reports.
    pub fn xor(&self, other: &Digest) -> Digest {
        let mut out = [0u8; DIGEST_LEN];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a ^ b;
        }
        Digest(out)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..8])
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// 16-byte symmetric key (device auth/integrity keys, cluster keys, cipher keys).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SymKey16(pub [u8; KEY16_LEN]);

impl SymKey16 {
    pub fn as_bytes(&self) -> &[u8; KEY16_LEN] {
        &self.0
    }
}

// Secrets never end up in logs or panics by accident.
impl std::fmt::Debug for SymKey16 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SymKey16(..)")
    }
}

/// 32-byte symmetric value (chain keys, the group commitment, the group nonce).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SymKey32(pub [u8; KEY32_LEN]);

impl SymKey32 {
    pub fn as_bytes(&self) -> &[u8; KEY32_LEN] {
        &self.0
    }

    pub fn from_digest(d: Digest) -> SymKey32 {
        SymKey32(d.0)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<SymKey32> {
        bytes.try_into().ok().map(SymKey32)
    }
}

impl std::fmt::Debug for SymKey32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SymKey32(..)")
    }
}

impl AsRef<[u8]> for SymKey32 {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// One-way function over a byte stream.
pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// One-way function over the concatenation of several parts, e.g.
/// `hash_concat(&[nonce, n_new])` for the chained nonce update.
pub fn hash_concat(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Keyed MAC. The key may be any non-empty byte string.
pub fn mac(key: &[u8], msg: &[u8]) -> Result<Digest, CryptoError> {
    let mut m = mac_stream(key)?;
    m.update(msg);
    Ok(m.finish())
}

/// Incremental MAC for payloads that are produced chunk-wise (large reports
/// are serialized straight into the MAC without materializing the bytes).
pub fn mac_stream(key: &[u8]) -> Result<MacStream, CryptoError> {
    if key.is_empty() {
        return Err(CryptoError::EmptyKey);
    }
    let inner = HmacSha256::new_from_slice(key).expect("HMAC accepts any non-empty key");
    Ok(MacStream { inner })
}

pub struct MacStream {
    inner: HmacSha256,
}

impl MacStream {
    pub fn update(&mut self, data: &[u8]) {
        self.inner.update(data);
    }

    pub fn finish(self) -> Digest {
        Digest(self.inner.finalize().into_bytes().into())
    }
}

impl std::io::Write for MacStream {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Counter-mode encryption. Ciphertext length equals plaintext length and the
/// same call decrypts. The caller owns IV uniqueness per (key, message).
pub fn encrypt(key: &SymKey16, iv: &[u8; 16], data: &[u8]) -> Vec<u8> {
    let mut buf = data.to_vec();
    let mut cipher = Aes128Ctr::new(key.as_bytes().into(), iv.into());
    cipher.apply_keystream(&mut buf);
    buf
}

/// Inverse of [`encrypt`]; counter mode is an involution.
pub fn decrypt(key: &SymKey16, iv: &[u8; 16], data: &[u8]) -> Vec<u8> {
    encrypt(key, iv, data)
}

/// Adapt 32-byte hash outputs to the 16-byte cipher key: the first 16 bytes
/// of the hash over the concatenated inputs. Used one way everywhere a
/// hash-derived value keys the cipher.
pub fn derive_key16(parts: &[&[u8]]) -> SymKey16 {
    let d = hash_concat(parts);
    let mut k = [0u8; KEY16_LEN];
    k.copy_from_slice(&d.0[..KEY16_LEN]);
    SymKey16(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Published SHA-256 vectors.
    const SHA256_EMPTY: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
    const SHA256_ABC: &str = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";

    #[test]
    fn hash_known_vectors() {
        assert_eq!(hash(b"").to_hex(), SHA256_EMPTY);
        assert_eq!(hash(b"abc").to_hex(), SHA256_ABC);
        assert_eq!(hash(b"abc"), hash(b"abc"));
    }

    #[test]
    fn hash_concat_equals_hash_of_concat() {
        let a = b"hello ".as_slice();
        let b = b"world".as_slice();
        assert_eq!(hash_concat(&[a, b]), hash(b"hello world"));
    }

    #[test]
    fn mac_rfc4231_case_2() {
        // RFC 4231 test case 2: key "Jefe", data "what do ya want for nothing?"
        let tag = mac(b"Jefe", b"what do ya want for nothing?").unwrap();
        assert_eq!(
            tag.to_hex(),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn mac_rejects_empty_key() {
        assert_eq!(mac(b"", b"msg"), Err(CryptoError::EmptyKey));
    }

    #[test]
    fn mac_distinct_keys_distinct_tags() {
        let m = b"same message";
        assert_ne!(mac(b"k1", m).unwrap(), mac(b"k2", m).unwrap());
    }

    #[test]
    fn mac_stream_matches_oneshot() {
        let mut s = mac_stream(b"key").unwrap();
        s.update(b"part one ");
        s.update(b"part two");
        assert_eq!(s.finish(), mac(b"key", b"part one part two").unwrap());
    }

    #[test]
    fn ctr_nist_sp800_38a_vector() {
        // SP 800-38A F.5.1 CTR-AES128.Encrypt, first block.
        let key = SymKey16(hex_arr16("2b7e151628aed2a6abf7158809cf4f3c"));
        let iv: [u8; 16] = hex_arr16("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff");
        let pt = hex::decode("6bc1bee22e409f96e93d7e117393172a").unwrap();
        let ct = encrypt(&key, &iv, &pt);
        assert_eq!(hex::encode(&ct), "874d6191b620e3261bef6864990db6ce");
    }

    #[test]
    fn wrong_key_decrypts_to_garbage() {
        let k1 = SymKey16([1u8; 16]);
        let k2 = SymKey16([2u8; 16]);
        let iv = [0u8; 16];
        let ct = encrypt(&k1, &iv, b"plaintext!");
        assert_ne!(decrypt(&k2, &iv, &ct), b"plaintext!");
    }

    #[test]
    fn derive_key16_is_truncated_hash() {
        let d = hash(b"material");
        let k = derive_key16(&[b"material"]);
        assert_eq!(&k.0[..], &d.0[..16]);
        assert_eq!(derive_key16(&[b"material"]), k);
    }

    #[test]
    fn derive_key16_birthday_sample() {
        let mut seen = std::collections::HashSet::new();
        for i in 0u32..10_000 {
            let k = derive_key16(&[&i.to_be_bytes()]);
            assert!(seen.insert(k.0), "collision at input {i}");
        }
    }

    fn hex_arr16(s: &str) -> [u8; 16] {
        hex::decode(s).unwrap().try_into().unwrap()
    }

    proptest! {
        #[test]
        fn encrypt_roundtrip_all_lengths(data in proptest::collection::vec(any::<u8>(), 0..1024),
                                         key in any::<[u8; 16]>(),
                                         iv in any::<[u8; 16]>()) {
            let k = SymKey16(key);
            let ct = encrypt(&k, &iv, &data);
            prop_assert_eq!(ct.len(), data.len());
            prop_assert_eq!(decrypt(&k, &iv, &ct), data);
        }

        #[test]
        fn mac_is_pure(key in proptest::collection::vec(any::<u8>(), 1..64),
                       msg in proptest::collection::vec(any::<u8>(), 0..256)) {
            prop_assert_eq!(mac(&key, &msg).unwrap(), mac(&key, &msg).unwrap());
        }
    }
}
