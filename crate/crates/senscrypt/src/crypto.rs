//! Deterministic keystream expansion, record sealing and message
//! authentication shared by the tracker and the webserver.
//!
//! A record pad is produced by running AES-128 as a single-block PRF in a
//! counter construction: block `j` of a stream is the encryption of
//! `gen(4B BE) || record_index(4B BE) || domain(1B) || j(2B BE) || 0x00*5`.
//! Both sides can regenerate any pad from `(key, generation, index)` alone,
//! so nothing beyond the encoded record ever has to be stored.

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Symmetric key length in bytes (AES-128).
pub const KEY_LEN: usize = 16;
/// MAC tag length in bytes (full HMAC-SHA-256 output).
pub const TAG_LEN: usize = 32;
/// Cipher block length in bytes.
pub const BLOCK_LEN: usize = 16;
/// Length of the generation prefix embedded in a sealed rewrite.
pub const REWRITE_PREFIX_LEN: usize = 4;

/// A 16-byte symmetric key ($K_T$ or $K_W$).
///
/// `Debug` is redacted: keys must never leak into transcripts or service
/// logs, which are rendered with format machinery.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, KeyLengthError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| KeyLengthError {
            actual: bytes.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

#[derive(Debug, Error)]
#[error("symmetric key must be exactly {KEY_LEN} bytes, got {actual}")]
pub struct KeyLengthError {
    pub actual: usize,
}

/// Memory-overwrite generation counter. Starts at 1 and never decreases
/// over a tracker's lifetime.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Generation(u32);

impl Generation {
    pub const FIRST: Generation = Generation(1);

    /// Panics if `value` is zero; generation counters start at 1.
    pub fn new(value: u32) -> Self {
        assert!(value >= 1, "generation counter starts at 1");
        Self(value)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn next(self) -> Self {
        Self(self.0.checked_add(1).expect("generation counter overflow"))
    }
}

impl std::fmt::Display for Generation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// 32-byte message authentication tag.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct AuthTag([u8; TAG_LEN]);

impl AuthTag {
    pub fn new(bytes: [u8; TAG_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, TagLengthError> {
        let arr: [u8; TAG_LEN] = bytes.try_into().map_err(|_| TagLengthError {
            actual: bytes.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; TAG_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for AuthTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AuthTag({})", hex::encode(self.0))
    }
}

#[derive(Debug, Error)]
#[error("auth tag must be exactly {TAG_LEN} bytes, got {actual}")]
pub struct TagLengthError {
    pub actual: usize,
}

/// Domain separator between the record-encoding pad and the rewrite-sealing
/// pad. Without it the two streams would coincide for equal
/// `(generation, index)` and XOR-leak the sealed inner value.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum KeystreamDomain {
    Record = 0x01,
    Rewrite = 0x02,
}

impl KeystreamDomain {
    pub fn tag(self) -> u8 {
        self as u8
    }
}

/// Rejection from [`open_rewrite`]: the embedded generation field does not
/// match the expected one. Signals replay, corruption or a forged rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("sealed rewrite carries a generation other than the expected one")]
pub struct GenerationMismatch;

fn prf_block(cipher: &Aes128, gen: Generation, record_index: u32, domain: KeystreamDomain, ordinal: u16) -> [u8; BLOCK_LEN] {
    let mut block = [0u8; BLOCK_LEN];
    block[0..4].copy_from_slice(&gen.get().to_be_bytes());
    block[4..8].copy_from_slice(&record_index.to_be_bytes());
    block[8] = domain.tag();
    block[9..11].copy_from_slice(&ordinal.to_be_bytes());
    // bytes 11..16 stay zero
    let mut ga = aes::Block::from(block);
    cipher.encrypt_block(&mut ga);
    ga.into()
}

/// Expand `len` deterministic pseudo-random bytes from
/// `(key, generation, record_index, domain)`. Total function: any `len`
/// up to the 2^16-block stream limit is eligible, including zero.
pub fn keystream(
    key: &SymmetricKey,
    gen: Generation,
    record_index: u32,
    domain: KeystreamDomain,
    len: usize,
) -> Vec<u8> {
    let blocks = len.div_ceil(BLOCK_LEN);
    assert!(blocks <= u16::MAX as usize + 1, "keystream request exceeds the 2^16-block stream limit");
    let cipher = Aes128::new(key.as_bytes().into());
    let mut out = Vec::with_capacity(blocks * BLOCK_LEN);
    for ordinal in 0..blocks {
        out.extend_from_slice(&prf_block(&cipher, gen, record_index, domain, ordinal as u16));
    }
    out.truncate(len);
    out
}

/// Full 32-byte HMAC-SHA-256 tag over `message`.
pub fn mac(key: &SymmetricKey, message: &[u8]) -> AuthTag {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key.as_bytes()).expect("HMAC accepts any key length");
    m.update(message);
    let tag = m.finalize().into_bytes();
    AuthTag(tag.into())
}

/// Constant-time check that `tag` is the honest MAC of `message` under
/// `key`. A `false` return signals forgery or corruption.
pub fn verify_mac(key: &SymmetricKey, message: &[u8], tag: &AuthTag) -> bool {
    let expected = mac(key, message);
    expected.0.ct_eq(&tag.0).into()
}

/// Seal a fresh pre-image for record `record_index`:
/// `(gen_new as 4B BE || inner) XOR rewrite-domain keystream`.
/// Sealed size is exactly `4 + inner.len()`; no padding, no expansion.
pub fn seal_rewrite(
    key: &SymmetricKey,
    gen_new: Generation,
    record_index: u32,
    inner: &[u8],
) -> Vec<u8> {
    let mut sealed = Vec::with_capacity(REWRITE_PREFIX_LEN + inner.len());
    sealed.extend_from_slice(&gen_new.get().to_be_bytes());
    sealed.extend_from_slice(inner);
    let pad = keystream(key, gen_new, record_index, KeystreamDomain::Rewrite, sealed.len());
    for (byte, pad_byte) in sealed.iter_mut().zip(&pad) {
        *byte ^= pad_byte;
    }
    sealed
}

/// Open a sealed rewrite, accepting it only if the embedded generation
/// field equals `expected_gen`. Anything else — replay of an older batch,
/// corruption, or a forgery — is rejected.
pub fn open_rewrite(
    key: &SymmetricKey,
    expected_gen: Generation,
    record_index: u32,
    sealed: &[u8],
) -> Result<(Generation, Vec<u8>), GenerationMismatch> {
    assert!(sealed.len() >= REWRITE_PREFIX_LEN, "sealed rewrite shorter than its generation prefix");
    let pad = keystream(key, expected_gen, record_index, KeystreamDomain::Rewrite, sealed.len());
    let mut plain: Vec<u8> = sealed.iter().zip(&pad).map(|(s, p)| s ^ p).collect();
    let gen_field = u32::from_be_bytes(plain[..REWRITE_PREFIX_LEN].try_into().unwrap());
    if gen_field != expected_gen.get() {
        return Err(GenerationMismatch);
    }
    let inner = plain.split_off(REWRITE_PREFIX_LEN);
    Ok((expected_gen, inner))
}
