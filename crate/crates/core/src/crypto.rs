//! Keyed location hashing, seed hash chains, and cell encryption.
//!
//! Cuckoo locations are `SHA256(x || seed) mod m` with `x` and the seed both
//! encoded as 8-byte big-endian integers and the digest read as a 256-bit
//! big-endian integer. Seeds come from an iterated SHA-256 chain over a
//! 64-bit master seed and are truncated to their first 8 bytes.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{usage, Error, Result};
use crate::server::{Cell, NONCE_LEN};

/// A 64-bit hash-function seed taken from a SHA-256 chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Seed {
    pub value: u64,
    pub chain_index: u64,
}

/// Returns the `chain_index`-th element of the hash chain rooted at
/// `master_seed`. Index 0 is the master seed itself.
///
/// Cost is linear in `chain_index`; use [`SeedChain`] to walk the chain.
pub fn derive_seed(master_seed: u64, chain_index: u64) -> Seed {
    let mut chain = SeedChain::new(master_seed);
    let mut seed = chain.current();
    for _ in 0..chain_index {
        seed = chain.next_seed();
    }
    seed
}

/// Incremental cursor over a SHA-256 hash chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedChain {
    index: u64,
    state: ChainState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum ChainState {
    Root([u8; 8]),
    Digest([u8; 32]),
}

impl SeedChain {
    pub fn new(master_seed: u64) -> Self {
        Self { index: 0, state: ChainState::Root(master_seed.to_be_bytes()) }
    }

    /// Restores a cursor positioned at `index` with the given chain state.
    pub fn from_parts(index: u64, state: [u8; 32], master_seed: u64) -> Self {
        if index == 0 {
            Self::new(master_seed)
        } else {
            Self { index, state: ChainState::Digest(state) }
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Raw chain state (all zeros at index 0).
    pub fn state_bytes(&self) -> [u8; 32] {
        match &self.state {
            ChainState::Root(_) => [0u8; 32],
            ChainState::Digest(d) => *d,
        }
    }

    pub fn current(&self) -> Seed {
        let value = match &self.state {
            ChainState::Root(b) => u64::from_be_bytes(*b),
            ChainState::Digest(d) => u64::from_be_bytes(d[..8].try_into().unwrap()),
        };
        Seed { value, chain_index: self.index }
    }

    /// Advances one link and returns the new seed.
    pub fn next_seed(&mut self) -> Seed {
        let digest: [u8; 32] = match &self.state {
            ChainState::Root(b) => Sha256::digest(b).into(),
            ChainState::Digest(d) => Sha256::digest(d).into(),
        };
        self.state = ChainState::Digest(digest);
        self.index += 1;
        self.current()
    }
}

/// Location of `x` in a subtable of `m` cells under `seed`.
pub fn prf_location(seed: Seed, x: u64, m: u64) -> Result<u64> {
    if m == 0 {
        return Err(usage("prf_location requires m >= 1"));
    }
    Ok(location_unchecked(seed.value, x, m))
}

#[inline]
pub(crate) fn location_unchecked(seed: u64, x: u64, m: u64) -> u64 {
    let mut input = [0u8; 16];
    input[..8].copy_from_slice(&x.to_be_bytes());
    input[8..].copy_from_slice(&seed.to_be_bytes());
    let digest = Sha256::digest(input);
    let m = m as u128;
    let mut acc: u128 = 0;
    for word in digest.chunks_exact(8) {
        let w = u64::from_be_bytes(word.try_into().unwrap()) as u128;
        acc = ((acc << 64) | w) % m;
    }
    acc as u64
}

/// Symmetric key shared by the group of clients.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupKey {
    bytes: [u8; 32],
}

impl std::fmt::Debug for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("GroupKey(..)")
    }
}

impl GroupKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self { bytes }
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self { bytes }
    }

    /// Deterministic key for reproducible experiments.
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"stash-oram group key");
        h.update(seed.to_be_bytes());
        Self { bytes: h.finalize().into() }
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }
}

/// Randomized encryption of fixed-size cell plaintexts.
pub trait Cipher: Send + Sync {
    fn encrypt(&self, plaintext: &[u8], rng: &mut dyn RngCore) -> Cell;
    fn decrypt(&self, cell: &Cell) -> Result<Vec<u8>>;
    fn kind(&self) -> CipherKind;
}

/// Selects a [`Cipher`] implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherKind {
    /// ChaCha20-Poly1305 with a fresh random nonce per encryption.
    Aead,
    /// Plaintext plus a random nonce. Debug/throughput only.
    Transparent,
}

impl CipherKind {
    pub fn build(self, key: &GroupKey) -> Box<dyn Cipher> {
        match self {
            CipherKind::Aead => Box::new(AeadCipher::new(key)),
            CipherKind::Transparent => Box::new(TransparentCipher),
        }
    }
}

pub struct AeadCipher {
    aead: ChaCha20Poly1305,
}

impl AeadCipher {
    pub fn new(key: &GroupKey) -> Self {
        Self { aead: ChaCha20Poly1305::new(Key::from_slice(key.as_bytes())) }
    }
}

impl Cipher for AeadCipher {
    fn encrypt(&self, plaintext: &[u8], rng: &mut dyn RngCore) -> Cell {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ciphertext = self
            .aead
            .encrypt(Nonce::from_slice(&nonce), plaintext)
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        Cell { ciphertext, nonce }
    }

    fn decrypt(&self, cell: &Cell) -> Result<Vec<u8>> {
        self.aead
            .decrypt(Nonce::from_slice(&cell.nonce), cell.ciphertext.as_slice())
            .map_err(|_| Error::Integrity("cell authentication failed".into()))
    }

    fn kind(&self) -> CipherKind {
        CipherKind::Aead
    }
}

/// Stores the plaintext unchanged next to a random nonce.
pub struct TransparentCipher;

impl Cipher for TransparentCipher {
    fn encrypt(&self, plaintext: &[u8], rng: &mut dyn RngCore) -> Cell {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        Cell { ciphertext: plaintext.to_vec(), nonce }
    }

    fn decrypt(&self, cell: &Cell) -> Result<Vec<u8>> {
        Ok(cell.ciphertext.clone())
    }

    fn kind(&self) -> CipherKind {
        CipherKind::Transparent
    }
}
