//! Work-puzzle proof backend.
//!
//! Proving searches for a nonce such that `SHA-256(witness || nonce_be)` has
//! at least `difficulty_bits` leading zero bits. Verifying recomputes that one
//! hash, so verification cost does not depend on the difficulty.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_DIFFICULTY_BITS: u8 = 32;
/// Typical production proof size (about 742 KB).
pub const PAPER_SCALE_PROOF_PAD_BYTES: usize = 759_808;

const NONCE_LEN: usize = 8;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = NONCE_LEN + DIGEST_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("difficulty_bits must be at most {MAX_DIFFICULTY_BITS}, got {0}")]
    DifficultyTooHigh(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvingParams {
    difficulty_bits: u8,
    #[serde(default)]
    proof_pad_bytes: usize,
}

impl ProvingParams {
    pub fn new(difficulty_bits: u8, proof_pad_bytes: usize) -> Result<Self, BackendError> {
        if difficulty_bits > MAX_DIFFICULTY_BITS {
            return Err(BackendError::DifficultyTooHigh(difficulty_bits));
        }
        Ok(Self {
            difficulty_bits,
            proof_pad_bytes,
        })
    }

    pub fn with_difficulty(difficulty_bits: u8) -> Result<Self, BackendError> {
        Self::new(difficulty_bits, 0)
    }

    pub fn difficulty_bits(&self) -> u8 {
        self.difficulty_bits
    }

    pub fn proof_pad_bytes(&self) -> usize {
        self.proof_pad_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proof {
    pub nonce: u64,
    pub digest: [u8; 32],
    pub pad: Vec<u8>,
}

impl Proof {
    /// Wire layout: nonce (8 bytes, big-endian), digest (32 bytes), pad.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pad.len());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.pad);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < HEADER_LEN {
            return None;
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (digest, pad) = rest.split_at(DIGEST_LEN);
        Some(Self {
            nonce: u64::from_be_bytes(nonce.try_into().ok()?),
            digest: digest.try_into().ok()?,
            pad: pad.to_vec(),
        })
    }
}

#[cfg(test)]
thread_local! {
    static WORK_DIGESTS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// `SHA-256(witness || nonce_be)`.
pub fn work_digest(witness: &[u8], nonce: u64) -> [u8; 32] {
    #[cfg(test)]
    WORK_DIGESTS.with(|c| c.set(c.get() + 1));
    let mut hasher = Sha256::new();
    hasher.update(witness);
    hasher.update(nonce.to_be_bytes());
    hasher.finalize().into()
}

/// Leading zero bits, counted from the most significant bit of byte 0.
pub fn leading_zero_bits(digest: &[u8; 32]) -> u32 {
    let mut bits = 0;
    for &byte in digest {
        if byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

pub fn prove(witness: &[u8], params: &ProvingParams) -> Proof {
    let target = u32::from(params.difficulty_bits);
    let prefix = Sha256::new_with_prefix(witness);
    // At most 32 leading zero bits are required, so the search ends long
    // before the nonce space runs out.
    let (nonce, digest) = (0u64..)
        .map(|nonce| {
            let mut hasher = prefix.clone();
            hasher.update(nonce.to_be_bytes());
            (nonce, <[u8; 32]>::from(hasher.finalize()))
        })
        .find(|(_, digest)| leading_zero_bits(digest) >= target)
        .expect("nonce search is unbounded");
    Proof {
        nonce,
        digest,
        pad: vec![0u8; params.proof_pad_bytes],
    }
}

pub fn verify(witness: &[u8], proof: &Proof, params: &ProvingParams) -> bool {
    // Cheap check first; it never changes the outcome.
    if leading_zero_bits(&proof.digest) < u32::from(params.difficulty_bits) {
        return false;
    }
    work_digest(witness, proof.nonce) == proof.digest
}

/// Verifies an encoded proof. Malformed bytes are simply invalid.
pub fn verify_bytes(witness: &[u8], proof: &[u8], params: &ProvingParams) -> bool {
    Proof::from_bytes(proof).is_some_and(|p| verify(witness, &p, params))
}

/// Flips one digest byte so the proof no longer verifies.
pub fn corrupt(proof: &Proof) -> Proof {
    let mut bad = proof.clone();
    bad.digest[DIGEST_LEN - 1] ^= 0x01;
    bad
}

/// A prove/verify pair over opaque proof bytes.
pub trait ProofBackend: Send + Sync {
    fn prove(&self, witness: &[u8]) -> Vec<u8>;
    fn verify(&self, witness: &[u8], proof: &[u8]) -> bool;
}

/// The work-puzzle backend at fixed parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkPuzzle {
    pub params: ProvingParams,
}

impl WorkPuzzle {
    pub fn new(params: ProvingParams) -> Self {
        Self { params }
    }
}

impl ProofBackend for WorkPuzzle {
    fn prove(&self, witness: &[u8]) -> Vec<u8> {
        prove(witness, &self.params).to_bytes()
    }

    fn verify(&self, witness: &[u8], proof: &[u8]) -> bool {
        verify_bytes(witness, proof, &self.params)
    }
}
