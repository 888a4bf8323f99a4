//! Deterministic random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(seed, purpose, index)`. Streams with different keys are independent
//! ChaCha8 instances, so drawing ζ in one mode never shifts the z sequence
//! seen by another mode, and parallel workers can each own a stream without
//! coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Perturbation direction z at a training step.
    DirectionZ = 1,
    /// Tangent-estimation direction ζ at a training step.
    DirectionZeta = 2,
    /// Linearization directions u.
    Linearize = 3,
    /// Monte Carlo kernel samples.
    KernelSample = 4,
    /// Model weight initialization.
    Init = 5,
    /// Dataset inputs.
    DataInputs = 6,
    /// Label noise.
    DataNoise = 7,
    /// Fixtures for structural checks.
    Check = 8,
}

/// Independent stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream for a two-level index such as `(step, j)`.
pub fn stream2(seed: u64, purpose: Purpose, outer: u64, inner: u64) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&outer.to_le_bytes());
    key[24..32].copy_from_slice(&inner.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
