//! Deterministic hierarchical random streams.
//!
//! Every random draw in the simulator comes from a [`StreamKey`]: a master
//! seed plus a path of integer components naming the logical event, e.g.
//! `[GLOBAL, round, client, map, sample]`.  Keys are mixed into a 256-bit
//! ChaCha key, so distinct paths give statistically independent streams and
//! the same path always reproduces the same stream — independent of thread
//! scheduling, iteration order, or how many draws other streams consumed.
//!
//! [`SampleToken`] is a thin wrapper naming one sampled datum ξ.  Momentum
//! corrections need the *same* ξ evaluated at two different points; passing
//! the token to both evaluations realizes that sharing exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Vector;

/// Path component tags for the simulator's stream hierarchy.  Keeping them in
/// one place guarantees two subsystems never collide on a path prefix.
pub mod domain {
    /// Initial iterate draws.
    pub const INIT: u64 = 0x01;
    /// Global-round oracle samples (per round/client/map).
    pub const GLOBAL: u64 = 0x02;
    /// Local correction-loop oracle samples.
    pub const LOCAL: u64 = 0x03;
    /// Uniform client selection per round.
    pub const SELECT: u64 = 0x04;
    /// Uniform output-iterate selection.
    pub const OUTPUT: u64 = 0x05;
    /// Inverse-Hessian estimator draws (trial/term indices).
    pub const NEUMANN: u64 = 0x06;
    /// Synthetic dataset generation.
    pub const DATA: u64 = 0x07;
    /// Client partition shuffles.
    pub const PARTITION: u64 = 0x08;
    /// Monte-Carlo harness trials.
    pub const TRIAL: u64 = 0x09;
}

/// splitmix64 finalizer: a cheap, well-mixed 64→64 bijection.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(master seed, path)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    path: Vec<u64>,
}

impl StreamKey {
    /// Root of the hierarchy for a master seed.
    pub fn root(seed: u64) -> Self {
        StreamKey { seed, path: Vec::new() }
    }

    /// Child stream obtained by appending one path component.
    pub fn child(&self, component: u64) -> Self {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(component);
        StreamKey { seed: self.seed, path }
    }

    /// Child stream with several components appended at once.
    pub fn descend(&self, components: &[u64]) -> Self {
        let mut key = self.clone();
        for &c in components {
            key = key.child(c);
        }
        key
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Collapses `(seed, path)` into a 256-bit ChaCha key.  Each path
    /// component advances a splitmix64 chain, so `[a, b]` and `[b, a]` (and
    /// any prefix/extension pair) land on unrelated keys.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed ^ 0x5151_F0ED_15_u64);
        for &c in &self.path {
            h = splitmix64(h ^ splitmix64(c));
        }
        let k0 = splitmix64(h);
        let k1 = splitmix64(k0);
        let k2 = splitmix64(k1);
        let k3 = splitmix64(k2);
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&k0.to_le_bytes());
        key[8..16].copy_from_slice(&k1.to_le_bytes());
        key[16..24].copy_from_slice(&k2.to_le_bytes());
        key[24..32].copy_from_slice(&k3.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Names one sampled datum ξ.  Oracles derive all randomness they need from
/// the token, so evaluating two different arguments under the same token uses
/// the same underlying sample — the contract momentum corrections rely on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleToken(StreamKey);

impl SampleToken {
    pub fn new(key: StreamKey) -> Self {
        SampleToken(key)
    }

    /// Fresh generator for this token's stream.
    pub fn rng(&self) -> ChaCha8Rng {
        self.0.rng()
    }

    /// Independent sub-token, e.g. one per compositional level.
    pub fn substream(&self, tag: u64) -> SampleToken {
        SampleToken(self.0.child(tag))
    }
}

/// Vector of i.i.d. standard normal draws.
pub fn standard_normal_vector<R: Rng>(rng: &mut R, n: usize) -> Vector {
    Vector((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// `B` indices drawn uniformly with replacement from `0..n`.
pub fn uniform_indices<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn first_words(key: &StreamKey, n: usize) -> Vec<u64> {
        let mut rng = key.rng();
        (0..n).map(|_| rng.next_u64()).collect()
    }

    #[test]
    fn same_key_reproduces_stream() {
        let k = StreamKey::root(42).descend(&[domain::GLOBAL, 3, 1]);
        assert_eq!(first_words(&k, 8), first_words(&k.clone(), 8));
    }

    #[test]
    fn path_order_matters() {
        let root = StreamKey::root(7);
        let a = root.descend(&[1, 2]);
        let b = root.descend(&[2, 1]);
        assert_ne!(first_words(&a, 4), first_words(&b, 4));
    }

    #[test]
    fn prefix_and_extension_differ() {
        let root = StreamKey::root(7);
        let a = root.descend(&[1]);
        let b = root.descend(&[1, 0]);
        assert_ne!(first_words(&a, 4), first_words(&b, 4));
    }

    #[test]
    fn seeds_separate_hierarchies() {
        let a = StreamKey::root(1).child(5);
        let b = StreamKey::root(2).child(5);
        assert_ne!(first_words(&a, 4), first_words(&b, 4));
    }

    #[test]
    fn token_substreams_are_independent_but_reproducible() {
        let t = SampleToken::new(StreamKey::root(9).child(domain::LOCAL));
        let mut r0 = t.substream(0).rng();
        let mut r1 = t.substream(1).rng();
        assert_ne!(r0.next_u64(), r1.next_u64());
        let mut r0b = t.substream(0).rng();
        let mut again = t.substream(0).rng();
        assert_eq!(r0b.next_u64(), again.next_u64());
    }

    #[test]
    fn normal_vector_is_deterministic_per_key() {
        let k = StreamKey::root(3).child(domain::DATA);
        let a = standard_normal_vector(&mut k.rng(), 16);
        let b = standard_normal_vector(&mut k.rng(), 16);
        assert_eq!(a, b);
        assert!(a.iter().any(|x| *x != 0.0));
    }
}
