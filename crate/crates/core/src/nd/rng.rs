//! Counter-based random streams.
//!
//! Every random draw in the crate is addressed by a [`StreamKey`]
//! `(seed, epoch, batch, slot, stream)`. The key is hashed into a ChaCha8 seed, so a
//! key always yields the same stream regardless of what was drawn before it
//! or in which order work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{Real, Tensor};

/// Slot namespaces. Keeping purposes in disjoint slots keeps streams
/// independent when the other key fields coincide.
pub mod slots {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_FORWARD: u64 = 3;
    pub const TRAIN_ATTACK: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const ENSEMBLE: u64 = 6;
    pub const RANDOM_START: u64 = 7;
    pub const DATA: u64 = 8;
    pub const DIAGNOSTIC: u64 = 9;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    /// Purpose namespace, one of [`slots`].
    pub slot: u64,
    /// Sub-stream path built by [`StreamKey::child`]; independent of `slot`,
    /// so `k.child(a).with_slot(s)` still depends on `a`.
    pub stream: u64,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn with_epoch(self, epoch: u64) -> Self {
        Self { epoch, ..self }
    }

    pub fn with_batch(self, batch: u64) -> Self {
        Self { batch, ..self }
    }

    pub fn with_slot(self, slot: u64) -> Self {
        Self { slot, ..self }
    }

    /// Derives a sub-stream. `k.child(a).child(b)` differs from
    /// `k.child(b).child(a)`.
    pub fn child(self, index: u64) -> Self {
        Self { stream: splitmix64(splitmix64(self.stream) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)), ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.epoch);
        h = splitmix64(h ^ self.batch);
        h = splitmix64(h ^ self.slot);
        h = splitmix64(h ^ self.stream);
        for chunk in seed.chunks_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Standard normal samples for `key`. Values are drawn in 64-bit and rounded,
/// so both precisions see the same underlying stream.
pub fn rng_normal<T: Real>(key: StreamKey, shape: &[usize]) -> Tensor<T> {
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Uniform samples on `[lo, hi)` for `key`.
pub fn rng_uniform<T: Real>(key: StreamKey, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| T::of(lo + (hi - lo) * rng.random::<f64>()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_tensor() {
        let k = StreamKey::new(5).with_epoch(2).with_batch(9).with_slot(slots::ENSEMBLE);
        let a = rng_normal::<f32>(k, &[3, 7]);
        let b = rng_normal::<f32>(k, &[3, 7]);
        assert_eq!(a, b);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn slot_does_not_erase_child() {
        let k = StreamKey::new(1);
        let a = rng_normal::<f64>(k.child(0).with_slot(slots::ATTACK), &[4]);
        let b = rng_normal::<f64>(k.child(1).with_slot(slots::ATTACK), &[4]);
        assert_ne!(a, b);
    }

    #[test]
    fn key_fields_all_matter() {
        let base = StreamKey::new(1);
        let variants = [
            base,
            base.with_epoch(1),
            base.with_batch(1),
            base.with_slot(1),
            base.child(0),
            base.child(1),
            base.child(0).child(1),
            base.child(1).child(0),
        ];
        let draws: Vec<Tensor<f64>> = variants.iter().map(|&k| rng_normal(k, &[4])).collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                assert_ne!(draws[i], draws[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn moments_of_a_million_samples() {
        let x = rng_normal::<f64>(StreamKey::new(42), &[1_000_000]);
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.005, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "var {var}");
    }

    #[test]
    fn distinct_slots_uncorrelated() {
        let k = StreamKey::new(11);
        let a = rng_normal::<f64>(k.with_slot(slots::TRAIN_FORWARD), &[100_000]);
        let b = rng_normal::<f64>(k.with_slot(slots::TRAIN_ATTACK), &[100_000]);
        let n = a.len() as f64;
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        let rho = sab / (saa * sbb).sqrt();
        assert!(rho.abs() <= 0.01, "rho {rho}");
    }

    #[test]
    fn uniform_range() {
        let u = rng_uniform::<f32>(StreamKey::new(3), &[10_000], -0.5, 0.25);
        assert!(u.data().iter().all(|&v| (-0.5..=0.25).contains(&v)));
    }
}
