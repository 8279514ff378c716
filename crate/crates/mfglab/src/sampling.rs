//! Seeded sampling helpers shared by audits, studies and experiments.
//!
//! Every random draw in the laboratory flows through a `ChaCha8Rng` seeded
//! from a caller-visible `u64`, so identical seeds give identical runs on
//! every platform. Substreams are derived by mixing a tag into the base seed
//! with a splitmix step, which keeps independent studies decorrelated without
//! threading a single generator through the whole program.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic RNG used everywhere in the crate.
pub type LabRng = ChaCha8Rng;

/// New generator for a base seed.
pub fn rng(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

/// Splitmix64 finalizer; mixes a tag into a seed to derive a substream.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform point in the closed ball of the given radius.
pub fn ball_point(rng: &mut LabRng, d: usize, radius: f64) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-300 {
        return vec![0.0; d];
    }
    let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    for x in dir.iter_mut() {
        *x *= r / n;
    }
    dir
}

/// `m` independent ball points flattened into one configuration vector.
pub fn cloud(rng: &mut LabRng, m: usize, d: usize, radius: f64) -> Vec<f64> {
    let mut q = Vec::with_capacity(m * d);
    for _ in 0..m {
        q.extend(ball_point(rng, d, radius));
    }
    q
}

/// Nested cloud family: the first `m` points of the largest cloud for a seed.
///
/// Scaling studies compare different `m` on the same underlying draw, so the
/// `m`-point cloud must be a prefix of the `m_max`-point cloud.
pub fn nested_cloud(seed: u64, m: usize, m_max: usize, d: usize, radius: f64) -> Vec<f64> {
    assert!(m <= m_max, "nested cloud requires m <= m_max");
    let mut r = rng(seed);
    let full = cloud(&mut r, m_max, d, radius);
    full[..m * d].to_vec()
}
