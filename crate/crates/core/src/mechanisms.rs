//! Seeded noise samplers and norm clipping.
//!
//! Randomness comes from ChaCha20 keyed by `(seed, stream)`. Gaussian draws
//! use the Box-Muller cosine branch on two 53-bit uniforms, one normal per
//! pair of `u64` words. Laplace draws use the inverse CDF of one uniform.
//! These transforms are part of the reproducibility contract: changing them
//! changes every recorded trajectory.

use nalgebra::DVector;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::accountant::RgmNoise;
use crate::error::{Error, Result};

pub type ReleaseVector = DVector<f64>;

/// Deterministic random source identified by `(seed, stream)`.
///
/// Not `Sync`-shared: each thread should own its own instance.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Stream derived from `(tag, node_id, iteration)`, so that a draw's
    /// randomness depends only on where it happens, not on scheduling.
    pub fn derived(seed: u64, tag: &str, node_id: u64, iteration: u64) -> Self {
        Self::new(seed, derive_stream(tag, node_id, iteration))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, cosine branch).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (n > 0), by rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a of the tag, then splitmix64 chaining with node id and iteration.
pub fn derive_stream(tag: &str, node_id: u64, iteration: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(splitmix64(h) ^ node_id) ^ iteration)
}

fn check_finite(op: &'static str, value: &ReleaseVector) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(op, "finite entries in the released vector"))
    }
}

fn add_isotropic_noise(value: &ReleaseVector, variance: f64, rng: &mut SeededRng) -> ReleaseVector {
    let sd = variance.sqrt();
    value.map(|v| v + sd * rng.standard_normal())
}

/// `value + N(0, sigma2 I)`.
pub fn gaussian_mechanism(value: &ReleaseVector, sigma2: f64, rng: &mut SeededRng) -> Result<ReleaseVector> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::domain("gaussian_mechanism", format!("sigma2 >= 0 (sigma2 = {sigma2})")));
    }
    check_finite("gaussian_mechanism", value)?;
    Ok(add_isotropic_noise(value, sigma2, rng))
}

/// `value + N(0, (gamma |value|^2 + sigma2) I)`.
pub fn relative_gaussian_mechanism(
    value: &ReleaseVector,
    noise: &RgmNoise,
    rng: &mut SeededRng,
) -> Result<ReleaseVector> {
    let noise = RgmNoise::new(noise.gamma, noise.sigma2)?;
    check_finite("relative_gaussian_mechanism", value)?;
    let variance = noise.variance(value.norm_squared());
    Ok(add_isotropic_noise(value, variance, rng))
}

/// Centered Laplace draw with the given scale (variance `2 scale^2`).
pub fn laplace_sample(scale: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain("laplace_sample", format!("scale > 0 (scale = {scale})")));
    }
    let u = rng.uniform_open();
    Ok(if u < 0.5 {
        scale * (2.0 * u).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    })
}

/// Rescales `value` onto the ball of radius `threshold` if it lies outside.
/// `threshold = +inf` is the identity.
pub fn clip_to_norm(value: &ReleaseVector, threshold: f64) -> ReleaseVector {
    let norm = value.norm();
    if norm <= threshold {
        value.clone()
    } else {
        value * (threshold / norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_replays() {
        let mut a = SeededRng::new(42, 7);
        let mut b = SeededRng::new(42, 7);
        let xs: Vec<f64> = (0..16).map(|_| a.standard_normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.standard_normal()).collect();
        assert_eq!(xs, ys);
        let mut c = SeededRng::new(42, 8);
        assert_ne!(xs[0], c.standard_normal());
    }

    #[test]
    fn derived_streams_are_distinct() {
        let s = [
            derive_stream("rgm", 0, 0),
            derive_stream("rgm", 1, 0),
            derive_stream("rgm", 0, 1),
            derive_stream("gm", 0, 0),
        ];
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_stream("rgm", 3, 9), derive_stream("rgm", 3, 9));
    }

    #[test]
    fn zero_variance_is_identity() {
        let v = DVector::from_vec(vec![1.0, -2.5, 3.0]);
        let mut rng = SeededRng::new(1, 1);
        assert_eq!(gaussian_mechanism(&v, 0.0, &mut rng).unwrap(), v);
        assert!(gaussian_mechanism(&v, -1.0, &mut rng).is_err());
        let bad = DVector::from_vec(vec![f64::NAN]);
        assert!(gaussian_mechanism(&bad, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let v = DVector::from_vec(vec![0.7]);
        let mut rng = SeededRng::new(11, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| gaussian_mechanism(&v, 4.0, &mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.7).abs() < 3.0 * 2.0 / (n as f64).sqrt());
        // se of sample variance for a normal: sigma^2 sqrt(2/(n-1))
        assert!((var - 4.0).abs() < 3.0 * 4.0 * (2.0 / (n - 1) as f64).sqrt(), "{var}");
    }

    #[test]
    fn rgm_variance_scales_with_norm() {
        let v = DVector::from_vec(vec![3.0, 0.0]);
        let noise = RgmNoise::new(1.0, 0.0).unwrap();
        let mut rng = SeededRng::new(5, 2);
        let n = 100_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let out = relative_gaussian_mechanism(&v, &noise, &mut rng).unwrap();
            sum_sq += (out[0] - 3.0).powi(2) + out[1].powi(2);
        }
        let per_coord = sum_sq / (2 * n) as f64;
        assert!((per_coord - 9.0).abs() < 3.0 * 9.0 * (2.0 / (2 * n) as f64).sqrt(), "{per_coord}");
    }

    #[test]
    fn rgm_at_zero_vector_uses_baseline() {
        let v = DVector::zeros(1);
        let noise = RgmNoise::new(5.0, 0.25).unwrap();
        let mut rng = SeededRng::new(9, 0);
        let n = 100_000;
        let ss: f64 = (0..n)
            .map(|_| relative_gaussian_mechanism(&v, &noise, &mut rng).unwrap()[0].powi(2))
            .sum();
        let var = ss / n as f64;
        assert!((var - 0.25).abs() < 3.0 * 0.25 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn laplace_moments_and_tail() {
        let mut rng = SeededRng::new(3, 3);
        let n = 1_000_000;
        let delta: f64 = 0.01;
        let cut = (1.0 / delta).ln();
        let mut sum = 0.0;
        let mut tail = 0usize;
        for _ in 0..n {
            let x = laplace_sample(1.0, &mut rng).unwrap();
            sum += x;
            if x.abs() > cut {
                tail += 1;
            }
        }
        assert!((sum / n as f64).abs() < 3.0 * 2f64.sqrt() / 1e3);
        let p = tail as f64 / n as f64;
        let se = (delta * (1.0 - delta) / n as f64).sqrt();
        assert!((p - delta).abs() < 3.0 * se, "{p}");
        assert!(laplace_sample(0.0, &mut rng).is_err());
    }

    #[test]
    fn clipping() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let c = clip_to_norm(&v, 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_to_norm(&v, 5.0), v);
        assert_eq!(clip_to_norm(&v, f64::INFINITY), v);
        let cc = clip_to_norm(&c, 1.0);
        assert!((cc - &c).norm() < 1e-15);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(0, 0);
        let mut v: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
