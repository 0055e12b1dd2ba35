//! Deterministic synthetic data: seeded noise volumes, a brain-like phantom
//! and smooth analytic deformation fields. Used for self-tests, demos and
//! ground-truth registration experiments; no external RNG dependency so the
//! output is bit-identical on every platform.

use alloc::vec::Vec;

use crate::filter;
use crate::fmath;
use crate::volume::{Dims, Volume};
use crate::warp::DisplacementField;

/// SplitMix64: tiny, seedable, statistically solid for data generation.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// White noise smoothed with `sigma`, min-max normalized to `[0, 1]`.
pub fn smooth_noise_volume(dims: Dims, seed: u64, sigma: f64) -> Volume {
    let mut rng = SplitMix64::new(seed);
    let noise: Vec<f64> = (0..dims.voxel_count()).map(|_| rng.next_range(-1.0, 1.0)).collect();
    let smoothed = if sigma > 0.0 {
        filter::smooth_separable(&noise, dims, &filter::gaussian_kernel(sigma))
    } else {
        noise
    };
    let mut v = Volume::zeros(dims);
    for (dst, &src) in v.data_mut().iter_mut().zip(smoothed.iter()) {
        *dst = src as f32;
    }
    v.minmax_normalize().expect("non-empty")
}

/// A brain-like test phantom: an ellipsoidal head with a darker
/// ventricle-like core, a brighter deep structure and two octaves of
/// anatomical texture, on a zero background, normalized to `[0, 1]`.
/// The texture is strong enough that voxel-scale misalignments show up
/// clearly in similarity metrics.
pub fn brain_phantom(dims: Dims, seed: u64) -> Volume {
    let (cx, cy, cz) = (
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    );
    let (ax, ay, az) = (0.46 * dims.nx as f64, 0.46 * dims.ny as f64, 0.46 * dims.nz as f64);
    let coarse_tex = smooth_noise_volume(dims, seed, 2.5);
    let fine_tex = smooth_noise_volume(dims, seed ^ 0xA5A5_A5A5, 0.8);

    let ellipse = |x: f64, y: f64, z: f64, sx: f64, sy: f64, sz: f64, ox: f64, oy: f64, oz: f64| {
        let dx = (x - cx - ox) / sx;
        let dy = (y - cy - oy) / sy;
        let dz = (z - cz - oz) / sz;
        dx * dx + dy * dy + dz * dz
    };

    let v = Volume::from_fn(dims, |xi, yi, zi| {
        let (x, y, z) = (xi as f64, yi as f64, zi as f64);
        let head = ellipse(x, y, z, ax, ay, az, 0.0, 0.0, 0.0);
        if head > 1.0 {
            return 0.0;
        }
        // Soft rim so the head boundary carries a strong, smooth gradient.
        let rim = (1.0 - head).min(0.25) / 0.25;
        let mut val = 0.45 * rim + 0.25;
        // Ventricle-like dark core, slightly off-center.
        let vent = ellipse(x, y, z, 0.22 * ax, 0.30 * ay, 0.35 * az, 0.1 * ax, 0.0, 0.0);
        if vent < 1.0 {
            val -= 0.30 * (1.0 - vent);
        }
        // Bright deep structure on the other side.
        let deep = ellipse(x, y, z, 0.28 * ax, 0.22 * ay, 0.25 * az, -0.35 * ax, 0.2 * ay, 0.0);
        if deep < 1.0 {
            val += 0.25 * (1.0 - deep);
        }
        let i = dims.index(xi, yi, zi);
        val += 0.45 * (coarse_tex.data()[i] as f64 - 0.5) * rim;
        val += 0.50 * (fine_tex.data()[i] as f64 - 0.5) * rim;
        val.max(0.02) as f32
    });
    v.minmax_normalize().expect("non-empty")
}

/// A smooth single-bump field: `u(x) = peak * exp(-|x - center|^2 / (2 sigma^2))`.
/// The maximum displacement magnitude is `|peak|`, attained at the center.
pub fn gaussian_bump_field(
    dims: Dims,
    center: [f64; 3],
    peak: [f64; 3],
    sigma: f64,
) -> DisplacementField {
    let inv = 1.0 / (2.0 * sigma * sigma);
    DisplacementField::from_fn(dims, |x, y, z| {
        let dx = x as f64 - center[0];
        let dy = y as f64 - center[1];
        let dz = z as f64 - center[2];
        let w = fmath::exp(-(dx * dx + dy * dy + dz * dz) * inv);
        [peak[0] * w, peak[1] * w, peak[2] * w]
    })
}

/// Sum of several Gaussian bumps; used to build aggressive test warps.
pub fn multi_bump_field(
    dims: Dims,
    bumps: &[([f64; 3], [f64; 3], f64)],
) -> DisplacementField {
    let mut out = DisplacementField::zeros(dims);
    for &(center, peak, sigma) in bumps {
        let b = gaussian_bump_field(dims, center, peak, sigma);
        for (dst, &src) in out.data_mut().iter_mut().zip(b.data().iter()) {
            *dst += src;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_is_deterministic() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SplitMix64::new(43);
        assert_ne!(SplitMix64::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn phantom_is_normalized_and_reproducible() {
        let dims = Dims::new(24, 24, 24);
        let a = brain_phantom(dims, 42);
        let b = brain_phantom(dims, 42);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.min(), 0.0);
        assert_eq!(a.max(), 1.0);
        // Background present (zeros in the corners).
        assert_eq!(a.at(0, 0, 0), 0.0);
    }

    #[test]
    fn bump_peak_at_center() {
        let dims = Dims::new(16, 16, 16);
        let u = gaussian_bump_field(dims, [7.5, 7.5, 7.5], [2.0, -1.0, 0.5], 3.0);
        let max = u.max_magnitude();
        let want = (2.0f64 * 2.0 + 1.0 + 0.25).sqrt();
        assert!(max <= want + 1e-12);
        assert!(max > want * 0.95, "peak {max} too far from {want}");
    }
}
