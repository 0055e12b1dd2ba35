//! Dense displacement fields and the differentiable warp.
//!
//! Fields follow the pull-back convention: a field `u` lives on the target
//! grid and the warped image is `out(x) = moving(x + u(x))`, sampled
//! trilinearly with replicate (clamp) borders. Displacements are in voxel
//! units of the grid the field is defined on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter;
use crate::fmath;
use crate::volume::{Dims, Volume};

/// A 3-channel field of voxel-space displacement vectors, stored planar
/// (all of `ux`, then `uy`, then `uz`), each channel x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dims: Dims,
    data: Vec<f64>,
}

impl DisplacementField {
    /// The identity transform: all displacements zero.
    pub fn zeros(dims: Dims) -> Self {
        DisplacementField { dims, data: vec![0.0; 3 * dims.voxel_count()] }
    }

    /// Wraps planar channel data (`3 * voxel_count` values, finite).
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.voxel_count() == 0 {
            return Err(Error::InvalidInput(format!(
                "field dimensions must be positive, got {dims}"
            )));
        }
        if data.len() != 3 * dims.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "field data length {} does not match 3 x {dims} = {}",
                data.len(),
                3 * dims.voxel_count()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite displacement at linear index {pos}"
            )));
        }
        Ok(DisplacementField { dims, data })
    }

    /// Builds a field by evaluating `f(x, y, z) -> [ux, uy, uz]`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let n = dims.voxel_count();
        let mut data = vec![0.0; 3 * n];
        let mut i = 0;
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let v = f(x, y, z);
                    data[i] = v[0];
                    data[n + i] = v[1];
                    data[2 * n + i] = v[2];
                    i += 1;
                }
            }
        }
        DisplacementField { dims, data }
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims.voxel_count()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Displacement vector at linear voxel index `i`.
    #[inline]
    pub fn vector_at(&self, i: usize) -> [f64; 3] {
        let n = self.voxel_count();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    #[inline]
    pub fn set_vector(&mut self, i: usize, v: [f64; 3]) {
        let n = self.voxel_count();
        self.data[i] = v[0];
        self.data[n + i] = v[1];
        self.data[2 * n + i] = v[2];
    }

    /// Largest displacement magnitude, in voxels.
    pub fn max_magnitude(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.voxel_count() {
            let [a, b, c] = self.vector_at(i);
            best = best.max(fmath::sqrt(a * a + b * b + c * c));
        }
        best
    }

    /// Mean displacement magnitude, in voxels.
    pub fn mean_magnitude(&self) -> f64 {
        let mut sum = 0.0f64;
        for i in 0..self.voxel_count() {
            let [a, b, c] = self.vector_at(i);
            sum += fmath::sqrt(a * a + b * b + c * c);
        }
        sum / self.voxel_count() as f64
    }
}

/// The identity field (all zeros) on `dims`.
pub fn identity_field(dims: Dims) -> DisplacementField {
    DisplacementField::zeros(dims)
}

/// One trilinear interpolation cell: corner lattice coordinates, fractional
/// offsets and whether the query was clamped per axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub z0: usize,
    pub z1: usize,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub clamped: [bool; 3],
}

impl Cell {
    #[inline]
    pub(crate) fn locate(dims: Dims, p: [f64; 3]) -> Cell {
        #[inline]
        fn axis(p: f64, n: usize) -> (usize, usize, f64, bool) {
            let hi = (n - 1) as f64;
            let clamped = p < 0.0 || p > hi;
            let pc = p.clamp(0.0, hi);
            let f = fmath::floor(pc);
            let i0 = f as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pc - f, clamped)
        }
        let (x0, x1, tx, cx) = axis(p[0], dims.nx);
        let (y0, y1, ty, cy) = axis(p[1], dims.ny);
        let (z0, z1, tz, cz) = axis(p[2], dims.nz);
        Cell { x0, x1, y0, y1, z0, z1, tx, ty, tz, clamped: [cx, cy, cz] }
    }

    /// Corner linear indices in the fixed order
    /// (z0y0x0, z0y0x1, z0y1x0, z0y1x1, z1y0x0, z1y0x1, z1y1x0, z1y1x1).
    #[inline]
    pub(crate) fn corners(&self, dims: Dims) -> [usize; 8] {
        [
            dims.index(self.x0, self.y0, self.z0),
            dims.index(self.x1, self.y0, self.z0),
            dims.index(self.x0, self.y1, self.z0),
            dims.index(self.x1, self.y1, self.z0),
            dims.index(self.x0, self.y0, self.z1),
            dims.index(self.x1, self.y0, self.z1),
            dims.index(self.x0, self.y1, self.z1),
            dims.index(self.x1, self.y1, self.z1),
        ]
    }

    /// Trilinear corner weights matching `corners` order.
    #[inline]
    pub(crate) fn weights(&self) -> [f64; 8] {
        let (tx, ty, tz) = (self.tx, self.ty, self.tz);
        let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        [
            sx * sy * sz,
            tx * sy * sz,
            sx * ty * sz,
            tx * ty * sz,
            sx * sy * tz,
            tx * sy * tz,
            sx * ty * tz,
            tx * ty * tz,
        ]
    }

    /// Interpolates `data` at this cell.
    #[inline]
    pub(crate) fn gather<T: Copy + Into<f64>>(&self, data: &[T], dims: Dims) -> f64 {
        let idx = self.corners(dims);
        let w = self.weights();
        let mut acc = 0.0;
        for k in 0..8 {
            acc += w[k] * data[idx[k]].into();
        }
        acc
    }

    /// Spatial derivative of the interpolant w.r.t. the query coordinate.
    /// A clamped axis contributes zero (the clamp saturates).
    #[inline]
    pub(crate) fn gather_grad<T: Copy + Into<f64>>(&self, data: &[T], dims: Dims) -> [f64; 3] {
        let idx = self.corners(dims);
        let mut v = [0.0f64; 8];
        for k in 0..8 {
            v[k] = data[idx[k]].into();
        }
        let (tx, ty, tz) = (self.tx, self.ty, self.tz);
        let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        // d/dx: difference along x, bilinear in (y, z); similarly for y, z.
        let gx = sy * sz * (v[1] - v[0])
            + ty * sz * (v[3] - v[2])
            + sy * tz * (v[5] - v[4])
            + ty * tz * (v[7] - v[6]);
        let gy = sx * sz * (v[2] - v[0])
            + tx * sz * (v[3] - v[1])
            + sx * tz * (v[6] - v[4])
            + tx * tz * (v[7] - v[5]);
        let gz = sx * sy * (v[4] - v[0])
            + tx * sy * (v[5] - v[1])
            + sx * ty * (v[6] - v[2])
            + tx * ty * (v[7] - v[3]);
        [
            if self.clamped[0] { 0.0 } else { gx },
            if self.clamped[1] { 0.0 } else { gy },
            if self.clamped[2] { 0.0 } else { gz },
        ]
    }

    /// Adjoint of `gather`: adds `g` times each corner weight into `out`.
    #[inline]
    pub(crate) fn scatter(&self, out: &mut [f64], dims: Dims, g: f64) {
        let idx = self.corners(dims);
        let w = self.weights();
        for k in 0..8 {
            out[idx[k]] += w[k] * g;
        }
    }
}

/// Trilinear interpolation of `v` at a continuous voxel coordinate.
/// Coordinates outside `[0, dim-1]` clamp to the border first.
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    Cell::locate(v.dims, p).gather(v.data(), v.dims)
}

/// Warps `moving` by `u`: `out(x) = moving(x + u(x))` on the field's grid.
/// The moving volume may have different dims; sampling clamps.
pub fn warp_volume(moving: &Volume, u: &DisplacementField) -> Volume {
    let dims = u.dims;
    let mut out = Volume::zeros(dims).with_spacing(moving.spacing);
    let data = out.data_mut();
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = u.vector_at(i);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                data[i] = Cell::locate(moving.dims, p).gather(moving.data(), moving.dims) as f32;
                i += 1;
            }
        }
    }
    out
}

/// Per-voxel spatial gradient of the moving image at the warped sample
/// location: channel `c` holds `d moving(x + u(x)) / d u_c(x)`. Clamped
/// axes contribute zero.
pub fn warp_gradient(moving: &Volume, u: &DisplacementField) -> DisplacementField {
    let dims = u.dims;
    let mut out = DisplacementField::zeros(dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = u.vector_at(i);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let g = Cell::locate(moving.dims, p).gather_grad(moving.data(), moving.dims);
                out.set_vector(i, g);
                i += 1;
            }
        }
    }
    out
}

/// Samples each channel of `field` trilinearly at `p` (clamped borders).
pub(crate) fn sample_field(field: &DisplacementField, p: [f64; 3]) -> [f64; 3] {
    let cell = Cell::locate(field.dims, p);
    [
        cell.gather(field.channel(0), field.dims),
        cell.gather(field.channel(1), field.dims),
        cell.gather(field.channel(2), field.dims),
    ]
}

/// Composition of two warps: the field whose single application equals
/// warping by `outer` then by `inner`. With pull-back fields this is
/// `result(x) = inner(x) + outer(x + inner(x))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if outer.dims != inner.dims {
        return Err(Error::DimMismatch { left: outer.dims, right: inner.dims });
    }
    let dims = inner.dims;
    let mut out = DisplacementField::zeros(dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let di = inner.vector_at(i);
                let p = [x as f64 + di[0], y as f64 + di[1], z as f64 + di[2]];
                let doo = sample_field(outer, p);
                out.set_vector(i, [di[0] + doo[0], di[1] + doo[1], di[2] + doo[2]]);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Transfers a field one pyramid level up: each channel is trilinearly
/// resampled to `target` (which must be `2d-1` or `2d` per axis) and the
/// displacements are doubled, since they are in voxel units.
pub fn upsample_field2x(u: &DisplacementField, target: Dims) -> Result<DisplacementField> {
    for (t, d) in target.as_array().iter().zip(u.dims.as_array()) {
        if *t != 2 * d && *t != 2 * d - 1 {
            return Err(Error::InvalidInput(format!(
                "upsample target {target} is not a 2x refinement of {}",
                u.dims
            )));
        }
    }
    let mut out = DisplacementField::zeros(target);
    let mut i = 0;
    for z in 0..target.nz {
        for y in 0..target.ny {
            for x in 0..target.nx {
                let p = [x as f64 / 2.0, y as f64 / 2.0, z as f64 / 2.0];
                let v = sample_field(u, p);
                out.set_vector(i, [2.0 * v[0], 2.0 * v[1], 2.0 * v[2]]);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Transfers a field one pyramid level down: smooth (`sigma = 1`), decimate
/// at even indices, halve the displacements.
pub fn downsample_field2x(u: &DisplacementField) -> Result<DisplacementField> {
    if u.dims.min_dim() < 2 {
        return Err(Error::InvalidInput(format!(
            "downsample needs every dimension >= 2, got {}",
            u.dims
        )));
    }
    let coarse = u.dims.halved();
    let kernel = filter::gaussian_kernel(1.0);
    let mut out = DisplacementField::zeros(coarse);
    for c in 0..3 {
        let smoothed = filter::smooth_separable(u.channel(c), u.dims, &kernel);
        let (dec, _) = filter::decimate2(&smoothed, u.dims);
        for (dst, &src) in out.channel_mut(c).iter_mut().zip(dec.iter()) {
            *dst = 0.5 * src;
        }
    }
    Ok(out)
}

/// Per-voxel Euclidean displacement magnitude, in voxels.
pub fn field_magnitude(u: &DisplacementField) -> Volume {
    let mut out = Volume::zeros(u.dims);
    let data = out.data_mut();
    for i in 0..u.voxel_count() {
        let [a, b, c] = u.vector_at(i);
        data[i] = fmath::sqrt(a * a + b * b + c * c) as f32;
    }
    out
}

/// Magnitude in mm: each component is scaled by its axis spacing before
/// taking the norm (reduces to a uniform scale when spacing is isotropic).
pub fn field_magnitude_mm(u: &DisplacementField, spacing: [f64; 3]) -> Volume {
    let mut out = Volume::zeros(u.dims).with_spacing(spacing);
    let data = out.data_mut();
    for i in 0..u.voxel_count() {
        let [a, b, c] = u.vector_at(i);
        let (a, b, c) = (a * spacing[0], b * spacing[1], c * spacing[2]);
        data[i] = fmath::sqrt(a * a + b * b + c * c) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SplitMix64;

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = SplitMix64::new(seed);
        let mut v = Volume::zeros(dims);
        for d in v.data_mut() {
            *d = rng.next_f64() as f32;
        }
        v
    }

    #[test]
    fn identity_field_is_zero() {
        let u = identity_field(Dims::new(4, 4, 4));
        assert_eq!(u.data().len(), 3 * 64);
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let v = random_volume(Dims::new(6, 5, 4), 1);
        let u = identity_field(v.dims);
        let w = warp_volume(&v, &u);
        assert_eq!(w.data(), v.data());
    }

    #[test]
    fn sample_at_lattice_is_exact() {
        let v = random_volume(Dims::new(5, 5, 5), 2);
        assert_eq!(sample_trilinear(&v, [3.0, 1.0, 4.0]), v.at(3, 1, 4) as f64);
    }

    #[test]
    fn sample_midpoint_is_average() {
        let mut v = Volume::zeros(Dims::new(2, 1, 1));
        v.set(1, 0, 0, 1.0);
        assert!((sample_trilinear(&v, [0.5, 0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_clamps_outside() {
        let v = random_volume(Dims::new(4, 4, 4), 3);
        assert_eq!(sample_trilinear(&v, [-3.7, 0.0, 0.0]), v.at(0, 0, 0) as f64);
        assert_eq!(sample_trilinear(&v, [9.0, 3.0, 3.0]), v.at(3, 3, 3) as f64);
    }

    #[test]
    fn integer_translation_equals_array_shift() {
        let dims = Dims::new(8, 8, 8);
        let v = random_volume(dims, 4);
        let u = DisplacementField::from_fn(dims, |_, _, _| [1.0, 0.0, 0.0]);
        let w = warp_volume(&v, &u);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..7 {
                    assert_eq!(w.at(x, y, z), v.at(x + 1, y, z), "interior shift");
                }
                assert_eq!(w.at(7, y, z), v.at(7, y, z), "clamped border");
            }
        }
    }

    #[test]
    fn half_voxel_shift_on_ramp() {
        let dims = Dims::new(8, 4, 4);
        let v = Volume::from_fn(dims, |x, _, _| x as f32);
        let u = DisplacementField::from_fn(dims, |_, _, _| [0.5, 0.0, 0.0]);
        let w = warp_volume(&v, &u);
        for x in 0..7 {
            assert!((w.at(x, 2, 2) - (x as f32 + 0.5)).abs() < 1e-6);
        }
        assert_eq!(w.at(7, 2, 2), 7.0); // clamped
    }

    #[test]
    fn warp_stays_in_moving_range() {
        let v = random_volume(Dims::new(6, 6, 6), 5);
        let mut rng = SplitMix64::new(6);
        let u = DisplacementField::from_fn(v.dims, |_, _, _| {
            [rng.next_range(-3.0, 3.0), rng.next_range(-3.0, 3.0), rng.next_range(-3.0, 3.0)]
        });
        let w = warp_volume(&v, &u);
        let (lo, hi) = (v.min(), v.max());
        for &x in w.data() {
            assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
        }
    }

    #[test]
    fn warp_gradient_of_linear_ramp() {
        let dims = Dims::new(8, 8, 8);
        let v = Volume::from_fn(dims, |x, _, _| 2.0 * x as f32);
        let u = DisplacementField::from_fn(dims, |_, _, _| [0.3, -0.2, 0.1]);
        let g = warp_gradient(&v, &u);
        // Interior voxels (sample point stays inside): d/dux = 2.
        let i = dims.index(4, 4, 4);
        let gi = g.vector_at(i);
        assert!((gi[0] - 2.0).abs() < 1e-9);
        assert!(gi[1].abs() < 1e-9 && gi[2].abs() < 1e-9);
    }

    #[test]
    fn warp_gradient_constant_volume_is_zero() {
        let v = Volume::filled(Dims::new(5, 5, 5), 0.7);
        let u = DisplacementField::from_fn(v.dims, |x, y, z| {
            [0.1 * x as f64, 0.05 * y as f64, -0.07 * z as f64]
        });
        let g = warp_gradient(&v, &u);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let dims = Dims::new(6, 6, 6);
        let v = random_volume(dims, 7);
        let mut rng = SplitMix64::new(8);
        let u = DisplacementField::from_fn(dims, |_, _, _| {
            [rng.next_range(-0.8, 0.8), rng.next_range(-0.8, 0.8), rng.next_range(-0.8, 0.8)]
        });
        let g = warp_gradient(&v, &u);
        let h = 1e-3;
        let mut checked = 0;
        let mut ok = 0;
        let mut sampler = SplitMix64::new(9);
        for _ in 0..200 {
            let i = (sampler.next_u64() % dims.voxel_count() as u64) as usize;
            let c = (sampler.next_u64() % 3) as usize;
            // Skip components whose base sample sits within 2e-3 of a cell
            // boundary, where the trilinear derivative is discontinuous.
            let (x, y, z) = (
                i % dims.nx,
                (i / dims.nx) % dims.ny,
                i / (dims.nx * dims.ny),
            );
            let d = u.vector_at(i);
            let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
            let near_boundary = p.iter().any(|&q| {
                let f = q - q.floor();
                f < 2e-3 || f > 1.0 - 2e-3
            });
            if near_boundary {
                continue;
            }
            let mut pp = p;
            pp[c] += h;
            let mut pm = p;
            pm[c] -= h;
            let fd = (sample_trilinear(&v, pp) - sample_trilinear(&v, pm)) / (2.0 * h);
            let an = g.vector_at(i)[c];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            checked += 1;
            if ((an - fd) / denom).abs() < 1e-3 {
                ok += 1;
            }
        }
        assert!(checked > 100, "too few checkable samples ({checked})");
        assert!(
            ok as f64 >= 0.99 * checked as f64,
            "only {ok}/{checked} gradient components matched"
        );
    }

    #[test]
    fn compose_with_identity() {
        let dims = Dims::new(6, 6, 6);
        let mut rng = SplitMix64::new(10);
        let u = DisplacementField::from_fn(dims, |_, _, _| {
            [rng.next_range(-1.0, 1.0), rng.next_range(-1.0, 1.0), rng.next_range(-1.0, 1.0)]
        });
        let zero = DisplacementField::zeros(dims);
        assert_eq!(compose(&u, &zero).unwrap().data(), u.data());
        assert_eq!(compose(&zero, &u).unwrap().data(), u.data());
    }

    #[test]
    fn compose_constant_translations_add() {
        let dims = Dims::new(10, 10, 10);
        let c1 = DisplacementField::from_fn(dims, |_, _, _| [1.0, 0.5, -0.5]);
        let c2 = DisplacementField::from_fn(dims, |_, _, _| [0.5, -0.25, 1.0]);
        let comp = compose(&c1, &c2).unwrap();
        // Interior voxels: no clamping, translations form a group.
        let i = dims.index(5, 5, 5);
        let v = comp.vector_at(i);
        assert!((v[0] - 1.5).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);
        assert!((v[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compose_dim_mismatch_errors() {
        let a = DisplacementField::zeros(Dims::new(4, 4, 4));
        let b = DisplacementField::zeros(Dims::new(4, 4, 5));
        assert!(matches!(compose(&a, &b), Err(Error::DimMismatch { .. })));
    }

    /// Band-limited test field (wavelength `2 * min_dim`) windowed to zero
    /// at the faces so no composition sample ever clamps. Forward
    /// differences stay well under 0.5 for `amp <= 1`.
    fn smooth_field(dims: Dims, seed: u64, amp: f64) -> DisplacementField {
        let p = seed as f64 * 0.7;
        let wl = 2.0 * dims.min_dim() as f64;
        let k = core::f64::consts::TAU / wl;
        let win = |t: f64, n: f64| {
            let s = libm::sin(core::f64::consts::PI * t / (n - 1.0));
            s * s
        };
        DisplacementField::from_fn(dims, |x, y, z| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            let w = win(x, dims.nx as f64) * win(y, dims.ny as f64) * win(z, dims.nz as f64);
            [
                w * amp * libm::sin(k * (x + p)) * libm::cos(k * (y - p)),
                w * amp * libm::sin(k * (y + 2.0 * p)) * libm::cos(k * (z + p)),
                w * amp * libm::sin(k * (z - p)) * libm::cos(k * (x + 0.5 * p)),
            ]
        })
    }

    #[test]
    fn double_warp_matches_composed_warp() {
        let dims = Dims::new(12, 12, 12);
        // Smooth test image.
        let img = random_volume(dims, 11).gaussian_smooth(2.0).unwrap();
        let outer = smooth_field(dims, 12, 0.6);
        let inner = smooth_field(dims, 13, 0.6);
        let two_step = warp_volume(&warp_volume(&img, &outer), &inner);
        let one_step = warp_volume(&img, &compose(&outer, &inner).unwrap());
        let mut max_err = 0.0f32;
        for (a, b) in two_step.data().iter().zip(one_step.data()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err < 1e-2, "max abs error {max_err}");
    }

    #[test]
    fn compose_is_approximately_associative() {
        // Band-limited fields with max forward difference < 0.5 at 16^3.
        let dims = Dims::new(16, 16, 16);
        let a = smooth_field(dims, 20, 0.35);
        let b = smooth_field(dims, 21, 0.35);
        let c = smooth_field(dims, 22, 0.35);
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        let mut max_err = 0.0f64;
        for (x, y) in left.data().iter().zip(right.data()) {
            max_err = max_err.max((x - y).abs());
        }
        assert!(max_err < 1e-2, "max abs error {max_err}");
    }

    #[test]
    fn field_resample_unit_scaling() {
        let dims = Dims::new(8, 8, 8);
        let c = DisplacementField::from_fn(dims, |_, _, _| [1.0, 0.0, 0.0]);
        let up = upsample_field2x(&c, Dims::new(16, 16, 16)).unwrap();
        let i = up.dims.index(8, 8, 8);
        assert!((up.vector_at(i)[0] - 2.0).abs() < 1e-12);

        let zero = DisplacementField::zeros(dims);
        let z2 = upsample_field2x(&zero, Dims::new(15, 16, 15)).unwrap();
        assert!(z2.data().iter().all(|&v| v == 0.0));
        assert!(downsample_field2x(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_rejects_bad_target() {
        let u = DisplacementField::zeros(Dims::new(8, 8, 8));
        assert!(upsample_field2x(&u, Dims::new(17, 16, 16)).is_err());
        assert!(upsample_field2x(&u, Dims::new(14, 16, 16)).is_err());
    }

    #[test]
    fn linear_field_survives_down_up_roundtrip() {
        let dims = Dims::new(16, 16, 16);
        let u = DisplacementField::from_fn(dims, |x, _, _| [0.1 * x as f64, 0.0, 0.0]);
        let down = downsample_field2x(&u).unwrap();
        let up = upsample_field2x(&down, dims).unwrap();
        // Interior: smoothing and linear interpolation are exact on ramps.
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    let i = dims.index(x, y, z);
                    let got = up.vector_at(i)[0];
                    let want = 0.1 * x as f64;
                    assert!((got - want).abs() < 1e-6, "at ({x},{y},{z}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn magnitude_three_four_five() {
        let dims = Dims::new(4, 4, 4);
        let u = DisplacementField::from_fn(dims, |_, _, _| [3.0, 4.0, 0.0]);
        let m = field_magnitude(&u);
        assert!(m.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
        let zero = field_magnitude(&DisplacementField::zeros(dims));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn magnitude_matches_bruteforce() {
        let dims = Dims::new(5, 6, 4);
        let mut rng = SplitMix64::new(30);
        let u = DisplacementField::from_fn(dims, |_, _, _| {
            [rng.next_range(-2.0, 2.0), rng.next_range(-2.0, 2.0), rng.next_range(-2.0, 2.0)]
        });
        let m = field_magnitude(&u);
        for i in 0..dims.voxel_count() {
            let [a, b, c] = u.vector_at(i);
            let want = (a * a + b * b + c * c).sqrt() as f32;
            assert_eq!(m.data()[i], want);
        }
        // mm variant applies per-axis scaling first.
        let mm = field_magnitude_mm(&u, [2.0, 1.0, 0.5]);
        for i in 0..dims.voxel_count() {
            let [a, b, c] = u.vector_at(i);
            let want = ((2.0 * a).powi(2) + b.powi(2) + (0.5 * c).powi(2)).sqrt() as f32;
            assert!((mm.data()[i] - want).abs() <= want.abs() * 1e-6);
        }
    }
}
