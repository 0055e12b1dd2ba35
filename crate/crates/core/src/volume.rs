//! 3D scalar grids and the preprocessing used by the registration pipeline:
//! min-max intensity normalization, centered crop/pad to a target field of
//! view, binarization, Gaussian smoothing and 2x pyramid downsampling.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::filter;

/// Grid dimensions in voxels. Indexing is x-fastest throughout:
/// `index = x + nx*(y + ny*z)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn min_dim(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    /// Dimensions after one 2x downsampling step (ceiling rule).
    pub fn halved(&self) -> Dims {
        Dims::new(self.nx.div_ceil(2), self.ny.div_ceil(2), self.nz.div_ceil(2))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.nx, self.ny, self.nz)
    }
}

/// A 3D scalar intensity grid.
///
/// Data length always equals `dims.voxel_count()` and every value is finite;
/// both are enforced at construction and preserved by every operation here.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    /// Voxel spacing in mm per axis.
    pub spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    /// Wraps raw x-fastest data. Fails if the length does not match the
    /// dimensions, any dimension is zero, or any value is non-finite.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::InvalidInput(format!(
                "volume dimensions must be positive, got {dims}"
            )));
        }
        if data.len() != dims.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match dims {dims} = {} voxels",
                data.len(),
                dims.voxel_count()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite intensity at linear index {pos}"
            )));
        }
        Ok(Volume { dims, spacing: [1.0; 3], data })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        debug_assert!(dims.voxel_count() > 0);
        Volume { dims, spacing: [1.0; 3], data: alloc::vec![value; dims.voxel_count()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.voxel_count());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { dims, spacing: [1.0; 3], data }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Mean intensity, accumulated in f64.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    /// Rescales intensities to `[0, 1]` via `(v - min) / (max - min)`.
    /// A constant volume maps to all zeros.
    ///
    /// Idempotent for non-constant inputs: the voxel attaining the minimum
    /// maps to exactly 0 and the maximum to exactly 1, so a second pass is
    /// the identity.
    pub fn minmax_normalize(&self) -> Result<Volume> {
        if self.data.is_empty() {
            return Err(Error::InvalidInput(format!(
                "cannot normalize an empty volume"
            )));
        }
        let lo = self.min();
        let hi = self.max();
        let mut out = self.clone();
        if hi == lo {
            out.data.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let range = hi - lo;
            out.data.iter_mut().for_each(|v| *v = (*v - lo) / range);
        }
        Ok(out)
    }

    /// Thresholds to a binary mask: 1 where `v > threshold`, else 0.
    /// Strictly greater-than, so a plateau exactly at the threshold stays
    /// background.
    pub fn binarize(&self, threshold: f32) -> MaskVolume {
        let data = self.data.iter().map(|&v| (v > threshold) as u8).collect();
        MaskVolume { dims: self.dims, data }
    }

    /// Resizes to `target` dims with the content centered. When an axis
    /// shrinks the central block is kept; when it grows the input is placed
    /// centrally and the remainder is `fill`. Odd excess puts the extra
    /// voxel on the high side (floor offset on the low side).
    pub fn crop_or_pad(&self, target: Dims, fill: f32) -> Result<Volume> {
        if target.nx == 0 || target.ny == 0 || target.nz == 0 {
            return Err(Error::InvalidInput(format!(
                "target dimensions must be positive, got {target}"
            )));
        }
        let offsets = |n_in: usize, n_out: usize| -> (usize, usize, usize) {
            if n_in <= n_out {
                (0, (n_out - n_in) / 2, n_in) // (src_off, dst_off, len)
            } else {
                ((n_in - n_out) / 2, 0, n_out)
            }
        };
        let (sx, dx, lx) = offsets(self.dims.nx, target.nx);
        let (sy, dy, ly) = offsets(self.dims.ny, target.ny);
        let (sz, dz, lz) = offsets(self.dims.nz, target.nz);

        let mut out = Volume::filled(target, fill).with_spacing(self.spacing);
        for z in 0..lz {
            for y in 0..ly {
                let src = self.dims.index(sx, sy + y, sz + z);
                let dst = target.index(dx, dy + y, dz + z);
                out.data[dst..dst + lx].copy_from_slice(&self.data[src..src + lx]);
            }
        }
        Ok(out)
    }

    /// Separable Gaussian smoothing with kernel radius `ceil(3*sigma)`,
    /// renormalized to sum 1, replicate borders. `sigma = 0` is the
    /// identity.
    pub fn gaussian_smooth(&self, sigma: f64) -> Result<Volume> {
        if sigma < 0.0 {
            return Err(Error::InvalidInput(format!("negative sigma {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let buf: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let kernel = filter::gaussian_kernel(sigma);
        let smoothed = filter::smooth_separable(&buf, self.dims, &kernel);
        let mut out = self.clone();
        for (dst, &src) in out.data.iter_mut().zip(smoothed.iter()) {
            *dst = src as f32;
        }
        Ok(out)
    }

    /// One pyramid step: Gaussian smoothing (`sigma = 1`) followed by
    /// decimation at even indices. Output dims follow the ceiling rule,
    /// spacing doubles.
    pub fn downsample2x(&self) -> Result<Volume> {
        if self.dims.min_dim() < 2 {
            return Err(Error::InvalidInput(format!(
                "downsample2x needs every dimension >= 2, got {}",
                self.dims
            )));
        }
        let smoothed = self.gaussian_smooth(1.0)?;
        let coarse = self.dims.halved();
        let mut out = Volume::zeros(coarse).with_spacing([
            self.spacing[0] * 2.0,
            self.spacing[1] * 2.0,
            self.spacing[2] * 2.0,
        ]);
        for z in 0..coarse.nz {
            for y in 0..coarse.ny {
                for x in 0..coarse.nx {
                    let v = smoothed.at(2 * x, 2 * y, 2 * z);
                    out.set(x, y, z, v);
                }
            }
        }
        Ok(out)
    }
}

/// A binary mask on the same grid as the volume it was derived from.
/// Every element is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub dims: Dims,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}
