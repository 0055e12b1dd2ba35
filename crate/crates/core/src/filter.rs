//! Separable filtering primitives shared by the volume pyramid, the SSIM
//! window statistics and their gradient (adjoint) paths. Everything works on
//! raw f64 buffers in x-fastest order.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::volume::Dims;

/// Normalized 1D Gaussian kernel with radius `ceil(3*sigma)`.
/// `sigma = 0` gives the identity kernel `[1.0]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = fmath::ceil(3.0 * sigma) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -(radius as i64)..=(radius as i64) {
        kernel.push(fmath::exp(-(i * i) as f64 * inv));
    }
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= sum);
    kernel
}

/// Gaussian window kernel used by SSIM: radius is explicit rather than
/// derived from sigma.
pub fn gaussian_window(sigma: f64, radius: usize) -> Vec<f64> {
    debug_assert!(sigma > 0.0);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -(radius as i64)..=(radius as i64) {
        kernel.push(fmath::exp(-(i * i) as f64 * inv));
    }
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= sum);
    kernel
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

/// One replicate-border convolution pass along `axis`.
fn convolve_axis(data: &[f64], dims: Dims, kernel: &[f64], axis: Axis) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let (n, stride, outer0, outer1, stride0, stride1) = match axis {
        Axis::X => (dims.nx, 1usize, dims.ny, dims.nz, dims.nx, dims.nx * dims.ny),
        Axis::Y => (dims.ny, dims.nx, dims.nx, dims.nz, 1, dims.nx * dims.ny),
        Axis::Z => (dims.nz, dims.nx * dims.ny, dims.nx, dims.ny, 1, dims.nx),
    };
    let mut out = vec![0.0; data.len()];
    let last = n as i64 - 1;
    for o1 in 0..outer1 {
        for o0 in 0..outer0 {
            let base = o0 * stride0 + o1 * stride1;
            for i in 0..n as i64 {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let j = (i + k as i64 - radius).clamp(0, last);
                    acc += w * data[base + j as usize * stride];
                }
                out[base + i as usize * stride] = acc;
            }
        }
    }
    out
}

/// Adjoint of `convolve_axis`: scatters instead of gathering, so clamped
/// taps accumulate on the border element.
fn convolve_axis_adjoint(data: &[f64], dims: Dims, kernel: &[f64], axis: Axis) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let (n, stride, outer0, outer1, stride0, stride1) = match axis {
        Axis::X => (dims.nx, 1usize, dims.ny, dims.nz, dims.nx, dims.nx * dims.ny),
        Axis::Y => (dims.ny, dims.nx, dims.nx, dims.nz, 1, dims.nx * dims.ny),
        Axis::Z => (dims.nz, dims.nx * dims.ny, dims.nx, dims.ny, 1, dims.nx),
    };
    let mut out = vec![0.0; data.len()];
    let last = n as i64 - 1;
    for o1 in 0..outer1 {
        for o0 in 0..outer0 {
            let base = o0 * stride0 + o1 * stride1;
            for i in 0..n as i64 {
                let v = data[base + i as usize * stride];
                if v == 0.0 {
                    continue;
                }
                for (k, &w) in kernel.iter().enumerate() {
                    let j = (i + k as i64 - radius).clamp(0, last);
                    out[base + j as usize * stride] += w * v;
                }
            }
        }
    }
    out
}

/// Separable smoothing: the same 1D kernel applied along x, then y, then z.
pub fn smooth_separable(data: &[f64], dims: Dims, kernel: &[f64]) -> Vec<f64> {
    let a = convolve_axis(data, dims, kernel, Axis::X);
    let b = convolve_axis(&a, dims, kernel, Axis::Y);
    convolve_axis(&b, dims, kernel, Axis::Z)
}

/// Adjoint of `smooth_separable` (passes in reverse order, each one the
/// scatter adjoint). For symmetric kernels away from borders this equals
/// the forward smoothing; at borders the replicate clamp makes them differ.
pub fn smooth_separable_adjoint(data: &[f64], dims: Dims, kernel: &[f64]) -> Vec<f64> {
    let a = convolve_axis_adjoint(data, dims, kernel, Axis::Z);
    let b = convolve_axis_adjoint(&a, dims, kernel, Axis::Y);
    convolve_axis_adjoint(&b, dims, kernel, Axis::X)
}

/// Decimation at even indices; output dims follow the ceiling rule.
pub fn decimate2(data: &[f64], dims: Dims) -> (Vec<f64>, Dims) {
    let coarse = dims.halved();
    let mut out = Vec::with_capacity(coarse.voxel_count());
    for z in 0..coarse.nz {
        for y in 0..coarse.ny {
            for x in 0..coarse.nx {
                out.push(data[dims.index(2 * x, 2 * y, 2 * z)]);
            }
        }
    }
    (out, coarse)
}

/// Adjoint of `decimate2`: zero-filled upscatter onto the fine grid.
pub fn decimate2_adjoint(data: &[f64], coarse: Dims, fine: Dims) -> Vec<f64> {
    debug_assert_eq!(coarse, fine.halved());
    let mut out = vec![0.0; fine.voxel_count()];
    for z in 0..coarse.nz {
        for y in 0..coarse.ny {
            for x in 0..coarse.nx {
                out[fine.index(2 * x, 2 * y, 2 * z)] = data[coarse.index(x, y, z)];
            }
        }
    }
    out
}
