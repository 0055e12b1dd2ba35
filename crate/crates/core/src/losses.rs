//! The composite registration objective and its analytic gradients.
//!
//! Five terms, each differentiated exactly with respect to both
//! displacement fields (no autodiff, no finite differences on the forward
//! path):
//!
//! - similarity: `1 - MS-SSIM(warp(moving, u), fixed)`, averaged over both
//!   directions;
//! - smoothness: mean squared forward-difference energy of each field;
//! - image cycle: MSE between each image and its forward-then-backward
//!   double warp;
//! - flow cycle: mean squared norm of the composition residuals
//!   `r(x) = u_a(x) + u_b(x + u_a(x))` in both orders;
//! - Jacobian penalty: mean hinge `max(0, -det(I + grad u))`, shared
//!   stencil with the `jacobian` module.
//!
//! The weighted total is `similarity + l1*smoothness + l2*image_cycle +
//! l3*flow_cycle + l4*jacobian_penalty`. All reductions run in f64 with a
//! fixed traversal order, so results are bit-stable across runs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter;
use crate::fmath;
use crate::jacobian::{cofactor3, det3, jacobian_at, stencil};
use crate::volume::{Dims, Volume};
use crate::warp::{Cell, DisplacementField};

/// Standard five-scale MS-SSIM exponents; truncated and renormalized to the
/// scale count actually used.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Term coefficients of the composite objective. A weight of zero disables
/// its term entirely (the breakdown reports 0 and no gradient flows);
/// `similarity_enabled` is the matching toggle for the unweighted
/// similarity term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub similarity_enabled: bool,
    /// l1, smoothness regularization.
    pub lambda_smooth: f64,
    /// l2, image-level cycle consistency.
    pub lambda_img_cyc: f64,
    /// l3, flow-level cycle consistency.
    pub lambda_flow_cyc: f64,
    /// l4, Jacobian determinant penalty.
    pub lambda_jac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            similarity_enabled: true,
            lambda_smooth: 0.5,
            lambda_img_cyc: 10.0,
            lambda_flow_cyc: 1.0,
            lambda_jac: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_img_cyc", self.lambda_img_cyc),
            ("lambda_flow_cyc", self.lambda_flow_cyc),
            ("lambda_jac", self.lambda_jac),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term loss values for one evaluation. `total` is always the exact
/// weighted sum of the other fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub similarity: f64,
    pub smoothness: f64,
    pub image_cycle: f64,
    pub flow_cycle: f64,
    pub jacobian_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total from the term fields; the identity the
    /// type guarantees.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.similarity
            + w.lambda_smooth * self.smoothness
            + w.lambda_img_cyc * self.image_cycle
            + w.lambda_flow_cyc * self.flow_cycle
            + w.lambda_jac * self.jacobian_penalty
    }
}

/// MS-SSIM parameters. `num_scales = None` picks
/// `min(3, most scales the grid supports)`; `scale_weights = None` uses the
/// standard exponents truncated and renormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    /// Gaussian window sigma, voxels.
    pub window_sigma: f64,
    /// Window radius; support is `(2r+1)^3`.
    pub window_radius: usize,
    pub c1: f64,
    pub c2: f64,
    pub num_scales: Option<usize>,
    pub scale_weights: Option<Vec<f64>>,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_sigma: 1.5,
            window_radius: 3,
            c1: 1e-4, // (0.01)^2 at dynamic range 1
            c2: 9e-4, // (0.03)^2
            num_scales: None,
            scale_weights: None,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "SSIM constants must be positive, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.window_sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "window sigma must be positive, got {}",
                self.window_sigma
            )));
        }
        if self.window_radius == 0 {
            return Err(Error::InvalidInput(format!("window radius must be >= 1")));
        }
        Ok(())
    }

    pub fn window_size(&self) -> usize {
        2 * self.window_radius + 1
    }

    /// Number of scales to use on a grid of `dims`. Explicit requests are
    /// validated against the feasibility rule `min_dim >= 2^(s-1) * window`;
    /// adaptive selection clamps to at least one scale.
    pub fn resolve_scales(&self, dims: Dims) -> Result<usize> {
        self.validate()?;
        let window = self.window_size();
        let min_dim = dims.min_dim();
        let mut feasible = 0usize;
        while min_dim >= window << feasible {
            feasible += 1;
            if feasible >= 16 {
                break;
            }
        }
        match self.num_scales {
            Some(s) => {
                if s == 0 {
                    return Err(Error::InvalidInput(format!("num_scales must be >= 1")));
                }
                if s > feasible {
                    return Err(Error::InvalidInput(format!(
                        "volume {dims} is too small for {s} scales with a {window}-voxel \
                         window; at most {feasible} feasible"
                    )));
                }
                Ok(s)
            }
            None => Ok(feasible.clamp(1, 3)),
        }
    }

    /// Scale exponents for `scales` levels, normalized to sum 1.
    pub fn resolve_weights(&self, scales: usize) -> Result<Vec<f64>> {
        let raw: Vec<f64> = match &self.scale_weights {
            Some(w) => {
                if w.len() != scales {
                    return Err(Error::InvalidInput(format!(
                        "scale_weights has {} entries but {scales} scales are in use",
                        w.len()
                    )));
                }
                w.clone()
            }
            None => {
                if scales > MS_SSIM_WEIGHTS.len() {
                    return Err(Error::InvalidInput(format!(
                        "default weights cover at most {} scales, got {scales}",
                        MS_SSIM_WEIGHTS.len()
                    )));
                }
                MS_SSIM_WEIGHTS[..scales].to_vec()
            }
        };
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) || raw.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "scale weights must be non-negative with positive sum"
            )));
        }
        Ok(raw.iter().map(|&w| w / sum).collect())
    }
}

fn require_same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch { left: a, right: b });
    }
    Ok(())
}

// --------------------------------------------------------------------------
// SSIM local statistics (f64 pipeline shared by the metric and the loss)
// --------------------------------------------------------------------------

struct SsimStats {
    ma: Vec<f64>,
    mb: Vec<f64>,
    saa: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
}

fn ssim_stats(a: &[f64], b: &[f64], dims: Dims, window: &[f64]) -> SsimStats {
    let n = dims.voxel_count();
    let mut aa = vec![0.0; n];
    let mut bb = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    SsimStats {
        ma: filter::smooth_separable(a, dims, window),
        mb: filter::smooth_separable(b, dims, window),
        saa: filter::smooth_separable(&aa, dims, window),
        sbb: filter::smooth_separable(&bb, dims, window),
        sab: filter::smooth_separable(&ab, dims, window),
    }
}

/// Per-voxel SSIM (or contrast-structure only) map and its mean.
fn ssim_component(
    stats: &SsimStats,
    p: &SsimParams,
    with_luminance: bool,
) -> (f64, Vec<f64>) {
    let n = stats.ma.len();
    let mut map = vec![0.0; n];
    let mut sum = 0.0f64;
    for i in 0..n {
        let (ma, mb) = (stats.ma[i], stats.mb[i]);
        let va = stats.saa[i] - ma * ma;
        let vb = stats.sbb[i] - mb * mb;
        let cab = stats.sab[i] - ma * mb;
        let cs = (2.0 * cab + p.c2) / (va + vb + p.c2);
        let v = if with_luminance {
            let l = (2.0 * ma * mb + p.c1) / (ma * ma + mb * mb + p.c1);
            l * cs
        } else {
            cs
        };
        map[i] = v;
        sum += v;
    }
    (sum / n as f64, map)
}

/// Gradient of `coeff * mean(component)` with respect to image `a`,
/// computed by the adjoint of the window smoothing.
fn ssim_component_backward(
    stats: &SsimStats,
    a: &[f64],
    b: &[f64],
    dims: Dims,
    p: &SsimParams,
    window: &[f64],
    with_luminance: bool,
    coeff: f64,
) -> Vec<f64> {
    let n = dims.voxel_count();
    let scale = coeff / n as f64;
    let mut d_ma = vec![0.0; n]; // dM/d(mu_a), total including variance paths
    let mut d_saa = vec![0.0; n]; // dM/d(smoothed a^2)
    let mut d_sab = vec![0.0; n]; // dM/d(smoothed a*b)
    for i in 0..n {
        let (ma, mb) = (stats.ma[i], stats.mb[i]);
        let va = stats.saa[i] - ma * ma;
        let vb = stats.sbb[i] - mb * mb;
        let cab = stats.sab[i] - ma * mb;
        let a2 = 2.0 * cab + p.c2;
        let b2 = va + vb + p.c2;
        let cs = a2 / b2;
        let (dm_dva, dm_dcab, dm_dma_direct);
        if with_luminance {
            let a1 = 2.0 * ma * mb + p.c1;
            let b1 = ma * ma + mb * mb + p.c1;
            let l = a1 / b1;
            let dl_dma = (2.0 * mb * b1 - a1 * 2.0 * ma) / (b1 * b1);
            dm_dma_direct = cs * dl_dma;
            dm_dva = l * (-a2 / (b2 * b2));
            dm_dcab = l * (2.0 / b2);
        } else {
            dm_dma_direct = 0.0;
            dm_dva = -a2 / (b2 * b2);
            dm_dcab = 2.0 / b2;
        }
        // va = saa - ma^2 and cab = sab - ma*mb fold back into the mu_a path.
        d_ma[i] = scale * (dm_dma_direct + dm_dva * (-2.0 * ma) + dm_dcab * (-mb));
        d_saa[i] = scale * dm_dva;
        d_sab[i] = scale * dm_dcab;
    }
    let g_ma = filter::smooth_separable_adjoint(&d_ma, dims, window);
    let g_saa = filter::smooth_separable_adjoint(&d_saa, dims, window);
    let g_sab = filter::smooth_separable_adjoint(&d_sab, dims, window);
    let mut grad = vec![0.0; n];
    for i in 0..n {
        grad[i] = g_ma[i] + 2.0 * a[i] * g_saa[i] + b[i] * g_sab[i];
    }
    grad
}

struct MsSsimEval {
    value: f64,
    /// Gradient of `value` w.r.t. the finest-scale `a`, when requested.
    grad_a: Option<Vec<f64>>,
}

/// Multi-scale SSIM over f64 buffers: contrast-structure at scales
/// `1..S-1`, full SSIM at the coarsest, combined as a weighted product with
/// each scale mean floored at 0. Scales are built by sigma-1 smoothing and
/// even-index decimation (the volume pyramid operator).
fn ms_ssim_f64(
    a: &[f64],
    b: &[f64],
    dims: Dims,
    p: &SsimParams,
    want_grad: bool,
) -> Result<MsSsimEval> {
    let scales = p.resolve_scales(dims)?;
    let weights = p.resolve_weights(scales)?;
    let window = filter::gaussian_window(p.window_sigma, p.window_radius);
    let pyramid_kernel = filter::gaussian_kernel(1.0);

    // Forward: per-scale buffers, stats and component means.
    let mut levels: Vec<(Vec<f64>, Vec<f64>, Dims)> = Vec::with_capacity(scales);
    levels.push((a.to_vec(), b.to_vec(), dims));
    for _ in 1..scales {
        let (pa, pb, pd) = levels.last().unwrap();
        let sa = filter::smooth_separable(pa, *pd, &pyramid_kernel);
        let sb = filter::smooth_separable(pb, *pd, &pyramid_kernel);
        let (da, cd) = filter::decimate2(&sa, *pd);
        let (db, _) = filter::decimate2(&sb, *pd);
        levels.push((da, db, cd));
    }
    let mut stats = Vec::with_capacity(scales);
    let mut means = Vec::with_capacity(scales);
    for (j, (la, lb, ld)) in levels.iter().enumerate() {
        let st = ssim_stats(la, lb, *ld, &window);
        let (mean, _) = ssim_component(&st, p, j == scales - 1);
        stats.push(st);
        means.push(mean);
    }

    // Weighted product with component floors.
    let floored: Vec<f64> = means.iter().map(|&m| m.max(0.0)).collect();
    if floored.iter().any(|&c| c == 0.0) {
        return Ok(MsSsimEval {
            value: 0.0,
            grad_a: want_grad.then(|| vec![0.0; dims.voxel_count()]),
        });
    }
    let mut value = 1.0f64;
    for (c, w) in floored.iter().zip(weights.iter()) {
        value *= fmath::powf(*c, *w);
    }

    if !want_grad {
        return Ok(MsSsimEval { value, grad_a: None });
    }

    // Backward: accumulate from the coarsest scale, pulling each result
    // through the adjoint of the pyramid step.
    let mut grad: Vec<f64> = vec![0.0; levels[scales - 1].2.voxel_count()];
    for j in (0..scales).rev() {
        let (la, lb, ld) = &levels[j];
        let coeff = value * weights[j] / floored[j];
        let gj = ssim_component_backward(
            &stats[j],
            la,
            lb,
            *ld,
            p,
            &window,
            j == scales - 1,
            coeff,
        );
        for (dst, &src) in grad.iter_mut().zip(gj.iter()) {
            *dst += src;
        }
        if j > 0 {
            let fine = levels[j - 1].2;
            let up = filter::decimate2_adjoint(&grad, *ld, fine);
            grad = filter::smooth_separable_adjoint(&up, fine, &pyramid_kernel);
        }
    }
    Ok(MsSsimEval { value, grad_a: Some(grad) })
}

fn to_f64(v: &Volume) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

/// Per-voxel SSIM between two volumes (Gaussian window statistics,
/// replicate borders) and its mean. Intensities are expected in `[0, 1]`.
pub fn ssim_map(a: &Volume, b: &Volume, p: &SsimParams) -> Result<(f64, Volume)> {
    require_same_dims(a.dims, b.dims)?;
    p.validate()?;
    let window = filter::gaussian_window(p.window_sigma, p.window_radius);
    let stats = ssim_stats(&to_f64(a), &to_f64(b), a.dims, &window);
    let (mean, map) = ssim_component(&stats, p, true);
    let mut out = Volume::zeros(a.dims);
    for (dst, &src) in out.data_mut().iter_mut().zip(map.iter()) {
        *dst = src as f32;
    }
    Ok((mean, out))
}

/// Multi-scale SSIM of two volumes in `[0, 1]`.
pub fn ms_ssim(a: &Volume, b: &Volume, p: &SsimParams) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    Ok(ms_ssim_f64(&to_f64(a), &to_f64(b), a.dims, p, false)?.value)
}

// --------------------------------------------------------------------------
// Term 1: similarity
// --------------------------------------------------------------------------

/// `1 - MS-SSIM(warp(moving, u), fixed)` and its exact gradient w.r.t. `u`,
/// chained through the window statistics, the scale pyramid and the
/// trilinear warp.
pub fn similarity_loss_grad(
    fixed: &Volume,
    moving: &Volume,
    u: &DisplacementField,
    p: &SsimParams,
) -> Result<(f64, DisplacementField)> {
    require_same_dims(fixed.dims, u.dims)?;
    let dims = u.dims;
    let n = dims.voxel_count();

    // Warp in f64, keeping the image gradient at each sample point.
    let mut warped = vec![0.0f64; n];
    let mut wgrad = vec![[0.0f64; 3]; n];
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = u.vector_at(i);
                let pnt = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let cell = Cell::locate(moving.dims, pnt);
                warped[i] = cell.gather(moving.data(), moving.dims);
                wgrad[i] = cell.gather_grad(moving.data(), moving.dims);
                i += 1;
            }
        }
    }

    let eval = ms_ssim_f64(&warped, &to_f64(fixed), dims, p, true)?;
    let g_img = eval.grad_a.expect("gradient requested");
    let mut grad = DisplacementField::zeros(dims);
    for c in 0..3 {
        let ch = grad.channel_mut(c);
        for i in 0..n {
            // loss = 1 - value, so the sign flips here.
            ch[i] = -g_img[i] * wgrad[i][c];
        }
    }
    Ok((1.0 - eval.value, grad))
}

// --------------------------------------------------------------------------
// Term 2: smoothness
// --------------------------------------------------------------------------

/// Mean squared forward-difference energy,
/// `(1/N) sum_x sum_c |grad u_c(x)|^2`, differences along each axis with the
/// last slice clamped to zero (Neumann), and its exact gradient.
pub fn smoothness_loss_grad(u: &DisplacementField) -> Result<(f64, DisplacementField)> {
    let dims = u.dims;
    if dims.min_dim() < 2 {
        return Err(Error::InvalidInput(format!(
            "smoothness needs every dimension >= 2, got {dims}"
        )));
    }
    let n = dims.voxel_count() as f64;
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let mut loss = 0.0f64;
    let mut grad = DisplacementField::zeros(dims);
    for c in 0..3 {
        let ch = u.channel(c);
        let gc = grad.channel_mut(c);
        for (axis, &stride) in strides.iter().enumerate() {
            let limit = [dims.nx, dims.ny, dims.nz][axis];
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        let coord = [x, y, z][axis];
                        if coord + 1 >= limit {
                            continue;
                        }
                        let i = dims.index(x, y, z);
                        let diff = ch[i + stride] - ch[i];
                        loss += diff * diff;
                        gc[i + stride] += 2.0 * diff;
                        gc[i] -= 2.0 * diff;
                    }
                }
            }
        }
    }
    for g in grad.data_mut() {
        *g /= n;
    }
    Ok((loss / n, grad))
}

// --------------------------------------------------------------------------
// Term 3: image-level cycle consistency
// --------------------------------------------------------------------------

/// One direction of the image cycle: `mse(warp(warp(a, inner), outer), a)`
/// with exact gradients for both fields. The gradient w.r.t. the inner
/// field flows through the outer sampling weights (adjoint scatter).
fn image_cycle_direction(
    a: &[f64],
    dims: Dims,
    inner: &DisplacementField,
    outer: &DisplacementField,
) -> (f64, DisplacementField, DisplacementField) {
    let n = dims.voxel_count();
    let inv_n = 1.0 / n as f64;

    // Inner warp: b(y) = a(y + inner(y)), keeping the image gradient.
    let mut b = vec![0.0f64; n];
    let mut inner_grad = vec![[0.0f64; 3]; n];
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = inner.vector_at(i);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let cell = Cell::locate(dims, p);
                b[i] = cell.gather(a, dims);
                inner_grad[i] = cell.gather_grad(a, dims);
                i += 1;
            }
        }
    }

    // Outer warp of the discrete b, residual against a, and both adjoints.
    let mut loss = 0.0f64;
    let mut g_outer = DisplacementField::zeros(dims);
    let mut bbar = vec![0.0f64; n];
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = outer.vector_at(i);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let cell = Cell::locate(dims, p);
                let r = cell.gather(&b, dims) - a[i];
                loss += r * r;
                let bg = cell.gather_grad(&b, dims);
                let w = 2.0 * inv_n * r;
                g_outer.set_vector(i, [w * bg[0], w * bg[1], w * bg[2]]);
                cell.scatter(&mut bbar, dims, w);
                i += 1;
            }
        }
    }

    // Pull the scattered sensitivity through the inner warp.
    let mut g_inner = DisplacementField::zeros(dims);
    for c in 0..3 {
        let ch = g_inner.channel_mut(c);
        for i in 0..n {
            ch[i] = bbar[i] * inner_grad[i][c];
        }
    }
    (loss * inv_n, g_inner, g_outer)
}

/// Image-level cycle consistency:
/// `0.5*mse(warp(warp(a, fwd), bwd), a) + 0.5*mse(warp(warp(b, bwd), fwd), b)`
/// with exact gradients for both fields.
pub fn image_cycle_loss_grad(
    moving: &Volume,
    fixed: &Volume,
    forward: &DisplacementField,
    backward: &DisplacementField,
) -> Result<(f64, DisplacementField, DisplacementField)> {
    require_same_dims(moving.dims, fixed.dims)?;
    require_same_dims(moving.dims, forward.dims)?;
    require_same_dims(forward.dims, backward.dims)?;
    let dims = moving.dims;
    let (l1, g_fwd_inner, g_bwd_outer) =
        image_cycle_direction(&to_f64(moving), dims, forward, backward);
    let (l2, g_bwd_inner, g_fwd_outer) =
        image_cycle_direction(&to_f64(fixed), dims, backward, forward);
    let n3 = 3 * dims.voxel_count();
    let mut g_fwd = DisplacementField::zeros(dims);
    let mut g_bwd = DisplacementField::zeros(dims);
    for i in 0..n3 {
        g_fwd.data_mut()[i] = 0.5 * (g_fwd_inner.data()[i] + g_fwd_outer.data()[i]);
        g_bwd.data_mut()[i] = 0.5 * (g_bwd_outer.data()[i] + g_bwd_inner.data()[i]);
    }
    Ok((0.5 * l1 + 0.5 * l2, g_fwd, g_bwd))
}

// --------------------------------------------------------------------------
// Term 4: flow-level cycle consistency
// --------------------------------------------------------------------------

/// The composition residual `r(x) = first(x) + second(x + first(x))`
/// (trilinear sampling, clamped borders), one residual vector per voxel of
/// `first`'s grid. Zero everywhere iff the fields are exact inverses on the
/// sampled lattice.
pub fn flow_cycle_residual(
    first: &DisplacementField,
    second: &DisplacementField,
) -> Result<DisplacementField> {
    require_same_dims(first.dims, second.dims)?;
    let dims = first.dims;
    let mut out = DisplacementField::zeros(dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = first.vector_at(i);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let cell = Cell::locate(dims, p);
                let s = [
                    cell.gather(second.channel(0), dims),
                    cell.gather(second.channel(1), dims),
                    cell.gather(second.channel(2), dims),
                ];
                out.set_vector(i, [d[0] + s[0], d[1] + s[1], d[2] + s[2]]);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// One direction of the flow cycle: `(1/N) sum |r(x)|^2` for
/// `r(x) = first(x) + second(x + first(x))`, with exact gradients including
/// the dependence of the sampling location on `first`.
fn flow_cycle_direction(
    first: &DisplacementField,
    second: &DisplacementField,
) -> (f64, DisplacementField, DisplacementField) {
    let dims = first.dims;
    let n = dims.voxel_count();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut g_first = DisplacementField::zeros(dims);
    let mut g_second = DisplacementField::zeros(dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let d = first.vector_at(i);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let cell = Cell::locate(dims, p);
                let mut r = [0.0f64; 3];
                let mut sgrad = [[0.0f64; 3]; 3]; // sgrad[d] = grad of channel d at p
                for c in 0..3 {
                    r[c] = d[c] + cell.gather(second.channel(c), dims);
                    sgrad[c] = cell.gather_grad(second.channel(c), dims);
                }
                loss += r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                for c in 0..3 {
                    // Direct dependence plus the moving sample point.
                    let mut g = r[c];
                    for d2 in 0..3 {
                        g += r[d2] * sgrad[d2][c];
                    }
                    g_first.channel_mut(c)[i] = 2.0 * inv_n * g;
                    cell.scatter(g_second.channel_mut(c), dims, 2.0 * inv_n * r[c]);
                }
                i += 1;
            }
        }
    }
    (loss * inv_n, g_first, g_second)
}

/// Flow-level cycle consistency, symmetric in the two fields:
/// `0.5*(1/N) sum |r_bwd(x)|^2 + 0.5*(1/N) sum |r_fwd(x)|^2` where
/// `r_bwd(x) = backward(x) + forward(x + backward(x))` and vice versa.
pub fn flow_cycle_loss_grad(
    forward: &DisplacementField,
    backward: &DisplacementField,
) -> Result<(f64, DisplacementField, DisplacementField)> {
    require_same_dims(forward.dims, backward.dims)?;
    let dims = forward.dims;
    let (l1, g_bwd_first, g_fwd_second) = flow_cycle_direction(backward, forward);
    let (l2, g_fwd_first, g_bwd_second) = flow_cycle_direction(forward, backward);
    let n3 = 3 * dims.voxel_count();
    let mut g_fwd = DisplacementField::zeros(dims);
    let mut g_bwd = DisplacementField::zeros(dims);
    for i in 0..n3 {
        g_fwd.data_mut()[i] = 0.5 * (g_fwd_second.data()[i] + g_fwd_first.data()[i]);
        g_bwd.data_mut()[i] = 0.5 * (g_bwd_first.data()[i] + g_bwd_second.data()[i]);
    }
    Ok((0.5 * l1 + 0.5 * l2, g_fwd, g_bwd))
}

// --------------------------------------------------------------------------
// Term 5: Jacobian determinant penalty
// --------------------------------------------------------------------------

/// Mean hinge on folded voxels, `(1/N) sum max(0, -det(I + grad u))`, with
/// the gradient routed through the cofactor expansion and the same
/// difference stencils as `jacobian::jacobian_determinant_values`. The
/// gradient is zero wherever `det >= 0` (subgradient 0 at the kink).
pub fn jacobian_penalty_grad(u: &DisplacementField) -> Result<(f64, DisplacementField)> {
    let dims = u.dims;
    if dims.min_dim() < 3 {
        return Err(Error::InvalidInput(format!(
            "Jacobian penalty needs every dimension >= 3, got {dims}"
        )));
    }
    let n = dims.voxel_count();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut grad = DisplacementField::zeros(dims);
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let m = jacobian_at(u, x, y, z);
                let det = det3(&m);
                if det >= 0.0 {
                    continue;
                }
                loss -= det;
                let cof = cofactor3(&m);
                let (xp, xm, sx) = stencil(x, dims.nx);
                let (yp, ym, sy) = stencil(y, dims.ny);
                let (zp, zm, sz) = stencil(z, dims.nz);
                let taps = [
                    (dims.index(xp, y, z), dims.index(xm, y, z), sx),
                    (dims.index(x, yp, z), dims.index(x, ym, z), sy),
                    (dims.index(x, y, zp), dims.index(x, y, zm), sz),
                ];
                for c in 0..3 {
                    let gc = grad.channel_mut(c);
                    for (d, &(ip, im, s)) in taps.iter().enumerate() {
                        // d(-det)/d J_cd = -cof[c][d]; J_cd = (u_c[ip]-u_c[im])*s.
                        let g = -inv_n * cof[c][d] * s;
                        gc[ip] += g;
                        gc[im] -= g;
                    }
                }
            }
        }
    }
    Ok((loss * inv_n, grad))
}

// --------------------------------------------------------------------------
// Composite
// --------------------------------------------------------------------------

/// The full objective: similarity, smoothness and Jacobian terms averaged
/// over both directions, the two cycle terms joint. Returns the per-term
/// breakdown (with `total` the exact weighted sum) and the gradients for
/// both fields. Terms with a zero weight are skipped entirely.
pub fn total_loss_grad(
    moving: &Volume,
    fixed: &Volume,
    forward: &DisplacementField,
    backward: &DisplacementField,
    w: &LossWeights,
    p: &SsimParams,
) -> Result<(LossBreakdown, DisplacementField, DisplacementField)> {
    require_same_dims(moving.dims, fixed.dims)?;
    require_same_dims(moving.dims, forward.dims)?;
    require_same_dims(forward.dims, backward.dims)?;
    w.validate()?;
    let dims = forward.dims;
    let n3 = 3 * dims.voxel_count();
    let zero = || DisplacementField::zeros(dims);

    let mut bd = LossBreakdown::default();

    let (sim_g_fwd, sim_g_bwd) = if w.similarity_enabled {
        let (s1, g1) = similarity_loss_grad(fixed, moving, forward, p)?;
        let (s2, g2) = similarity_loss_grad(moving, fixed, backward, p)?;
        bd.similarity = 0.5 * s1 + 0.5 * s2;
        (g1, g2)
    } else {
        (zero(), zero())
    };

    let (sm_g_fwd, sm_g_bwd) = if w.lambda_smooth > 0.0 {
        let (s1, g1) = smoothness_loss_grad(forward)?;
        let (s2, g2) = smoothness_loss_grad(backward)?;
        bd.smoothness = 0.5 * (s1 + s2);
        (g1, g2)
    } else {
        (zero(), zero())
    };

    let (ic_g_fwd, ic_g_bwd) = if w.lambda_img_cyc > 0.0 {
        let (l, g1, g2) = image_cycle_loss_grad(moving, fixed, forward, backward)?;
        bd.image_cycle = l;
        (g1, g2)
    } else {
        (zero(), zero())
    };

    let (fc_g_fwd, fc_g_bwd) = if w.lambda_flow_cyc > 0.0 {
        let (l, g1, g2) = flow_cycle_loss_grad(forward, backward)?;
        bd.flow_cycle = l;
        (g1, g2)
    } else {
        (zero(), zero())
    };

    let (jp_g_fwd, jp_g_bwd) = if w.lambda_jac > 0.0 {
        let (j1, g1) = jacobian_penalty_grad(forward)?;
        let (j2, g2) = jacobian_penalty_grad(backward)?;
        bd.jacobian_penalty = 0.5 * (j1 + j2);
        (g1, g2)
    } else {
        (zero(), zero())
    };

    bd.total = bd.weighted_total(w);

    let mut g_fwd = DisplacementField::zeros(dims);
    let mut g_bwd = DisplacementField::zeros(dims);
    for i in 0..n3 {
        g_fwd.data_mut()[i] = 0.5 * sim_g_fwd.data()[i]
            + w.lambda_smooth * 0.5 * sm_g_fwd.data()[i]
            + w.lambda_img_cyc * ic_g_fwd.data()[i]
            + w.lambda_flow_cyc * fc_g_fwd.data()[i]
            + w.lambda_jac * 0.5 * jp_g_fwd.data()[i];
        g_bwd.data_mut()[i] = 0.5 * sim_g_bwd.data()[i]
            + w.lambda_smooth * 0.5 * sm_g_bwd.data()[i]
            + w.lambda_img_cyc * ic_g_bwd.data()[i]
            + w.lambda_flow_cyc * fc_g_bwd.data()[i]
            + w.lambda_jac * 0.5 * jp_g_bwd.data()[i];
    }
    Ok((bd, g_fwd, g_bwd))
}
