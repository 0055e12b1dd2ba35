//! Deformation-regularity analysis: Jacobian determinant fields, logJD maps
//! and folding statistics.
//!
//! The transform is `phi(x) = x + u(x)`, so its Jacobian is `J = I + grad u`
//! with the displacement gradient taken by central differences in the
//! interior and one-sided differences on the faces. `det J <= 0` marks a
//! folded (non-invertible) voxel. The same stencil backs the Jacobian
//! penalty in the loss module, so audited numbers and the training signal
//! agree.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::volume::{Dims, Volume};
use crate::warp::{field_magnitude, DisplacementField};

/// Default floor for `log_jd_map`: non-positive determinants plateau at
/// `ln(1e-6)` so maps stay finite; the exact non-positive count is carried
/// by the report instead.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-6;

/// Regularity statistics for one displacement field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianReport {
    /// Percentage (0..=100) of voxels with `det J <= 0`, boundary included.
    pub pct_nonpositive: f64,
    pub min_det: f64,
    pub max_det: f64,
    /// Mean of `ln(det)` over strictly positive determinants.
    pub mean_log_jd: f64,
    /// Population standard deviation of `ln(det)` over positive determinants.
    pub std_log_jd: f64,
    /// Mean displacement magnitude, voxels.
    pub mean_magnitude: f64,
    /// Maximum displacement magnitude, voxels.
    pub max_magnitude: f64,
}

/// One axis of the difference stencil at coordinate `i` (grid length `n`):
/// derivative = `(u[plus] - u[minus]) * scale`.
#[inline]
pub(crate) fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (1, 0, 1.0)
    } else if i == n - 1 {
        (n - 1, n - 2, 1.0)
    } else {
        (i + 1, i - 1, 0.5)
    }
}

/// Jacobian matrix `I + grad u` at voxel `(x, y, z)`; `m[c][d]` is
/// `d phi_c / d x_d`.
#[inline]
pub(crate) fn jacobian_at(u: &DisplacementField, x: usize, y: usize, z: usize) -> [[f64; 3]; 3] {
    let dims = u.dims;
    let (xp, xm, sx) = stencil(x, dims.nx);
    let (yp, ym, sy) = stencil(y, dims.ny);
    let (zp, zm, sz) = stencil(z, dims.nz);
    let mut m = [[0.0f64; 3]; 3];
    for c in 0..3 {
        let ch = u.channel(c);
        m[c][0] = (ch[dims.index(xp, y, z)] - ch[dims.index(xm, y, z)]) * sx;
        m[c][1] = (ch[dims.index(x, yp, z)] - ch[dims.index(x, ym, z)]) * sy;
        m[c][2] = (ch[dims.index(x, y, zp)] - ch[dims.index(x, y, zm)]) * sz;
    }
    for c in 0..3 {
        m[c][c] += 1.0;
    }
    m
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix: `det = sum_d m[c][d] * cof[c][d]` for any row `c`,
/// i.e. `d det / d m[c][d] = cof[c][d]`.
#[inline]
pub(crate) fn cofactor3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.min_dim() < 3 {
        return Err(Error::InvalidInput(format!(
            "Jacobian analysis needs every dimension >= 3, got {dims}"
        )));
    }
    Ok(())
}

/// Per-voxel `det(I + grad u)` in f64, x-fastest order. This is the shared
/// determinant computation; the `Volume` variant and the loss-side penalty
/// both derive from it.
pub fn jacobian_determinant_values(u: &DisplacementField) -> Result<Vec<f64>> {
    check_dims(u.dims)?;
    let dims = u.dims;
    let mut out = Vec::with_capacity(dims.voxel_count());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                out.push(det3(&jacobian_at(u, x, y, z)));
            }
        }
    }
    Ok(out)
}

/// `jacobian_determinant_values` packaged as a volume for export.
pub fn jacobian_determinant_field(u: &DisplacementField) -> Result<Volume> {
    let vals = jacobian_determinant_values(u)?;
    let mut v = Volume::zeros(u.dims);
    for (dst, &src) in v.data_mut().iter_mut().zip(vals.iter()) {
        *dst = src as f32;
    }
    Ok(v)
}

/// Per-voxel `ln(max(det, floor))`. Non-positive determinants map to the
/// `ln(floor)` plateau; their exact count is in `jacobian_report`.
pub fn log_jd_map(u: &DisplacementField, floor: f64) -> Result<Volume> {
    if floor <= 0.0 {
        return Err(Error::InvalidInput(format!("log floor must be positive, got {floor}")));
    }
    let vals = jacobian_determinant_values(u)?;
    let mut v = Volume::zeros(u.dims);
    for (dst, &det) in v.data_mut().iter_mut().zip(vals.iter()) {
        *dst = fmath::ln(det.max(floor)) as f32;
    }
    Ok(v)
}

/// Full regularity report: folding fraction over all voxels (boundary
/// included), determinant extrema, logJD statistics over `det > 0` voxels,
/// and displacement magnitudes.
pub fn jacobian_report(u: &DisplacementField) -> Result<JacobianReport> {
    let vals = jacobian_determinant_values(u)?;
    let n = vals.len();
    let mut nonpositive = 0usize;
    let mut min_det = f64::INFINITY;
    let mut max_det = f64::NEG_INFINITY;
    let mut log_sum = 0.0f64;
    let mut log_sq_sum = 0.0f64;
    let mut positive = 0usize;
    for &d in &vals {
        min_det = min_det.min(d);
        max_det = max_det.max(d);
        if d <= 0.0 {
            nonpositive += 1;
        } else {
            let l = fmath::ln(d);
            log_sum += l;
            log_sq_sum += l * l;
            positive += 1;
        }
    }
    let (mean_log_jd, std_log_jd) = if positive > 0 {
        let mean = log_sum / positive as f64;
        let var = (log_sq_sum / positive as f64 - mean * mean).max(0.0);
        (mean, fmath::sqrt(var))
    } else {
        (0.0, 0.0)
    };
    let mag = field_magnitude(u);
    let mut mag_sum = 0.0f64;
    let mut mag_max = 0.0f64;
    for &m in mag.data() {
        mag_sum += m as f64;
        mag_max = mag_max.max(m as f64);
    }
    Ok(JacobianReport {
        pct_nonpositive: 100.0 * nonpositive as f64 / n as f64,
        min_det,
        max_det,
        mean_log_jd,
        std_log_jd,
        mean_magnitude: mag_sum / n as f64,
        max_magnitude: mag_max,
    })
}
