//! Pairwise evaluation metrics: SSIM, NCC, MI, PSNR, MSE, MAE,
//! threshold-Dice and gradient similarity, plus the combined per-pair
//! report. All reductions are f64 with fixed traversal order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::losses::{ssim_map, SsimParams};
use crate::volume::{Dims, Volume};

/// Default intensity threshold for the Dice masks.
pub const DICE_THRESHOLD: f32 = 0.1;

/// Default joint-histogram resolution for mutual information.
pub const MI_BINS: usize = 32;

/// One evaluation row for a registered pair. `ncc` and
/// `gradient_similarity` are undefined (reported as null) when the inputs
/// are constant; `psnr` is `+inf` exactly when `mse` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    pub ncc: Option<f64>,
    /// Mutual information in nats.
    pub mi: f64,
    /// Peak signal-to-noise ratio in dB, peak fixed at 1.0.
    pub psnr: f64,
    pub mse: f64,
    pub mae: f64,
    pub dice: f64,
    pub gradient_similarity: Option<f64>,
}

fn require_same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch { left: a, right: b });
    }
    Ok(())
}

/// Pearson correlation over f64 slices. `Err` when both inputs are
/// constant, `Ok(0.0)` when exactly one is.
fn pearson(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    let n = a.len() as f64;
    let mean_a: f64 = a.iter().sum::<f64>() / n;
    let mean_b: f64 = b.iter().sum::<f64>() / n;
    let mut cov = 0.0f64;
    let mut var_a = 0.0f64;
    let mut var_b = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 && var_b == 0.0 {
        return Err(Error::UndefinedMetric(what));
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / fmath::sqrt(var_a * var_b))
}

fn to_f64(v: &Volume) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

/// Global normalized cross-correlation: the Pearson correlation of the two
/// intensity arrays.
pub fn ncc(a: &Volume, b: &Volume) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    pearson(&to_f64(a), &to_f64(b), "NCC of two constant volumes")
}

/// Mutual information in nats from a joint histogram with `bins^2`
/// equal-width cells over `[0,1]^2`; intensity 1.0 lands in the top bin and
/// out-of-range values clamp. `0 * log(..) = 0`.
pub fn mutual_information(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    let n = a.data().len();
    let bin_of = |v: f32| -> usize {
        let idx = (v as f64 * bins as f64) as i64;
        idx.clamp(0, bins as i64 - 1) as usize
    };
    let mut joint = vec![0u64; bins * bins];
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        joint[bin_of(x) * bins + bin_of(y)] += 1;
    }
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    let inv_n = 1.0 / n as f64;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 * inv_n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0f64;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 * inv_n;
            if p > 0.0 {
                mi += p * fmath::ln(p / (pa[i] * pb[j]));
            }
        }
    }
    Ok(mi)
}

/// Mean squared error.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.data().len() as f64)
}

/// Mean absolute error.
pub fn mae(a: &Volume, b: &Volume) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        acc += (x as f64 - y as f64).abs();
    }
    Ok(acc / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0 (normalized intensities).
/// Identical inputs give `+inf`.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * fmath::log10(1.0 / m))
}

/// Dice overlap of the two volumes binarized at `threshold` (strict
/// greater-than). Two empty masks agree perfectly: 1.0 by convention.
pub fn dice(a: &Volume, b: &Volume, threshold: f32) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    let mut inter = 0u64;
    let mut size_a = 0u64;
    let mut size_b = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let ma = x > threshold;
        let mb = y > threshold;
        inter += (ma && mb) as u64;
        size_a += ma as u64;
        size_b += mb as u64;
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a + size_b) as f64)
}

/// Per-voxel gradient-magnitude map: central differences in the interior,
/// one-sided at the boundaries.
pub(crate) fn gradient_magnitude(v: &Volume) -> Vec<f64> {
    let dims = v.dims;
    let mut out = vec![0.0f64; dims.voxel_count()];
    let diff = |i: usize, n: usize, get: &dyn Fn(usize) -> f64| -> f64 {
        if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            (get(i + 1) - get(i - 1)) * 0.5
        }
    };
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let gx = diff(x, dims.nx, &|i| v.at(i, y, z) as f64);
                let gy = diff(y, dims.ny, &|i| v.at(x, i, z) as f64);
                let gz = diff(z, dims.nz, &|i| v.at(x, y, i) as f64);
                out[dims.index(x, y, z)] = fmath::sqrt(gx * gx + gy * gy + gz * gz);
            }
        }
    }
    out
}

/// Pearson correlation of the gradient-magnitude maps of the two volumes: a
/// measure of edge and boundary alignment, invariant to intensity offsets.
pub fn gradient_similarity(a: &Volume, b: &Volume) -> Result<f64> {
    require_same_dims(a.dims, b.dims)?;
    if a.dims.min_dim() < 3 {
        return Err(Error::InvalidInput(format!(
            "gradient similarity needs every dimension >= 3, got {}",
            a.dims
        )));
    }
    pearson(
        &gradient_magnitude(a),
        &gradient_magnitude(b),
        "gradient similarity of volumes with constant gradient magnitude",
    )
}

/// Runs the full metric suite under default parameters (single
/// full-resolution SSIM scale, 32 MI bins, Dice threshold 0.1). Metrics
/// that are undefined for the inputs come back as `None`.
pub fn evaluate_all(warped: &Volume, fixed: &Volume) -> Result<MetricReport> {
    require_same_dims(warped.dims, fixed.dims)?;
    let ssim_params = SsimParams { num_scales: Some(1), ..SsimParams::default() };
    let (ssim, _) = ssim_map(warped, fixed, &ssim_params)?;
    let ncc_v = match ncc(warped, fixed) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let gs = match gradient_similarity(warped, fixed) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        ssim,
        ncc: ncc_v,
        mi: mutual_information(warped, fixed, MI_BINS)?,
        psnr: psnr(warped, fixed)?,
        mse: mse(warped, fixed)?,
        mae: mae(warped, fixed)?,
        dice: dice(warped, fixed, DICE_THRESHOLD)?,
        gradient_similarity: gs,
    })
}
