//! Pairwise registration by joint multi-resolution optimization of the
//! forward and backward displacement fields under the composite loss.
//!
//! Both fields start at zero on the coarsest pyramid level and are updated
//! with bias-corrected Adam moments on the concatenated parameters; at each
//! level transition the fields are trilinearly upsampled with displacement
//! scaling. The run is fully deterministic for a fixed configuration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::losses::{total_loss_grad, LossBreakdown, LossWeights, SsimParams};
use crate::volume::Volume;
use crate::warp::{upsample_field2x, warp_volume, DisplacementField};

/// Solver configuration. `iters_per_level` and the trace run coarse to
/// fine; `step_size` applies at the coarsest level and is halved at each
/// finer one.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig {
    pub levels: usize,
    /// Iteration budget per level, coarsest first.
    pub iters_per_level: Vec<usize>,
    /// Adam step size in voxels at the coarsest level.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Early-stop threshold on the relative total-loss change.
    pub rel_tol: f64,
    /// Sobolev preconditioning: each gradient channel is Gaussian-smoothed
    /// with this sigma before the Adam update, which keeps per-voxel
    /// sign-descent noise from shredding the fields. 0 disables.
    pub grad_smooth_sigma: f64,
    /// Within-level step decay: the step size shrinks geometrically to
    /// this fraction of its starting value across the level's iterations.
    /// 1 disables.
    pub step_decay: f64,
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            iters_per_level: vec![100, 100, 50],
            step_size: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rel_tol: 1e-6,
            grad_smooth_sigma: 1.0,
            step_decay: 0.05,
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            seed: 42,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidInput(format!("levels must be >= 1")));
        }
        if self.iters_per_level.len() != self.levels {
            return Err(Error::InvalidInput(format!(
                "iters_per_level has {} entries for {} levels",
                self.iters_per_level.len(),
                self.levels
            )));
        }
        if self.iters_per_level.iter().any(|&i| i == 0) {
            return Err(Error::InvalidInput(format!("every level needs at least 1 iteration")));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidInput(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be positive")));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidInput(format!("rel_tol must be >= 0")));
        }
        if !(self.grad_smooth_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("grad_smooth_sigma must be >= 0")));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "step_decay must be in (0, 1], got {}",
                self.step_decay
            )));
        }
        self.weights.validate()?;
        self.ssim.validate()
    }
}

/// Output of one registration run. The trace holds every iteration's loss
/// breakdown, one list per pyramid level, coarsest first;
/// `iterations_run`/`converged` use the same order. Warped volumes are
/// recomputed from the final fields.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Field warping the moving image onto the fixed grid.
    pub forward: DisplacementField,
    /// Field warping the fixed image onto the moving grid.
    pub backward: DisplacementField,
    pub warped_moving: Volume,
    pub warped_fixed: Volume,
    pub trace: Vec<Vec<LossBreakdown>>,
    pub iterations_run: Vec<usize>,
    pub converged: Vec<bool>,
}

/// Bias-corrected first/second Adam moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam update in place: standard bias-corrected moment rule.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    step_size: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - fmath::powf(beta1, state.t as f64);
    let bc2 = 1.0 - fmath::powf(beta2, state.t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= step_size * m_hat / (fmath::sqrt(v_hat) + epsilon);
    }
}

/// Image pyramids for both inputs; entry 0 is the original resolution,
/// entry `levels - 1` the coarsest.
pub fn build_pyramids(
    moving: &Volume,
    fixed: &Volume,
    levels: usize,
) -> Result<Vec<(Volume, Volume)>> {
    if moving.dims != fixed.dims {
        return Err(Error::DimMismatch { left: moving.dims, right: fixed.dims });
    }
    if levels == 0 {
        return Err(Error::InvalidInput(format!("levels must be >= 1")));
    }
    let min_dim = moving.dims.min_dim();
    if min_dim >> (levels - 1) < 7 {
        return Err(Error::InvalidInput(format!(
            "pyramid with {levels} levels is infeasible for {}: coarsest level would fall \
             below 7 voxels",
            moving.dims
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push((moving.clone(), fixed.clone()));
    for _ in 1..levels {
        let (m, f) = out.last().unwrap();
        out.push((m.downsample2x()?, f.downsample2x()?));
    }
    Ok(out)
}

/// Number of consecutive sub-tolerance iterations required to stop a level
/// early; guards against stopping on a hinge-term plateau.
const EARLY_STOP_WINDOW: usize = 5;

/// Linear step warmup over the first iterations of each level. Adam's
/// bias-corrected first steps are full-magnitude sign steps regardless of
/// gradient size; ramping the step lets the moments settle before the
/// fields move far.
const WARMUP_ITERS: usize = 10;

/// Gradient magnitudes at or below this are floating-point noise (the
/// intensities are f32), not signal. Moment-normalized descent would
/// amplify them into real drift, so the level stops as converged instead.
const GRAD_FLOOR: f64 = 1e-12;

/// Registers `moving` onto `fixed`: estimates both displacement fields by
/// coarse-to-fine Adam descent on the composite loss.
pub fn register(
    moving: &Volume,
    fixed: &Volume,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let pyramids = build_pyramids(moving, fixed, cfg.levels)?;

    let coarsest = pyramids.last().unwrap().0.dims;
    let mut forward = DisplacementField::zeros(coarsest);
    let mut backward = DisplacementField::zeros(coarsest);

    let mut trace: Vec<Vec<LossBreakdown>> = Vec::with_capacity(cfg.levels);
    let mut iterations_run = Vec::with_capacity(cfg.levels);
    let mut converged = Vec::with_capacity(cfg.levels);

    let precond_kernel = (cfg.grad_smooth_sigma > 0.0)
        .then(|| crate::filter::gaussian_kernel(cfg.grad_smooth_sigma));

    // Coarse to fine over the pyramid.
    for (depth, (level_moving, level_fixed)) in pyramids.iter().enumerate().rev() {
        let schedule_idx = cfg.levels - 1 - depth; // 0 at the coarsest
        let iters = cfg.iters_per_level[schedule_idx];
        let level_step = cfg.step_size * fmath::powf(0.5, schedule_idx as f64);
        // Geometric within-level decay reaching step_decay * level_step on
        // the last iteration.
        let decay = if iters > 1 {
            fmath::powf(cfg.step_decay, 1.0 / (iters - 1) as f64)
        } else {
            1.0
        };

        let dims = forward.dims;
        let n3 = 3 * forward.voxel_count();
        let mut state = AdamState::new(2 * n3);
        let mut level_trace = Vec::with_capacity(iters);
        let mut prev_total: Option<f64> = None;
        let mut quiet = 0usize;
        let mut stopped_early = false;
        let mut ran = 0usize;
        let mut decayed = level_step;

        for it in 0..iters {
            if it > 0 {
                decayed *= decay;
            }
            let warmup = ((it + 1) as f64 / WARMUP_ITERS as f64).min(1.0);
            let step = decayed * warmup;
            let (bd, mut g_fwd, mut g_bwd) = total_loss_grad(
                level_moving,
                level_fixed,
                &forward,
                &backward,
                &cfg.weights,
                &cfg.ssim,
            )?;
            level_trace.push(bd);
            ran += 1;

            let grad_scale = g_fwd
                .data()
                .iter()
                .chain(g_bwd.data())
                .fold(0.0f64, |m, &g| m.max(g.abs()));
            if grad_scale <= GRAD_FLOOR {
                stopped_early = true;
                break;
            }

            if let Some(kernel) = &precond_kernel {
                for g in [&mut g_fwd, &mut g_bwd] {
                    for c in 0..3 {
                        let smoothed =
                            crate::filter::smooth_separable(g.channel(c), dims, kernel);
                        g.channel_mut(c).copy_from_slice(&smoothed);
                    }
                }
            }

            let mut grads = Vec::with_capacity(2 * n3);
            grads.extend_from_slice(g_fwd.data());
            grads.extend_from_slice(g_bwd.data());
            let mut params = Vec::with_capacity(2 * n3);
            params.extend_from_slice(forward.data());
            params.extend_from_slice(backward.data());
            adam_step(
                &mut params,
                &grads,
                &mut state,
                step,
                cfg.beta1,
                cfg.beta2,
                cfg.epsilon,
            );
            forward.data_mut().copy_from_slice(&params[..n3]);
            backward.data_mut().copy_from_slice(&params[n3..]);

            if let Some(prev) = prev_total {
                let rel = (bd.total - prev).abs() / prev.abs().max(1e-12);
                if rel < cfg.rel_tol {
                    quiet += 1;
                    if quiet >= EARLY_STOP_WINDOW {
                        stopped_early = true;
                        break;
                    }
                } else {
                    quiet = 0;
                }
            }
            prev_total = Some(bd.total);
        }

        trace.push(level_trace);
        iterations_run.push(ran);
        converged.push(stopped_early);

        if depth > 0 {
            let finer = pyramids[depth - 1].0.dims;
            forward = upsample_field2x(&forward, finer)?;
            backward = upsample_field2x(&backward, finer)?;
        }
    }

    let warped_moving = warp_volume(moving, &forward);
    let warped_fixed = warp_volume(fixed, &backward);
    Ok(RegistrationResult {
        forward,
        backward,
        warped_moving,
        warped_fixed,
        trace,
        iterations_run,
        converged,
    })
}
