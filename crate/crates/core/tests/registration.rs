//! End-to-end behavior of the multi-resolution solver on synthetic
//! ground-truth problems.

use cicreg_core::losses::{flow_cycle_residual, LossWeights};
use cicreg_core::metrics::ncc;
use cicreg_core::optimizer::{register, RegistrationConfig};
use cicreg_core::synth::{brain_phantom, gaussian_bump_field};
use cicreg_core::volume::Dims;
use cicreg_core::warp::{field_magnitude, warp_volume};

/// A quick two-level problem used by several tests: 24^3 phantom warped by
/// a known interior bump of max 1.6 voxels.
fn quick_case() -> (cicreg_core::Volume, cicreg_core::Volume, cicreg_core::DisplacementField) {
    let dims = Dims::new(24, 24, 24);
    let moving = brain_phantom(dims, 42);
    let c = (24.0 - 1.0) / 2.0;
    let truth = gaussian_bump_field(dims, [c + 1.0, c - 1.0, c], [1.0, -0.9, 0.7], 5.0);
    let fixed = warp_volume(&moving, &truth);
    (moving, fixed, truth)
}

fn quick_config() -> RegistrationConfig {
    RegistrationConfig {
        levels: 2,
        iters_per_level: vec![60, 40],
        ..RegistrationConfig::default()
    }
}

#[test]
fn identical_pair_is_a_fixed_point() {
    let dims = Dims::new(16, 16, 16);
    let v = brain_phantom(dims, 3);
    let cfg = RegistrationConfig {
        levels: 2,
        iters_per_level: vec![10, 10],
        ..RegistrationConfig::default()
    };
    let res = register(&v, &v, &cfg).unwrap();
    // Identical images leave every term's gradient exactly zero, so the
    // fields never move at all.
    assert!(res.forward.data().iter().all(|&u| u == 0.0));
    assert!(res.backward.data().iter().all(|&u| u == 0.0));
    assert!(res.forward.mean_magnitude() < 0.05);
    let first = res.trace[0][0].total;
    let last = res.trace.last().unwrap().last().unwrap().total;
    assert!(last <= first + 1e-12, "{last} > {first}");
}

#[test]
fn zero_weights_identical_pair_does_not_drift() {
    let dims = Dims::new(16, 16, 16);
    let v = brain_phantom(dims, 4);
    let cfg = RegistrationConfig {
        levels: 1,
        iters_per_level: vec![8],
        weights: LossWeights {
            similarity_enabled: true,
            lambda_smooth: 0.0,
            lambda_img_cyc: 0.0,
            lambda_flow_cyc: 0.0,
            lambda_jac: 0.0,
        },
        ..RegistrationConfig::default()
    };
    let res = register(&v, &v, &cfg).unwrap();
    let drift = res.forward.max_magnitude().max(res.backward.max_magnitude());
    assert!(drift <= 1e-5 * 8.0, "drift {drift}");
}

#[test]
fn recovers_synthetic_bump_field() {
    let (moving, fixed, truth) = quick_case();
    let res = register(&moving, &fixed, &quick_config()).unwrap();

    let after = ncc(&res.warped_moving, &fixed).unwrap();
    let before = ncc(&moving, &fixed).unwrap();
    assert!(after > 0.99, "ncc after registration {after}");
    assert!(after > before, "no improvement: {before} -> {after}");

    // Field error over the bump support.
    let mag = field_magnitude(&truth);
    let mut err = 0.0;
    let mut count = 0usize;
    for i in 0..truth.voxel_count() {
        if mag.data()[i] > 0.3 {
            let a = res.forward.vector_at(i);
            let b = truth.vector_at(i);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .sqrt();
            err += d;
            count += 1;
        }
    }
    let mean_err = err / count as f64;
    assert!(mean_err < 0.75, "mean field error {mean_err} over {count} voxels");
}

#[test]
fn cycle_terms_shrink_composition_residual() {
    let (moving, fixed, _) = quick_case();
    let with_cycles = register(&moving, &fixed, &quick_config()).unwrap();

    let mut ablated_cfg = quick_config();
    ablated_cfg.weights.lambda_img_cyc = 0.0;
    ablated_cfg.weights.lambda_flow_cyc = 0.0;
    let ablated = register(&moving, &fixed, &ablated_cfg).unwrap();

    let r_with = flow_cycle_residual(&with_cycles.backward, &with_cycles.forward)
        .unwrap()
        .mean_magnitude();
    let r_without =
        flow_cycle_residual(&ablated.backward, &ablated.forward).unwrap().mean_magnitude();
    assert!(
        r_with < r_without,
        "cycle terms did not reduce the residual: {r_with} vs {r_without}"
    );
}

#[test]
fn registration_is_deterministic() {
    let (moving, fixed, _) = quick_case();
    let cfg = RegistrationConfig {
        levels: 2,
        iters_per_level: vec![15, 10],
        ..RegistrationConfig::default()
    };
    let a = register(&moving, &fixed, &cfg).unwrap();
    let b = register(&moving, &fixed, &cfg).unwrap();
    assert_eq!(a.forward.data(), b.forward.data());
    assert_eq!(a.backward.data(), b.backward.data());
    assert_eq!(a.warped_moving.data(), b.warped_moving.data());
    assert_eq!(a.trace.len(), b.trace.len());
    for (ta, tb) in a.trace.iter().zip(b.trace.iter()) {
        for (x, y) in ta.iter().zip(tb.iter()) {
            assert_eq!(x.total, y.total);
        }
    }
}

#[test]
fn trace_settles_at_the_finest_level() {
    let (moving, fixed, _) = quick_case();
    let res = register(&moving, &fixed, &quick_config()).unwrap();
    let finest = res.trace.last().unwrap();
    assert!(finest.len() >= 10);
    // Totals over the last 10 iterations are non-increasing within 1e-4
    // relative tolerance.
    let tail = &finest[finest.len() - 10..];
    for pair in tail.windows(2) {
        let (prev, next) = (pair[0].total, pair[1].total);
        assert!(
            next <= prev * (1.0 + 1e-4) + 1e-12,
            "trace increased at the end: {prev} -> {next}"
        );
    }
    // And the windowed trend over the whole level is non-increasing.
    if finest.len() >= 20 {
        let window_mean = |s: &[cicreg_core::LossBreakdown]| {
            s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64
        };
        let early = window_mean(&finest[..10]);
        let late = window_mean(&finest[finest.len() - 10..]);
        assert!(late <= early * (1.0 + 1e-4), "windowed trend rose: {early} -> {late}");
    }
}

#[test]
fn jacobian_penalty_suppresses_folding() {
    // Aggressive problem: a sharply folded target warp chased with the
    // stabilizers off, so only the hinge stands between the solver and
    // folding.
    let dims = Dims::new(32, 32, 32);
    let moving = brain_phantom(dims, 7);
    let c = (32.0 - 1.0) / 2.0;
    let amp = 8.0;
    let truth = cicreg_core::synth::multi_bump_field(
        dims,
        &[
            ([c - 5.0, c, c], [amp, 0.0, 0.0], 3.5),
            ([c + 5.0, c, c], [-amp, 0.0, 0.0], 3.5),
            ([c, c - 4.0, c + 3.0], [0.0, amp * 0.7, -amp * 0.6], 3.5),
            ([c + 2.0, c + 5.0, c - 4.0], [-amp * 0.5, -amp * 0.5, amp * 0.6], 3.5),
        ],
    );
    let fixed = warp_volume(&moving, &truth);

    let mut unpenalized = RegistrationConfig::default();
    unpenalized.grad_smooth_sigma = 0.5;
    unpenalized.weights = LossWeights {
        similarity_enabled: true,
        lambda_smooth: 0.01,
        lambda_img_cyc: 0.0,
        lambda_flow_cyc: 0.0,
        lambda_jac: 0.0,
    };
    let mut penalized = unpenalized.clone();
    penalized.weights.lambda_jac = 1000.0;

    let r0 = register(&moving, &fixed, &unpenalized).unwrap();
    let r1 = register(&moving, &fixed, &penalized).unwrap();
    let j0 = cicreg_core::jacobian::jacobian_report(&r0.forward).unwrap();
    let j1 = cicreg_core::jacobian::jacobian_report(&r1.forward).unwrap();
    assert!(j0.pct_nonpositive > 0.5, "unpenalized run folded only {}%", j0.pct_nonpositive);
    assert!(
        j1.pct_nonpositive * 10.0 <= j0.pct_nonpositive,
        "penalty reduced folding only {}% -> {}%",
        j0.pct_nonpositive,
        j1.pct_nonpositive
    );
}
