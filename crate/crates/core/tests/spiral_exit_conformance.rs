//! Conformance of the simulated contraction dynamics and the exit policies
//! against closed forms, over a grid of contraction factors and rotation
//! angles. The closed forms are evaluated straight from powers of rho, with
//! no shared code path with the iteration under test.

use loopscope_core::exit::{run_with_exit, ExitConfig, ExitPolicy};
use loopscope_core::geometry::StepStats;
use loopscope_core::spiral::{
    closed_form_stats, predicted_exit_step, simulate_trace, spiral_step, state_at, SpiralConfig,
};

const RHOS: [f64; 3] = [0.9, 0.99, 1.0];
const THETAS_DEG: [f64; 3] = [0.0, 5.0, 30.0];
const TAUS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-2];

fn grid() -> Vec<SpiralConfig> {
    let mut out = Vec::new();
    for rho in RHOS {
        for deg in THETAS_DEG {
            out.push(SpiralConfig::axis_aligned(4, rho, deg.to_radians(), 1.0).unwrap());
        }
    }
    out
}

#[test]
fn simulated_curves_match_closed_forms_on_grid() {
    for cfg in grid() {
        let steps = 80;
        let trace = simulate_trace(&cfg, steps).unwrap();
        let stats = StepStats::from_trace(&trace, 1e-8).unwrap();
        for k in 0..steps {
            let cf = closed_form_stats(&cfg, k);
            assert!(
                (stats.step_norms[k] - cf.step_norm).abs() <= 1e-9,
                "rho {} theta {}: step norm at k={k}: {} vs {}",
                cfg.rho,
                cfg.theta,
                stats.step_norms[k],
                cf.step_norm
            );
            if k >= 1 {
                match (stats.cosines[k - 1], cf.cosine) {
                    (Some(sim), Some(cl)) => assert!(
                        (sim - cl).abs() <= 1e-9,
                        "rho {} theta {}: cosine at k={k}: {sim} vs {cl}",
                        cfg.rho,
                        cfg.theta
                    ),
                    (None, None) => {}
                    (sim, cl) => panic!(
                        "rho {} theta {}: cosine definedness differs at k={k}: {sim:?} vs {cl:?}",
                        cfg.rho, cfg.theta
                    ),
                }
                let cl_a = cf.acceleration.unwrap();
                assert!(
                    (stats.accelerations[k - 1] - cl_a).abs() <= 1e-9,
                    "rho {} theta {}: acceleration at k={k}: {} vs {cl_a}",
                    cfg.rho,
                    cfg.theta,
                    stats.accelerations[k - 1]
                );
            }
        }
    }
}

#[test]
fn iterated_exits_match_predictions_on_grid() {
    for cfg in grid() {
        for policy in [ExitPolicy::StepNorm, ExitPolicy::Acceleration] {
            for tau in TAUS {
                for normalized in [false, true] {
                    let mut exit = ExitConfig::new(policy, tau, 2000).unwrap();
                    exit.normalized = normalized;
                    let predicted = predicted_exit_step(&cfg, &exit, None).unwrap();
                    let step = |x: &[f64]| spiral_step(x, &cfg);
                    let (_, decision) = run_with_exit(
                        step,
                        state_at(&cfg, 0),
                        &exit,
                        None::<fn(&[f64]) -> Vec<f64>>,
                    )
                    .unwrap();
                    assert_eq!(
                        (decision.exited_early, decision.steps_used),
                        predicted,
                        "rho {} theta {} policy {:?} tau {tau} normalized {normalized}",
                        cfg.rho,
                        cfg.theta,
                        policy
                    );
                }
            }
        }
    }
}

#[test]
fn iterated_kl_exits_match_predictions_on_grid() {
    // Fixed full-rank linear readout from the 4-d state to 5 logits.
    let w: Vec<Vec<f64>> = vec![
        vec![0.9, -0.4, 0.2, 0.05, -0.7],
        vec![-0.3, 0.8, -0.6, 0.4, 0.1],
        vec![0.2, 0.1, 0.7, -0.5, -0.2],
        vec![-0.1, -0.2, 0.3, 0.6, 0.4],
    ];
    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        e.iter().map(|v| v / tot).collect()
    };
    for cfg in grid() {
        for tau in TAUS {
            let exit = ExitConfig::new(ExitPolicy::Kl, tau, 2000).unwrap();
            let predicted = predicted_exit_step(&cfg, &exit, Some(&w)).unwrap();
            let step = |x: &[f64]| spiral_step(x, &cfg);
            let decode = |x: &[f64]| -> Vec<f64> {
                let z: Vec<f64> = (0..5)
                    .map(|j| x.iter().zip(&w).map(|(xi, row)| xi * row[j]).sum())
                    .collect();
                softmax(&z)
            };
            let (_, decision) =
                run_with_exit(step, state_at(&cfg, 0), &exit, Some(decode)).unwrap();
            assert_eq!(
                (decision.exited_early, decision.steps_used),
                predicted,
                "rho {} theta {} tau {tau}",
                cfg.rho,
                cfg.theta
            );
        }
    }
}

#[test]
fn frozen_reference_exit_steps() {
    // rho 0.9, theta 30 deg, tau 1e-3, unnormalized: the step norm falls
    // under tau first at k = 60; the second consecutive small acceleration
    // lands at k = 55 (first small at 54).
    let cfg = SpiralConfig::axis_aligned(4, 0.9, 30f64.to_radians(), 1.0).unwrap();
    let sn = ExitConfig::new(ExitPolicy::StepNorm, 1e-3, 2000).unwrap();
    assert_eq!(predicted_exit_step(&cfg, &sn, None).unwrap(), (true, 60));
    let acc = ExitConfig::new(ExitPolicy::Acceleration, 1e-3, 2000).unwrap();
    assert_eq!(predicted_exit_step(&cfg, &acc, None).unwrap(), (true, 55));

    let step = |x: &[f64]| spiral_step(x, &cfg);
    let (_, d) = run_with_exit(
        step,
        state_at(&cfg, 0),
        &sn,
        None::<fn(&[f64]) -> Vec<f64>>,
    )
    .unwrap();
    assert_eq!((d.exited_early, d.steps_used), (true, 60));
    let (xf, d) = run_with_exit(
        step,
        state_at(&cfg, 0),
        &acc,
        None::<fn(&[f64]) -> Vec<f64>>,
    )
    .unwrap();
    assert_eq!((d.exited_early, d.steps_used), (true, 55));
    // An early exit hands back the state the triggering step departed from.
    let expect = state_at(&cfg, 55);
    for (a, b) in xf.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn single_hit_fires_one_step_before_two_hit() {
    let cfg = SpiralConfig::axis_aligned(4, 0.9, 30f64.to_radians(), 1.0).unwrap();
    let mut one = ExitConfig::new(ExitPolicy::Acceleration, 1e-3, 2000).unwrap();
    one.two_hit = false;
    assert_eq!(predicted_exit_step(&cfg, &one, None).unwrap(), (true, 54));
    let step = |x: &[f64]| spiral_step(x, &cfg);
    let (_, d) = run_with_exit(
        step,
        state_at(&cfg, 0),
        &one,
        None::<fn(&[f64]) -> Vec<f64>>,
    )
    .unwrap();
    assert_eq!((d.exited_early, d.steps_used), (true, 54));
}

#[test]
fn tighter_curvature_lets_acceleration_beat_step_norm() {
    // At rho 0.99, theta 5 deg the per-step decay is slow but consecutive
    // deltas barely differ, so the acceleration policy exits strictly
    // earlier than the step-norm policy at every grid threshold.
    let cfg = SpiralConfig::axis_aligned(4, 0.99, 5f64.to_radians(), 1.0).unwrap();
    for tau in TAUS {
        let sn = ExitConfig::new(ExitPolicy::StepNorm, tau, 5000).unwrap();
        let acc = ExitConfig::new(ExitPolicy::Acceleration, tau, 5000).unwrap();
        let (sn_exit, sn_k) = predicted_exit_step(&cfg, &sn, None).unwrap();
        let (acc_exit, acc_k) = predicted_exit_step(&cfg, &acc, None).unwrap();
        assert!(sn_exit && acc_exit, "tau {tau} should exit both policies");
        assert!(
            acc_k < sn_k,
            "tau {tau}: acceleration {acc_k} not earlier than step norm {sn_k}"
        );
    }
}
