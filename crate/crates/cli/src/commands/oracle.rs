//! `loopscope oracle`: self-check of the simulated contraction fixtures
//! against their closed forms, and of iterated exit decisions against
//! analytically predicted exit steps. One pass/fail line per identity;
//! any mismatch fails the command (nonzero exit status).
//!
//! The built-in grid crosses rho in {0.9, 0.99, 1.0} with theta in
//! {0, 5, 30} degrees at dim 4, radius 1; [[spiral]] sections add cases.

use anyhow::{bail, Result};
use loopscope_core::dump::{self, OracleRow};
use loopscope_core::exit::{run_with_exit, ExitConfig, ExitPolicy};
use loopscope_core::geometry::{StepStats, STAT_EPS};
use loopscope_core::spiral::{
    closed_form_stats, predicted_exit_step, simulate_trace, spiral_step, state_at, SpiralConfig,
};

use crate::config::LoadedConfig;
use crate::manifest::Manifest;

const CURVE_TOL: f64 = 1e-9;
const GRID_RHOS: [f64; 3] = [0.9, 0.99, 1.0];
const GRID_THETAS_DEG: [f64; 3] = [0.0, 5.0, 30.0];
const DECODER_OUT: usize = 5;

/// Fixed full-rank readout from a 4-d state to 5 logits, for KL cases.
fn decoder_4x5() -> Vec<Vec<f64>> {
    vec![
        vec![0.9, -0.4, 0.2, 0.05, -0.7],
        vec![-0.3, 0.8, -0.6, 0.4, 0.1],
        vec![0.2, 0.1, 0.7, -0.5, -0.2],
        vec![-0.1, -0.2, 0.3, 0.6, 0.4],
    ]
}

/// Deterministic readout for other state dimensions, values in (-1, 1).
fn decoder_matrix(dim: usize) -> Vec<Vec<f64>> {
    if dim == 4 {
        return decoder_4x5();
    }
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    (0..dim)
        .map(|_| {
            (0..DECODER_OUT)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect()
        })
        .collect()
}

struct Case {
    name: String,
    cfg: SpiralConfig,
    steps: usize,
}

fn cases(lc: &LoadedConfig) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for rho in GRID_RHOS {
        for deg in GRID_THETAS_DEG {
            out.push(Case {
                // Space-separated so the case survives a naive CSV reader.
                name: format!("rho={rho} theta={deg}"),
                cfg: SpiralConfig::axis_aligned(4, rho, deg.to_radians(), 1.0)?,
                steps: 80,
            });
        }
    }
    for (i, sec) in lc.config.spiral.iter().enumerate() {
        out.push(Case {
            name: format!("spiral{i} rho={} theta={}", sec.rho, sec.theta_deg),
            cfg: sec.to_spiral()?,
            steps: sec.steps,
        });
    }
    Ok(out)
}

fn fmt_exit(exited: bool, k: usize) -> String {
    if exited {
        format!("exit@k={k}")
    } else {
        format!("kmax@{k}")
    }
}

/// Max |simulated - closed form| per metric, with flagged-cosine
/// definedness required to agree exactly.
fn curve_rows(case: &Case) -> Result<Vec<OracleRow>> {
    let trace = simulate_trace(&case.cfg, case.steps)?;
    let stats = StepStats::from_trace(&trace, STAT_EPS)?;
    let mut d_step: f64 = 0.0;
    let mut d_cos: f64 = 0.0;
    let mut d_acc: f64 = 0.0;
    let mut defined_ok = true;
    for k in 0..case.steps {
        let cf = closed_form_stats(&case.cfg, k);
        d_step = d_step.max((stats.step_norms[k] - cf.step_norm).abs());
        if k >= 1 {
            match (stats.cosines[k - 1], cf.cosine) {
                (Some(a), Some(b)) => d_cos = d_cos.max((a - b).abs()),
                (None, None) => {}
                _ => defined_ok = false,
            }
            let acc = cf.acceleration.expect("defined for k >= 1");
            d_acc = d_acc.max((stats.accelerations[k - 1] - acc).abs());
        }
    }
    let mk = |metric: &str, diff: f64, ok: bool| OracleRow {
        check: format!("curve-{metric}"),
        case: case.name.clone(),
        expected: format!("<={CURVE_TOL:e}"),
        actual: if ok {
            format!("{diff:.3e}")
        } else {
            "definedness mismatch".into()
        },
        pass: ok && diff <= CURVE_TOL,
    };
    Ok(vec![
        mk("step-norm", d_step, true),
        mk("cosine", d_cos, defined_ok),
        mk("acceleration", d_acc, true),
    ])
}

fn exit_row(case: &Case, ec: &ExitConfig, w: Option<&[Vec<f64>]>) -> Result<OracleRow> {
    let predicted = predicted_exit_step(&case.cfg, ec, w)?;
    let step = |x: &[f64]| spiral_step(x, &case.cfg);
    let decision = match w {
        None => {
            let (_, d) = run_with_exit(step, state_at(&case.cfg, 0), ec, None::<fn(&[f64]) -> Vec<f64>>)?;
            d
        }
        Some(w) => {
            let decode = |x: &[f64]| -> Vec<f64> {
                let z: Vec<f64> = (0..DECODER_OUT)
                    .map(|j| x.iter().zip(w).map(|(xi, row)| xi * row[j]).sum())
                    .collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                e.iter().map(|v| v / tot).collect()
            };
            let (_, d) = run_with_exit(step, state_at(&case.cfg, 0), ec, Some(decode))?;
            d
        }
    };
    let actual = (decision.exited_early, decision.steps_used);
    Ok(OracleRow {
        check: format!("exit-{}", ec.policy.label()),
        case: format!(
            "{} tau={:e} normalized={}",
            case.name, ec.tau, ec.normalized
        ),
        expected: fmt_exit(predicted.0, predicted.1),
        actual: fmt_exit(actual.0, actual.1),
        pass: actual == predicted,
    })
}

/// A pure rotation's step norm never shrinks, so step-norm must ride to
/// the ceiling.
fn rotation_never_exits(k_max: usize) -> Result<OracleRow> {
    let cfg = SpiralConfig::axis_aligned(4, 1.0, 30f64.to_radians(), 1.0)?;
    let ec = ExitConfig::new(ExitPolicy::StepNorm, 1e-2, k_max)?;
    let predicted = predicted_exit_step(&cfg, &ec, None)?;
    let (_, d) = run_with_exit(
        |x: &[f64]| spiral_step(x, &cfg),
        state_at(&cfg, 0),
        &ec,
        None::<fn(&[f64]) -> Vec<f64>>,
    )?;
    let pass = !predicted.0 && !d.exited_early && d.steps_used == k_max;
    Ok(OracleRow {
        check: "rotation-never-exits".into(),
        case: "rho=1 theta=30 tau=1e-2".into(),
        expected: fmt_exit(false, k_max),
        actual: fmt_exit(d.exited_early, d.steps_used),
        pass,
    })
}

/// Zero rotation angle makes consecutive deltas parallel: every defined
/// cosine must be 1.
fn zero_angle_cosine() -> Result<OracleRow> {
    let cfg = SpiralConfig::axis_aligned(4, 0.9, 0.0, 1.0)?;
    let trace = simulate_trace(&cfg, 80)?;
    let stats = StepStats::from_trace(&trace, STAT_EPS)?;
    let mut worst: f64 = 0.0;
    let mut all_defined = true;
    for c in &stats.cosines {
        match c {
            Some(v) => worst = worst.max((v - 1.0).abs()),
            None => all_defined = false,
        }
    }
    let closed = closed_form_stats(&cfg, 1).cosine == Some(1.0);
    Ok(OracleRow {
        check: "zero-angle-cosine".into(),
        case: "rho=0.9 theta=0".into(),
        expected: "cosine==1 (<=1e-12)".into(),
        actual: if all_defined {
            format!("max|c-1|={worst:.3e}")
        } else {
            "undefined cosine".into()
        },
        pass: all_defined && closed && worst <= 1e-12,
    })
}

pub fn run(lc: &LoadedConfig) -> Result<()> {
    let cfg = &lc.config;
    let taus = &cfg.oracle.taus;
    let k_max = cfg.oracle.k_max;
    let mut rows = Vec::new();

    for case in cases(lc)? {
        rows.extend(curve_rows(&case)?);
        let w = decoder_matrix(case.cfg.dim);
        for &tau in taus {
            for normalized in [false, true] {
                for policy in [ExitPolicy::StepNorm, ExitPolicy::Acceleration] {
                    let mut ec = ExitConfig::new(policy, tau, k_max)?;
                    ec.normalized = normalized;
                    rows.push(exit_row(&case, &ec, None)?);
                }
            }
            let ec = ExitConfig::new(ExitPolicy::Kl, tau, k_max)?;
            rows.push(exit_row(&case, &ec, Some(&w))?);
        }
    }
    rows.push(rotation_never_exits(k_max)?);
    rows.push(zero_angle_cosine()?);

    for r in &rows {
        println!(
            "[{}] {} {}: expected {}, actual {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.check,
            r.case,
            r.expected,
            r.actual
        );
    }
    let failed = rows.iter().filter(|r| !r.pass).count();

    let name = format!("{}_oracle.csv", lc.run_id);
    dump::write_oracle_report(&cfg.out_dir.join(&name), &rows, &lc.config_hash)?;
    let mut manifest = Manifest::new(&lc.run_id, "oracle", &lc.config_hash, cfg.seed);
    manifest.push_output(&name);
    manifest.write(&cfg.out_dir)?;

    println!("oracle: {} checks, {} failed", rows.len(), failed);
    if failed > 0 {
        bail!("oracle: {failed} of {} checks failed", rows.len());
    }
    Ok(())
}
