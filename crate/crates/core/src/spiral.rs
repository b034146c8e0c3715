//! Contracting-spiral test bed: a linear map with known iterate geometry.
//!
//! The map rotates the offset from a fixed center by angle theta inside a
//! chosen 2-plane and contracts the whole offset by rho per application.
//! When the initial offset lies inside the rotation plane, every diagnostic
//! has a closed form built on the per-step shrink factor
//!
//! ```text
//! s = sqrt(1 - 2 rho cos(theta) + rho^2)
//! ||delta_k||  = rho^k * s * ||e0||
//! cos(delta_k, delta_{k+1}) = cos(theta)   (constant)
//! a_k = ||delta_k - delta_{k-1}|| = rho^(k-1) * s^2 * ||e0||
//! ```
//!
//! Derivation: write the in-plane offset o_k = x_k - c, so o_{k+1} = rho R o_k
//! and delta_k = (rho R - I) o_k. For any in-plane unit vector u,
//! ||(rho R - I) u||^2 = rho^2 - 2 rho cos(theta) + 1 = s^2, hence
//! ||delta_k|| = s ||o_k|| = s rho^k ||e0||; and delta_{k+1} = rho R delta_k
//! means consecutive deltas keep the fixed angle theta while both the norms
//! and their differences decay geometrically with ratio rho.
//!
//! This makes the module the independent oracle for the geometry pipeline
//! and the exit policies: `predicted_exit_step` computes exit steps straight
//! from the formulas, never calling the iteration code under test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::{ExitConfig, ExitPolicy};
use crate::geometry::IterateTrace;
use crate::vecmath::{dot, norm2, sub};

const PLANE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralConfig {
    pub dim: usize,
    /// Contraction factor per step, in (0, 1]. 1 means pure rotation.
    pub rho: f64,
    /// Rotation angle per step, radians.
    pub theta: f64,
    pub center: Vec<f64>,
    /// Initial offset from the center; must lie in the rotation plane.
    pub e0: Vec<f64>,
    /// Orthonormal basis (u, v) of the rotation plane.
    pub plane: (Vec<f64>, Vec<f64>),
}

impl SpiralConfig {
    /// Spiral in the plane of the first two coordinate axes.
    pub fn axis_aligned(dim: usize, rho: f64, theta: f64, radius: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidConfig("spiral needs dim >= 2".into()));
        }
        let mut u = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        u[0] = 1.0;
        v[1] = 1.0;
        let mut e0 = vec![0.0; dim];
        e0[0] = radius;
        let cfg = SpiralConfig {
            dim,
            rho,
            theta,
            center: vec![0.0; dim],
            e0,
            plane: (u, v),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::InvalidConfig("theta must be finite".into()));
        }
        let (u, v) = &self.plane;
        if u.len() != self.dim || v.len() != self.dim {
            return Err(Error::InvalidConfig("plane basis dimension mismatch".into()));
        }
        if self.center.len() != self.dim || self.e0.len() != self.dim {
            return Err(Error::InvalidConfig("center/e0 dimension mismatch".into()));
        }
        if (norm2(u) - 1.0).abs() > PLANE_TOL
            || (norm2(v) - 1.0).abs() > PLANE_TOL
            || dot(u, v).abs() > PLANE_TOL
        {
            return Err(Error::InvalidConfig(
                "plane basis must be orthonormal".into(),
            ));
        }
        // The closed forms assume the offset has no out-of-plane component.
        let a = dot(&self.e0, u);
        let b = dot(&self.e0, v);
        let mut resid = 0.0f64;
        for i in 0..self.dim {
            let w = self.e0[i] - a * u[i] - b * v[i];
            resid += w * w;
        }
        let scale = norm2(&self.e0).max(1.0);
        if resid.sqrt() > 1e-9 * scale {
            return Err(Error::InvalidConfig(
                "e0 must lie in the rotation plane".into(),
            ));
        }
        Ok(())
    }

    /// Per-step delta shrink factor s = sqrt(1 - 2 rho cos theta + rho^2).
    pub fn scale_factor(&self) -> f64 {
        (1.0 - 2.0 * self.rho * self.theta.cos() + self.rho * self.rho)
            .max(0.0)
            .sqrt()
    }

    pub fn radius(&self) -> f64 {
        norm2(&self.e0)
    }
}

/// One application of the spiral map.
pub fn spiral_step(x: &[f64], cfg: &SpiralConfig) -> Vec<f64> {
    let (u, v) = &cfg.plane;
    let off = sub(x, &cfg.center);
    let a = dot(&off, u);
    let b = dot(&off, v);
    let (sin, cos) = cfg.theta.sin_cos();
    let a2 = cfg.rho * (a * cos - b * sin);
    let b2 = cfg.rho * (a * sin + b * cos);
    (0..cfg.dim)
        .map(|i| {
            let w = off[i] - a * u[i] - b * v[i];
            cfg.center[i] + a2 * u[i] + b2 * v[i] + cfg.rho * w
        })
        .collect()
}

/// Closed-form state after k applications, valid because e0 is in-plane.
pub fn state_at(cfg: &SpiralConfig, k: usize) -> Vec<f64> {
    let (u, v) = &cfg.plane;
    let a = dot(&cfg.e0, u);
    let b = dot(&cfg.e0, v);
    let r = cfg.rho.powi(k as i32);
    let ang = cfg.theta * k as f64;
    let (sin, cos) = ang.sin_cos();
    let ak = r * (a * cos - b * sin);
    let bk = r * (a * sin + b * cos);
    (0..cfg.dim)
        .map(|i| cfg.center[i] + ak * u[i] + bk * v[i])
        .collect()
}

/// Closed-form diagnostics at loop counter k.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormStats {
    pub step_norm: f64,
    /// Cosine between delta_{k-1} and delta_k; None when either delta
    /// degenerates (k = 0 or s = 0).
    pub cosine: Option<f64>,
    /// ||delta_k - delta_{k-1}||; None at k = 0.
    pub acceleration: Option<f64>,
}

pub fn closed_form_stats(cfg: &SpiralConfig, k: usize) -> ClosedFormStats {
    let s = cfg.scale_factor();
    let r0 = cfg.radius();
    let step_norm = cfg.rho.powi(k as i32) * s * r0;
    let degenerate = s * r0 < 1e-300;
    ClosedFormStats {
        step_norm,
        cosine: if k >= 1 && !degenerate {
            Some(cfg.theta.cos())
        } else {
            None
        },
        acceleration: if k >= 1 {
            Some(cfg.rho.powi(k as i32 - 1) * s * s * r0)
        } else {
            None
        },
    }
}

/// Run the map forward and collect the iterate trace x(0) .. x(steps).
pub fn simulate_trace(cfg: &SpiralConfig, steps: usize) -> Result<IterateTrace> {
    cfg.validate()?;
    let mut x: Vec<f64> = cfg
        .center
        .iter()
        .zip(&cfg.e0)
        .map(|(c, e)| c + e)
        .collect();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x.clone());
    for _ in 0..steps {
        x = spiral_step(&x, cfg);
        states.push(x.clone());
    }
    IterateTrace::new(0, 0, states)
}

/// Offsets applied between consecutive spiral segments, modeling coarse
/// drift between blocks on top of the fine within-loop contraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub block_jumps: Vec<Vec<f64>>,
}

/// Label of one state in a multi-segment trace: which spiral segment it
/// belongs to and the step index within that segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLabel {
    pub segment: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct TwoScaleTrace {
    pub states: Vec<Vec<f64>>,
    pub labels: Vec<StageLabel>,
}

impl TwoScaleTrace {
    pub fn to_iterate_trace(&self) -> Result<IterateTrace> {
        IterateTrace::new(0, 0, self.states.clone())
    }
}

/// Concatenate spiral segments separated by large between-segment jumps,
/// imitating trajectories whose fine-scale convergence sits inside a
/// coarser drift. Segment i runs `steps[i]` applications of `spirals[i]`;
/// each jump must dominate the final converged step of the segment before
/// it, so the two scales stay separated.
pub fn generate_two_scale_trace(
    spirals: &[SpiralConfig],
    steps: &[usize],
    drift: &DriftConfig,
) -> Result<TwoScaleTrace> {
    let jumps = &drift.block_jumps;
    if spirals.is_empty() || spirals.len() != steps.len() {
        return Err(Error::InvalidConfig(
            "need one step count per spiral segment".into(),
        ));
    }
    if jumps.len() + 1 != spirals.len() {
        return Err(Error::InvalidConfig(
            "need exactly one jump between consecutive segments".into(),
        ));
    }
    let dim = spirals[0].dim;
    for s in spirals {
        s.validate()?;
        if s.dim != dim {
            return Err(Error::InvalidConfig("segments must share dimension".into()));
        }
    }

    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<StageLabel> = Vec::new();
    let mut x: Vec<f64> = Vec::new();

    for (seg, (cfg, &n)) in spirals.iter().zip(steps).enumerate() {
        let (start, center) = if seg == 0 {
            let start: Vec<f64> = cfg
                .center
                .iter()
                .zip(&cfg.e0)
                .map(|(c, e)| c + e)
                .collect();
            (start, cfg.center.clone())
        } else {
            let jump = &jumps[seg - 1];
            if jump.len() != dim {
                return Err(Error::InvalidConfig("jump dimension mismatch".into()));
            }
            let prev = spirals[seg - 1].clone();
            let last_step =
                prev.rho.powi(steps[seg - 1] as i32 - 1) * prev.scale_factor() * prev.radius();
            if norm2(jump) <= last_step {
                return Err(Error::InvalidConfig(format!(
                    "segment {seg} jump norm {} must exceed preceding final step norm {}",
                    norm2(jump),
                    last_step
                )));
            }
            let start: Vec<f64> = x.iter().zip(jump).map(|(a, b)| a + b).collect();
            // Recenter so the new segment's offset is its own e0.
            let center: Vec<f64> = start.iter().zip(&cfg.e0).map(|(s, e)| s - e).collect();
            (start, center)
        };
        let mut local = cfg.clone();
        local.center = center;
        x = start;
        states.push(x.clone());
        labels.push(StageLabel { segment: seg, step: 0 });
        for k in 0..n {
            x = spiral_step(&x, &local);
            states.push(x.clone());
            labels.push(StageLabel {
                segment: seg,
                step: k + 1,
            });
        }
    }

    Ok(TwoScaleTrace { states, labels })
}

/// Predict the exit step of a policy on the spiral straight from the
/// closed forms — the oracle the iteration code is checked against. For
/// the KL policy, `decoder` maps a state to logits (here a linear map
/// given by row-major `w` of shape dim x n_out) and the prediction decodes
/// closed-form states only.
pub fn predicted_exit_step(
    cfg: &SpiralConfig,
    exit: &ExitConfig,
    decoder: Option<&[Vec<f64>]>,
) -> Result<(bool, usize)> {
    cfg.validate()?;
    exit.validate()?;

    let s = cfg.scale_factor();
    let r0 = cfg.radius();
    let eps = exit.epsilon;

    // Local softmax/KL so the oracle shares nothing with the code under test.
    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        e.iter().map(|v| v / tot).collect()
    };
    let kl = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
            .sum()
    };
    let decode = |k: usize| -> Result<Vec<f64>> {
        let w = decoder.ok_or_else(|| {
            Error::InvalidConfig("kl prediction requires a decoder matrix".into())
        })?;
        if w.len() != cfg.dim {
            return Err(Error::shape("predicted_exit_step", "decoder rows != dim"));
        }
        let x = state_at(cfg, k);
        let n_out = w[0].len();
        let mut z = vec![0.0; n_out];
        for (xi, wrow) in x.iter().zip(w) {
            for (zj, wij) in z.iter_mut().zip(wrow) {
                *zj += xi * wij;
            }
        }
        Ok(softmax(&z))
    };

    match exit.policy {
        ExitPolicy::StepNorm => {
            for k in 0..exit.k_max {
                if k < exit.min_steps {
                    continue;
                }
                let mut stat = cfg.rho.powi(k as i32) * s * r0;
                if exit.normalized {
                    let xnorm = norm2(&state_at(cfg, k));
                    stat /= xnorm + eps;
                }
                if stat < exit.tau {
                    return Ok((true, k));
                }
            }
            Ok((false, exit.k_max))
        }
        ExitPolicy::Kl => {
            let mut p_prev = decode(0)?;
            for k in 0..exit.k_max {
                let p_new = decode(k + 1)?;
                let stat = kl(&p_new, &p_prev);
                if k >= exit.min_steps && stat < exit.tau {
                    return Ok((true, k));
                }
                p_prev = p_new;
            }
            Ok((false, exit.k_max))
        }
        ExitPolicy::Acceleration => {
            let mut prev_small = false;
            for k in 1..exit.k_max {
                let mut stat = cfg.rho.powi(k as i32 - 1) * s * s * r0;
                if exit.normalized {
                    let denom =
                        cfg.rho.powi(k as i32) * s * r0 + cfg.rho.powi(k as i32 - 1) * s * r0 + eps;
                    stat /= denom;
                }
                let small = stat < exit.tau;
                if small && (prev_small || !exit.two_hit) && k >= exit.min_steps {
                    return Ok((true, k));
                }
                prev_small = small;
            }
            Ok((false, exit.k_max))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::StepStats;

    #[test]
    fn scale_factor_worked_values() {
        let c = SpiralConfig::axis_aligned(4, 0.9, 30f64.to_radians(), 1.0).unwrap();
        assert!((c.scale_factor() - 0.5011529439083545).abs() < 1e-15);
        let c = SpiralConfig::axis_aligned(4, 0.99, 5f64.to_radians(), 1.0).unwrap();
        assert!((c.scale_factor() - 0.08737561317864267).abs() < 1e-15);
    }

    #[test]
    fn simulated_trace_matches_closed_forms() {
        let c = SpiralConfig::axis_aligned(6, 0.9, 30f64.to_radians(), 2.0).unwrap();
        let trace = simulate_trace(&c, 40).unwrap();
        let stats = StepStats::from_trace(&trace, 1e-8).unwrap();
        for k in 0..40 {
            let cf = closed_form_stats(&c, k);
            assert!(
                (stats.step_norms[k] - cf.step_norm).abs() < 1e-9 * cf.step_norm.max(1e-30),
                "step norm mismatch at k={k}"
            );
            if k >= 1 {
                let got = stats.cosines[k - 1].expect("well-defined");
                assert!((got - cf.cosine.unwrap()).abs() < 1e-9);
                let a = stats.accelerations[k - 1];
                assert!((a - cf.acceleration.unwrap()).abs() < 1e-9 * a.max(1e-30));
            }
        }
    }

    #[test]
    fn closed_form_state_matches_iteration() {
        let c = SpiralConfig::axis_aligned(5, 0.95, 0.7, 3.0).unwrap();
        let mut x: Vec<f64> = c.center.iter().zip(&c.e0).map(|(a, b)| a + b).collect();
        for k in 0..25 {
            let cf = state_at(&c, k);
            for (a, b) in x.iter().zip(&cf) {
                assert!((a - b).abs() < 1e-10);
            }
            x = spiral_step(&x, &c);
        }
    }

    #[test]
    fn out_of_plane_offset_rejected() {
        let mut c = SpiralConfig::axis_aligned(4, 0.9, 0.5, 1.0).unwrap();
        c.e0[2] = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pure_rotation_keeps_radius() {
        let c = SpiralConfig::axis_aligned(3, 1.0, 0.3, 2.0).unwrap();
        let x = state_at(&c, 100);
        assert!((norm2(&x) - 2.0).abs() < 1e-9);
        // Constant step norm: rho = 1 never contracts.
        let cf = closed_form_stats(&c, 50);
        assert!((cf.step_norm - closed_form_stats(&c, 0).step_norm).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_map_stats_degenerate() {
        // rho = 1, theta = 0: the map is the identity, s = 0.
        let c = SpiralConfig::axis_aligned(3, 1.0, 0.0, 1.5).unwrap();
        assert_eq!(c.scale_factor(), 0.0);
        let cf = closed_form_stats(&c, 3);
        assert_eq!(cf.step_norm, 0.0);
        assert!(cf.cosine.is_none());
        assert_eq!(cf.acceleration, Some(0.0));
    }

    #[test]
    fn half_turn_and_worked_rotation_step() {
        let c = SpiralConfig::axis_aligned(2, 1.0, std::f64::consts::PI, 1.0).unwrap();
        let y = spiral_step(&[1.0, 0.0], &c);
        assert!((y[0] + 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
        let c = SpiralConfig::axis_aligned(2, 0.9, 30f64.to_radians(), 1.0).unwrap();
        let y = spiral_step(&[1.0, 0.0], &c);
        assert!((y[0] - 0.9 * 30f64.to_radians().cos()).abs() < 1e-12);
        assert!((y[1] - 0.45).abs() < 1e-12);
        // The center is a fixed point.
        let mut shifted = c.clone();
        shifted.center = vec![2.0, -1.0];
        let y = spiral_step(&[2.0, -1.0], &shifted);
        assert!((y[0] - 2.0).abs() < 1e-15 && (y[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_scale_requires_dominating_jump() {
        let a = SpiralConfig::axis_aligned(4, 0.9, 0.5, 1.0).unwrap();
        let b = SpiralConfig::axis_aligned(4, 0.8, 0.3, 1.0).unwrap();
        let tiny = DriftConfig {
            block_jumps: vec![vec![1e-12, 0.0, 0.0, 0.0]],
        };
        assert!(generate_two_scale_trace(&[a.clone(), b.clone()], &[30, 30], &tiny).is_err());
        let big = DriftConfig {
            block_jumps: vec![vec![5.0, 0.0, 0.0, 0.0]],
        };
        let tr = generate_two_scale_trace(&[a, b], &[30, 30], &big).unwrap();
        assert_eq!(tr.states.len(), 62);
        assert_eq!(tr.labels.len(), 62);
        assert_eq!(tr.labels[31], StageLabel { segment: 1, step: 0 });
        // Jump actually applied between the segment boundary states.
        let d = sub(&tr.states[31], &tr.states[30]);
        assert!((norm2(&d) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn predicted_step_norm_exit_matches_log_solution() {
        // rho = 0.9, theta = 30 deg, r0 = 1, tau = 1e-3:
        // rho^k * s < tau first at k = 60 (s = 0.50115...).
        let c = SpiralConfig::axis_aligned(4, 0.9, 30f64.to_radians(), 1.0).unwrap();
        let e = ExitConfig::new(ExitPolicy::StepNorm, 1e-3, 200).unwrap();
        let (hit, k) = predicted_exit_step(&c, &e, None).unwrap();
        assert!(hit);
        assert_eq!(k, 60);
    }

    #[test]
    fn predicted_acceleration_exit_latches_two_hits() {
        // a_k = rho^(k-1) s^2 first dips under 1e-3 at k = 54; the two-hit
        // rule fires one step later.
        let c = SpiralConfig::axis_aligned(4, 0.9, 30f64.to_radians(), 1.0).unwrap();
        let e = ExitConfig::new(ExitPolicy::Acceleration, 1e-3, 200).unwrap();
        let (hit, k) = predicted_exit_step(&c, &e, None).unwrap();
        assert!(hit);
        assert_eq!(k, 55);
        let s = c.scale_factor();
        let a53 = 0.9f64.powi(52) * s * s;
        let a54 = 0.9f64.powi(53) * s * s;
        assert!(a53 > 1e-3 && a54 < 1e-3);
    }
}
