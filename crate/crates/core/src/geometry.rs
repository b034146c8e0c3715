//! Geometry of loop iterates: per-step differences, their norms, turning
//! angles and accelerations, token-aggregated curves, and 2-D PCA views of
//! whole trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::vecmath::{dot, norm2, sub};

/// Norm floor below which a step direction is treated as undefined when
/// computing cosines.
pub const COSINE_EPS: f64 = 1e-12;

/// Default epsilon guarding normalized statistics against division by zero.
pub const STAT_EPS: f64 = 1e-8;

/// States of one token position across the loop steps of one group:
/// `states[k]` is the hidden state after k loop applications, so a loop of
/// length L records L+1 states.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateTrace {
    pub group: usize,
    pub token: usize,
    pub states: Vec<Vec<f64>>,
}

impl IterateTrace {
    pub fn new(group: usize, token: usize, states: Vec<Vec<f64>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InsufficientData("trace has no states".into()));
        }
        let d = states[0].len();
        if d == 0 || states.iter().any(|s| s.len() != d) {
            return Err(Error::shape("iterate_trace", "ragged or empty states"));
        }
        Ok(IterateTrace {
            group,
            token,
            states,
        })
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Per-step differences x^(k+1) - x^(k); a trace of n states yields n-1.
pub fn deltas(trace: &IterateTrace) -> Result<Vec<Vec<f64>>> {
    if trace.states.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least 2 states for deltas".into(),
        ));
    }
    Ok(trace
        .states
        .windows(2)
        .map(|w| sub(&w[1], &w[0]))
        .collect())
}

/// Cosine of the angle between consecutive deltas. Entry k (for k >= 1)
/// compares delta k with delta k-1; pairs where either norm falls below
/// `COSINE_EPS` are flagged `None` and excluded from any aggregation.
pub fn step_cosines(deltas: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    if deltas.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least 2 deltas for cosines".into(),
        ));
    }
    Ok(deltas
        .windows(2)
        .map(|w| {
            let (prev, cur) = (&w[0], &w[1]);
            let np = norm2(prev);
            let nc = norm2(cur);
            if np < COSINE_EPS || nc < COSINE_EPS {
                None
            } else {
                Some(dot(cur, prev) / (nc * np))
            }
        })
        .collect())
}

/// Acceleration a^(k) = ||delta^(k) - delta^(k-1)|| for k >= 1, plus its
/// normalized companion a^(k) / (||delta^(k)|| + ||delta^(k-1)|| + eps),
/// which lives in [0, 2].
pub fn accelerations(deltas: &[Vec<f64>], epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if deltas.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least 2 deltas for accelerations".into(),
        ));
    }
    let mut raw = Vec::with_capacity(deltas.len() - 1);
    let mut normalized = Vec::with_capacity(deltas.len() - 1);
    for w in deltas.windows(2) {
        let a = norm2(&sub(&w[1], &w[0]));
        raw.push(a);
        normalized.push(a / (norm2(&w[1]) + norm2(&w[0]) + epsilon));
    }
    Ok((raw, normalized))
}

/// All per-step diagnostics of one trace.
///
/// Index conventions: `step_norms[k]` is ||delta^(k)|| for k = 0..n-1;
/// `cosines[k-1]` and `accelerations[k-1]` hold the k-th cosine/acceleration
/// (both defined from k = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step_norms: Vec<f64>,
    pub normalized_steps: Vec<f64>,
    pub cosines: Vec<Option<f64>>,
    pub accelerations: Vec<f64>,
    pub normalized_accels: Vec<f64>,
}

impl StepStats {
    pub fn from_trace(trace: &IterateTrace, epsilon: f64) -> Result<Self> {
        let ds = deltas(trace)?;
        let step_norms: Vec<f64> = ds.iter().map(|d| norm2(d)).collect();
        let normalized_steps: Vec<f64> = ds
            .iter()
            .zip(&trace.states)
            .map(|(d, x)| norm2(d) / (norm2(x) + epsilon))
            .collect();
        let (cosines, accelerations, normalized_accels) = if ds.len() >= 2 {
            let cos = step_cosines(&ds)?;
            let (a, an) = accelerations(&ds, epsilon)?;
            (cos, a, an)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        Ok(StepStats {
            step_norms,
            normalized_steps,
            cosines,
            accelerations,
            normalized_accels,
        })
    }
}

/// Mean/std/count per loop step k, aggregated across traces. `mean[k]` is
/// `None` where no trace contributed a defined value. Std is the population
/// standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub mean: Vec<Option<f64>>,
    pub std: Vec<Option<f64>>,
    pub count: Vec<usize>,
}

impl AggregateCurve {
    fn from_samples(samples: Vec<Vec<f64>>) -> AggregateCurve {
        let mut mean = Vec::with_capacity(samples.len());
        let mut std = Vec::with_capacity(samples.len());
        let mut count = Vec::with_capacity(samples.len());
        for vals in samples {
            let n = vals.len();
            count.push(n);
            if n == 0 {
                mean.push(None);
                std.push(None);
                continue;
            }
            let m = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean.push(Some(m));
            std.push(Some(var.sqrt()));
        }
        AggregateCurve { mean, std, count }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurves {
    pub step_norms: AggregateCurve,
    pub normalized_steps: AggregateCurve,
    pub cosines: AggregateCurve,
    pub accelerations: AggregateCurve,
    pub normalized_accels: AggregateCurve,
}

/// Token-aggregated curves. Stats may have different lengths (traces of
/// different loop counts); each k aggregates whatever is defined there.
pub fn aggregate(stats: &[StepStats]) -> Result<AggregateCurves> {
    if stats.is_empty() {
        return Err(Error::InsufficientData("no stats to aggregate".into()));
    }
    fn collect<F>(stats: &[StepStats], len: impl Fn(&StepStats) -> usize, get: F) -> AggregateCurve
    where
        F: Fn(&StepStats, usize) -> Option<f64>,
    {
        let max_k = stats.iter().map(&len).max().unwrap_or(0);
        let mut samples = vec![Vec::new(); max_k];
        for s in stats {
            for k in 0..len(s) {
                if let Some(v) = get(s, k) {
                    samples[k].push(v);
                }
            }
        }
        AggregateCurve::from_samples(samples)
    }

    Ok(AggregateCurves {
        step_norms: collect(stats, |s| s.step_norms.len(), |s, k| Some(s.step_norms[k])),
        normalized_steps: collect(
            stats,
            |s| s.normalized_steps.len(),
            |s, k| Some(s.normalized_steps[k]),
        ),
        cosines: collect(stats, |s| s.cosines.len(), |s, k| s.cosines[k]),
        accelerations: collect(
            stats,
            |s| s.accelerations.len(),
            |s, k| Some(s.accelerations[k]),
        ),
        normalized_accels: collect(
            stats,
            |s| s.normalized_accels.len(),
            |s, k| Some(s.normalized_accels[k]),
        ),
    })
}

/// Top-2 principal directions of a point cloud, with the mean used for
/// centering and the explained variance of each component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

/// Fit a 2-D PCA on the union of points. Components are orthonormal and
/// follow a deterministic sign convention: the largest-magnitude coordinate
/// of each component is positive (first index wins ties).
pub fn fit_pca(points: &[Vec<f64>]) -> Result<PcaProjection> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(
            "pca needs at least 2 points".into(),
        ));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::InvalidInput("pca needs dimension >= 2".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("fit_pca", "ragged points"));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(Error::DegenerateData("all pca points identical".into()));
    }

    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    // Population covariance of the centered cloud.
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        let c: Vec<f64> = sub(p, &mean);
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }

    let pairs = symmetric_eigen(&cov)?;
    let mut components: [Vec<f64>; 2] = [pairs[0].1.clone(), pairs[1].1.clone()];
    for comp in components.iter_mut() {
        fix_sign(comp);
    }
    let explained_variance = [pairs[0].0.max(0.0), pairs[1].0.max(0.0)];
    Ok(PcaProjection {
        mean,
        components,
        explained_variance,
    })
}

fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    let mut best = v[0].abs();
    for (i, x) in v.iter().enumerate().skip(1) {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

pub fn project_point(proj: &PcaProjection, point: &[f64]) -> Result<[f64; 2]> {
    if point.len() != proj.mean.len() {
        return Err(Error::shape(
            "project",
            format!("point dim {} vs pca dim {}", point.len(), proj.mean.len()),
        ));
    }
    let centered = sub(point, &proj.mean);
    Ok([
        dot(&centered, &proj.components[0]),
        dot(&centered, &proj.components[1]),
    ])
}

/// Project every state of a trace into the PCA plane, preserving order.
pub fn project_trajectory(proj: &PcaProjection, trace: &IterateTrace) -> Result<Vec<[f64; 2]>> {
    trace
        .states
        .iter()
        .map(|s| project_point(proj, s))
        .collect()
}
