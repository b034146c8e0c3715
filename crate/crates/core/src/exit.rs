//! Early-exit policies for loop iteration: step-norm, KL-between-decoded
//! distributions, and two-hit acceleration. `run_with_exit` drives a single
//! state vector; `BatchExit` applies the same policies per token over a
//! batch with frozen-state continuation.
//!
//! Control flow of the loop driver, which all policies share:
//!
//! ```text
//! k = 0; delta_prev = None; prev_small = false
//! while k < k_max:
//!     x1 = f(x0)                  # one loop application
//!     delta = x1 - x0
//!     evaluate policy statistic; on trigger -> return (x0, steps_used = k)
//!     delta_prev = delta; x0 = x1; k += 1
//! return (x0, steps_used = k_max)
//! ```
//!
//! Note the exit returns the state *before* the triggering application: the
//! statistic consumes one lookahead step that is then discarded. For the
//! acceleration policy the latch updates (`prev_small = small`) happen
//! exactly on the non-triggering branch, so two consecutive sub-threshold
//! accelerations are required when `two_hit` is set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vecmath::{norm2, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitPolicy {
    StepNorm,
    Kl,
    Acceleration,
}

impl ExitPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            ExitPolicy::StepNorm => "step-norm",
            ExitPolicy::Kl => "kl",
            ExitPolicy::Acceleration => "acceleration",
        }
    }
}

/// Minimum completed loop steps before a policy may fire. KL compares
/// decoded distributions and is meaningful from the first step; the
/// geometric statistics need a short warmup.
pub fn default_min_steps(policy: ExitPolicy) -> usize {
    match policy {
        ExitPolicy::Kl => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitConfig {
    pub policy: ExitPolicy,
    /// Exit threshold; strictly positive.
    pub tau: f64,
    /// Use the scale-free variants of step-norm / acceleration statistics.
    pub normalized: bool,
    /// Require two consecutive sub-threshold accelerations (acceleration
    /// policy only).
    pub two_hit: bool,
    pub min_steps: usize,
    pub k_max: usize,
    /// Epsilon in the normalized statistics' denominators.
    pub epsilon: f64,
}

impl ExitConfig {
    pub fn new(policy: ExitPolicy, tau: f64, k_max: usize) -> Result<Self> {
        let cfg = ExitConfig {
            policy,
            tau,
            normalized: false,
            two_hit: matches!(policy, ExitPolicy::Acceleration),
            min_steps: default_min_steps(policy),
            k_max,
            epsilon: crate::geometry::STAT_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.min_steps < 1 {
            return Err(Error::InvalidConfig("min_steps must be >= 1".into()));
        }
        if self.k_max < self.min_steps {
            return Err(Error::InvalidConfig(format!(
                "k_max {} < min_steps {}",
                self.k_max, self.min_steps
            )));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    ThresholdMet,
    KMaxReached,
}

impl ExitReason {
    pub fn label(&self) -> &'static str {
        match self {
            ExitReason::ThresholdMet => "threshold-met",
            ExitReason::KMaxReached => "k-max-reached",
        }
    }
}

/// Outcome of one exit-policy run. `trigger_values[i]` is the policy
/// statistic observed at loop counter `i + offset`, where the offset is 0
/// for step-norm and KL and 1 for acceleration (its statistic needs two
/// deltas).
#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    pub exited_early: bool,
    pub steps_used: usize,
    pub trigger_values: Vec<f64>,
    pub reason: ExitReason,
}

/// Step-norm statistic: ||delta||, or ||delta|| / (||x|| + eps) when
/// normalized. `x` is the state the step departed from.
pub fn step_norm_stat(delta: &[f64], x: &[f64], cfg: &ExitConfig) -> f64 {
    let n = norm2(delta);
    if cfg.normalized {
        n / (norm2(x) + cfg.epsilon)
    } else {
        n
    }
}

pub fn step_norm_trigger(delta: &[f64], x: &[f64], cfg: &ExitConfig) -> bool {
    step_norm_stat(delta, x, cfg) < cfg.tau
}

/// KL(p || q) in nats. Both arguments must already be valid distributions;
/// use `validate_simplex` on untrusted input.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
        .sum()
}

pub fn validate_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if p.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::InvalidDistribution(
            "probabilities must be finite and strictly positive".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// KL trigger comparing the newest decoded distribution against the previous
/// one, in exactly that argument order: KL(p_new || p_prev) < tau.
pub fn kl_trigger(p_new: &[f64], p_prev: &[f64], cfg: &ExitConfig) -> Result<bool> {
    validate_simplex(p_new)?;
    validate_simplex(p_prev)?;
    if p_new.len() != p_prev.len() {
        return Err(Error::InvalidDistribution(
            "distributions have different support sizes".into(),
        ));
    }
    Ok(kl_divergence(p_new, p_prev) < cfg.tau)
}

/// Acceleration statistic: ||delta - delta_prev||, or the normalized form
/// divided by (||delta|| + ||delta_prev|| + eps).
pub fn acceleration_stat(delta: &[f64], delta_prev: &[f64], cfg: &ExitConfig) -> f64 {
    let a = norm2(&sub(delta, delta_prev));
    if cfg.normalized {
        a / (norm2(delta) + norm2(delta_prev) + cfg.epsilon)
    } else {
        a
    }
}

/// Latch for the two-hit rule: remembers whether the previous acceleration
/// was already below threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TwoHitLatch {
    pub prev_small: bool,
}

/// One acceleration-policy decision. Returns true when the policy fires;
/// otherwise updates the latch. Callers must only consult this once two
/// deltas exist (loop counter >= 1).
pub fn acceleration_trigger(
    delta: &[f64],
    delta_prev: &[f64],
    latch: &mut TwoHitLatch,
    cfg: &ExitConfig,
) -> bool {
    let small = acceleration_stat(delta, delta_prev, cfg) < cfg.tau;
    if small && (latch.prev_small || !cfg.two_hit) {
        return true;
    }
    latch.prev_small = small;
    false
}

/// Like `acceleration_trigger` but with the min-steps gate applied inside,
/// so a suppressed trigger still updates the latch.
fn acceleration_step(small: bool, k: usize, latch: &mut TwoHitLatch, cfg: &ExitConfig) -> bool {
    if small && (latch.prev_small || !cfg.two_hit) && k >= cfg.min_steps {
        return true;
    }
    latch.prev_small = small;
    false
}

/// Iterate `f` from `x0` under an exit policy. The decoder maps a state to
/// a probability distribution and must be provided iff the policy is KL —
/// it is the only policy allowed to pay decode cost.
pub fn run_with_exit<F, D>(
    mut f: F,
    x0: Vec<f64>,
    cfg: &ExitConfig,
    mut decoder: Option<D>,
) -> Result<(Vec<f64>, ExitDecision)>
where
    F: FnMut(&[f64]) -> Vec<f64>,
    D: FnMut(&[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    match (cfg.policy, decoder.is_some()) {
        (ExitPolicy::Kl, false) => {
            return Err(Error::InvalidConfig("kl policy requires a decoder".into()))
        }
        (ExitPolicy::Kl, true) => {}
        (_, true) => {
            return Err(Error::InvalidConfig(
                "only the kl policy may use a decoder".into(),
            ))
        }
        (_, false) => {}
    }

    let mut x = x0;
    let mut delta_prev: Option<Vec<f64>> = None;
    let mut latch = TwoHitLatch::default();
    let mut trigger_values = Vec::new();
    let mut p_prev: Option<Vec<f64>> = match decoder.as_mut() {
        Some(d) => {
            let p = d(&x);
            validate_simplex(&p)?;
            Some(p)
        }
        None => None,
    };

    let mut k = 0;
    while k < cfg.k_max {
        let x1 = f(&x);
        if x1.len() != x.len() {
            return Err(Error::shape("run_with_exit", "map changed dimension"));
        }
        if x1.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAtStep { step: k });
        }
        let delta = sub(&x1, &x);

        let mut p_new: Option<Vec<f64>> = None;
        let triggered = match cfg.policy {
            ExitPolicy::StepNorm => {
                let stat = step_norm_stat(&delta, &x, cfg);
                trigger_values.push(stat);
                k >= cfg.min_steps && stat < cfg.tau
            }
            ExitPolicy::Kl => {
                let d = decoder.as_mut().expect("validated above");
                let p = d(&x1);
                validate_simplex(&p)?;
                let stat = kl_divergence(&p, p_prev.as_ref().expect("seeded above"));
                trigger_values.push(stat);
                p_new = Some(p);
                k >= cfg.min_steps && stat < cfg.tau
            }
            ExitPolicy::Acceleration => match &delta_prev {
                Some(dp) => {
                    let stat = acceleration_stat(&delta, dp, cfg);
                    trigger_values.push(stat);
                    acceleration_step(stat < cfg.tau, k, &mut latch, cfg)
                }
                None => false,
            },
        };

        if triggered {
            return Ok((
                x,
                ExitDecision {
                    exited_early: true,
                    steps_used: k,
                    trigger_values,
                    reason: ExitReason::ThresholdMet,
                },
            ));
        }
        delta_prev = Some(delta);
        x = x1;
        if let Some(p) = p_new {
            p_prev = Some(p);
        }
        k += 1;
    }

    Ok((
        x,
        ExitDecision {
            exited_early: false,
            steps_used: cfg.k_max,
            trigger_values,
            reason: ExitReason::KMaxReached,
        },
    ))
}

/// Per-token exit control over a batch of token rows. Each token keeps its
/// own delta history and latch; once a token halts, its row is frozen and
/// carried forward unchanged while other tokens continue.
#[derive(Debug)]
pub struct BatchExit {
    cfg: ExitConfig,
    k: usize,
    halted: Vec<bool>,
    steps_used: Vec<usize>,
    exited_early: Vec<bool>,
    latches: Vec<TwoHitLatch>,
    delta_prev: Vec<Option<Vec<f64>>>,
    trigger_values: Vec<Vec<f64>>,
}

impl BatchExit {
    pub fn new(cfg: ExitConfig, n_tokens: usize) -> Result<Self> {
        cfg.validate()?;
        if n_tokens == 0 {
            return Err(Error::InvalidInput("batch exit over zero tokens".into()));
        }
        Ok(BatchExit {
            cfg,
            k: 0,
            halted: vec![false; n_tokens],
            steps_used: vec![0; n_tokens],
            exited_early: vec![false; n_tokens],
            latches: vec![TwoHitLatch::default(); n_tokens],
            delta_prev: vec![None; n_tokens],
            trigger_values: vec![Vec::new(); n_tokens],
        })
    }

    pub fn cfg(&self) -> &ExitConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn all_halted(&self) -> bool {
        self.halted.iter().all(|&h| h)
    }

    pub fn halted(&self) -> &[bool] {
        &self.halted
    }

    /// Observe one proposed loop step. `old` and `new` are the full T x d
    /// state matrices before and after the step; for the KL policy,
    /// `probs` carries the decoded per-token distributions (previous, new).
    /// Returns the freeze mask: true rows keep their old state, and tokens
    /// that trigger here are frozen at their pre-step state.
    pub fn observe_step(
        &mut self,
        old: &Tensor,
        new: &Tensor,
        probs: Option<(&Tensor, &Tensor)>,
    ) -> Result<Vec<bool>> {
        let (t, d) = old.dims2();
        if new.dims2() != (t, d) || t != self.halted.len() {
            return Err(Error::shape("batch_exit", "state shape changed mid-loop"));
        }
        if matches!(self.cfg.policy, ExitPolicy::Kl) != probs.is_some() {
            return Err(Error::InvalidConfig(
                "decoded probabilities provided iff policy is kl".into(),
            ));
        }
        let k = self.k;
        let mut freeze = vec![false; t];
        for token in 0..t {
            if self.halted[token] {
                freeze[token] = true;
                continue;
            }
            let xrow = old.row(token);
            let nrow = new.row(token);
            let delta = sub(nrow, xrow);
            let triggered = match self.cfg.policy {
                ExitPolicy::StepNorm => {
                    let stat = step_norm_stat(&delta, xrow, &self.cfg);
                    self.trigger_values[token].push(stat);
                    k >= self.cfg.min_steps && stat < self.cfg.tau
                }
                ExitPolicy::Kl => {
                    let (prev, newp) = probs.expect("checked above");
                    let stat = {
                        validate_simplex(newp.row(token))?;
                        validate_simplex(prev.row(token))?;
                        kl_divergence(newp.row(token), prev.row(token))
                    };
                    self.trigger_values[token].push(stat);
                    k >= self.cfg.min_steps && stat < self.cfg.tau
                }
                ExitPolicy::Acceleration => match &self.delta_prev[token] {
                    Some(dp) => {
                        let stat = acceleration_stat(&delta, dp, &self.cfg);
                        self.trigger_values[token].push(stat);
                        acceleration_step(
                            stat < self.cfg.tau,
                            k,
                            &mut self.latches[token],
                            &self.cfg,
                        )
                    }
                    None => false,
                },
            };
            if triggered {
                self.halted[token] = true;
                self.steps_used[token] = k;
                self.exited_early[token] = true;
                freeze[token] = true;
            } else {
                self.delta_prev[token] = Some(delta);
            }
        }
        self.k += 1;
        Ok(freeze)
    }

    /// Close out the run after the loop stopped (all halted or k_max).
    pub fn finish(mut self) -> Vec<ExitDecision> {
        let k = self.k;
        (0..self.halted.len())
            .map(|t| {
                if self.halted[t] {
                    ExitDecision {
                        exited_early: true,
                        steps_used: self.steps_used[t],
                        trigger_values: std::mem::take(&mut self.trigger_values[t]),
                        reason: ExitReason::ThresholdMet,
                    }
                } else {
                    ExitDecision {
                        exited_early: false,
                        steps_used: k,
                        trigger_values: std::mem::take(&mut self.trigger_values[t]),
                        reason: ExitReason::KMaxReached,
                    }
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(policy: ExitPolicy, tau: f64, k_max: usize) -> ExitConfig {
        ExitConfig::new(policy, tau, k_max).unwrap()
    }

    #[test]
    fn tau_must_be_positive() {
        assert!(ExitConfig::new(ExitPolicy::StepNorm, 0.0, 10).is_err());
        assert!(ExitConfig::new(ExitPolicy::StepNorm, -1.0, 10).is_err());
        assert!(ExitConfig::new(ExitPolicy::StepNorm, f64::NAN, 10).is_err());
    }

    #[test]
    fn kl_worked_value() {
        let p = [0.5, 0.5];
        let q = [2.0 / 3.0, 1.0 / 3.0];
        let expected = 3f64.ln() - 1.5 * 2f64.ln();
        assert!((kl_divergence(&p, &q) - expected).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn kl_rejects_invalid_distributions() {
        let c = cfg(ExitPolicy::Kl, 1e-3, 10);
        assert!(kl_trigger(&[0.5, 0.5], &[0.7, 0.4], &c).is_err());
        assert!(kl_trigger(&[1.2, -0.2], &[0.5, 0.5], &c).is_err());
        assert!(kl_trigger(&[0.5, 0.5], &[1.0, 0.0], &c).is_err());
    }

    #[test]
    fn identity_map_exits_at_policy_floor() {
        let c = cfg(ExitPolicy::StepNorm, 1e-6, 32);
        let (_, d) = run_with_exit(
            |x: &[f64]| x.to_vec(),
            vec![1.0, 2.0],
            &c,
            None::<fn(&[f64]) -> Vec<f64>>,
        )
        .unwrap();
        assert!(d.exited_early);
        assert_eq!(d.steps_used, c.min_steps);

        let c = cfg(ExitPolicy::Acceleration, 1e-6, 32);
        let (_, d) = run_with_exit(
            |x: &[f64]| x.to_vec(),
            vec![1.0, 2.0],
            &c,
            None::<fn(&[f64]) -> Vec<f64>>,
        )
        .unwrap();
        assert!(d.exited_early);
        assert_eq!(d.steps_used, 2);
    }

    #[test]
    fn tiny_tau_reaches_k_max() {
        let c = cfg(ExitPolicy::StepNorm, 1e-300, 7);
        let (_, d) = run_with_exit(
            |x: &[f64]| x.iter().map(|v| v * 0.5).collect(),
            vec![1.0],
            &c,
            None::<fn(&[f64]) -> Vec<f64>>,
        )
        .unwrap();
        assert!(!d.exited_early);
        assert_eq!(d.steps_used, 7);
        assert_eq!(d.reason, ExitReason::KMaxReached);
    }

    #[test]
    fn decoder_pairing_is_enforced() {
        let c = cfg(ExitPolicy::StepNorm, 1e-3, 10);
        let r = run_with_exit(
            |x: &[f64]| x.to_vec(),
            vec![1.0],
            &c,
            Some(|_: &[f64]| vec![0.5, 0.5]),
        );
        assert!(r.is_err());
        let c = cfg(ExitPolicy::Kl, 1e-3, 10);
        let r = run_with_exit(
            |x: &[f64]| x.to_vec(),
            vec![1.0],
            &c,
            None::<fn(&[f64]) -> Vec<f64>>,
        );
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_state_reports_step_index() {
        let c = cfg(ExitPolicy::StepNorm, 1e-12, 10);
        let mut n = 0;
        let r = run_with_exit(
            move |x: &[f64]| {
                n += 1;
                if n == 3 {
                    vec![f64::NAN; x.len()]
                } else {
                    x.iter().map(|v| v * 2.0).collect()
                }
            },
            vec![1.0],
            &c,
            None::<fn(&[f64]) -> Vec<f64>>,
        );
        assert!(matches!(r, Err(Error::NonFiniteAtStep { step: 2 })));
    }

    #[test]
    fn batch_identical_rows_halt_together() {
        // Symmetric inputs through a row-symmetric map must produce
        // identical per-token exit steps.
        let c = cfg(ExitPolicy::StepNorm, 1e-3, 64);
        let t = 4;
        let mut ctl = BatchExit::new(c, t).unwrap();
        let mut state = Tensor::matrix(t, 2, vec![1.0, 0.0].repeat(t)).unwrap();
        while !ctl.all_halted() && ctl.k() < 64 {
            let next = Tensor::matrix(
                t,
                2,
                state
                    .rows_iter()
                    .flat_map(|r| r.iter().map(|v| v * 0.5).collect::<Vec<_>>())
                    .collect(),
            )
            .unwrap();
            let freeze = ctl.observe_step(&state, &next, None).unwrap();
            let rows: Vec<Vec<f64>> = freeze
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    if *f {
                        state.row(i).to_vec()
                    } else {
                        next.row(i).to_vec()
                    }
                })
                .collect();
            state = Tensor::from_rows(&rows).unwrap();
        }
        let decisions = ctl.finish();
        let first = decisions[0].steps_used;
        assert!(decisions.iter().all(|d| d.steps_used == first && d.exited_early));
    }
}
