//! Decoder-only transformer with recurrent block groups.
//!
//! Ungrouped layers run single-pass. Each group owns a learned input
//! projection P (2d -> d): on group entry the state is initialized as
//! s0 = [e ; xi] P with e the incoming activation and xi Gaussian noise
//! (std sigma_state); each loop step recomputes s <- span([e ; s] P),
//! re-injecting the original input, where `span` is the group's layer(s)
//! applied in order (a paired group steps both layers under one count).
//! Per forward pass each group draws one loop count from the schedule.
//!
//! Layers use sandwich RMSNorm around both sublayers:
//! x += norm_out(attn(norm_in(x))); x += norm_out(mlp(norm_in(x))),
//! with causal multi-head attention and a SiLU MLP.
//!
//! All forward paths (training, fixed-budget eval, exit-policy eval, and
//! the standalone loop-step operations) share one graph-based block
//! implementation, so recorded traces replay through `step_group` exactly.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{AdamMoments, Checkpoint, Params};
pub use config::{Group, GroupKind, LoopSchedule, ModelConfig, RecurrenceSpec};

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

use crate::error::{Error, Result};
use crate::exit::{BatchExit, ExitConfig, ExitDecision, ExitPolicy};
use crate::geometry::IterateTrace;
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

const BASE_STD: f64 = 0.02;

/// Draw one loop count from the schedule: fixed, or 1 + Poisson(lambda)
/// with lambda ~ LogNormal(mu = ln r - sigma^2/2, sigma) so E[lambda] = r.
pub fn sample_loop_count(schedule: &LoopSchedule, rng: &mut ChaCha12Rng) -> Result<usize> {
    match schedule {
        LoopSchedule::Fixed { l } => Ok(*l),
        LoopSchedule::Sampled { r, sigma } => {
            schedule.validate()?;
            let mu = r.ln() - sigma * sigma / 2.0;
            let lognormal = LogNormal::new(mu, *sigma)
                .map_err(|e| Error::InvalidDistribution(format!("lognormal: {e}")))?;
            let lambda: f64 = lognormal.sample(rng);
            let poisson = Poisson::new(lambda)
                .map_err(|e| Error::InvalidDistribution(format!("poisson({lambda}): {e}")))?;
            let draw: f64 = poisson.sample(rng);
            Ok(1 + draw as usize)
        }
    }
}

/// Gaussian state noise, std `sigma`, as a t x d tensor.
pub fn sample_state_noise(
    rng: &mut ChaCha12Rng,
    t: usize,
    d: usize,
    sigma: f64,
) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(Tensor::zeros(t, d));
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::InvalidDistribution(format!("normal: {e}")))?;
    Tensor::matrix(t, d, (0..t * d).map(|_| normal.sample(rng)).collect())
}

/// Hidden state of one group mid-loop.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub group: usize,
    pub k: usize,
    pub state: Tensor,
}

/// How much of the forward pass to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    /// Per-group loop iterates x(0)..x(L).
    Loops,
    /// Loop iterates plus every depth stage (embedding, each single-pass
    /// layer output) for whole-trajectory projections.
    Full,
}

/// Loop iterates of one group over a forward pass: states[k] is the full
/// T x d hidden state at loop step k, length L + 1.
#[derive(Debug, Clone)]
pub struct GroupTrace {
    pub group: usize,
    pub states: Vec<Tensor>,
}

impl GroupTrace {
    /// Single-token view as an iterate trace.
    pub fn token_trace(&self, token: usize) -> Result<IterateTrace> {
        let states = self
            .states
            .iter()
            .map(|s| s.row(token).to_vec())
            .collect::<Vec<_>>();
        IterateTrace::new(self.group, token, states)
    }

    pub fn n_tokens(&self) -> usize {
        self.states.first().map(|s| s.dims2().0).unwrap_or(0)
    }
}

/// One recorded depth stage: the hidden state after `stage`, where loop
/// iterates carry their step index k.
#[derive(Debug, Clone)]
pub struct StageState {
    pub stage: String,
    pub k: usize,
    pub state: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Realized loop count per group, in group order.
    pub loop_counts: Vec<usize>,
    pub traces: Vec<GroupTrace>,
    pub stages: Vec<StageState>,
}

/// Per-token exit decisions for one group.
#[derive(Debug, Clone)]
pub struct GroupExitReport {
    pub group: usize,
    pub decisions: Vec<ExitDecision>,
}

impl GroupExitReport {
    pub fn mean_steps(&self) -> f64 {
        if self.decisions.is_empty() {
            return 0.0;
        }
        self.decisions.iter().map(|d| d.steps_used as f64).sum::<f64>()
            / self.decisions.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExitForwardOutput {
    pub logits: Tensor,
    pub reports: Vec<GroupExitReport>,
    /// Number of full-vocabulary decodes performed (nonzero only for the
    /// KL policy, which is the one policy that pays decode cost).
    pub decoder_calls: usize,
}

/// Lazy cache mapping parameter names to graph leaves, so one graph can
/// share a single leaf per parameter across every use in the pass.
pub struct GraphParams {
    requires_grad: bool,
    vars: BTreeMap<String, Var>,
}

impl GraphParams {
    pub fn new(requires_grad: bool) -> Self {
        GraphParams {
            requires_grad,
            vars: BTreeMap::new(),
        }
    }

    fn get(&mut self, g: &mut Graph, params: &Params, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        let v = g.leaf(t.clone().with_requires_grad(self.requires_grad));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaves created so far (parameter name -> graph var).
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

enum LoopPlan<'a> {
    Schedule,
    Budgets(&'a [usize]),
}

struct InitSpec {
    name: String,
    rows: usize,
    cols: usize,
    kind: InitKind,
}

enum InitKind {
    Gauss(f64),
    Zero,
    One,
}

fn layer_prefix(i: usize) -> String {
    format!("layer{i:02}")
}

/// Expected total residual-block applications per forward pass, counting
/// looped layers at their expected repeat count; used to scale the output
/// projections so deep unrolls stay stable at init.
fn effective_layer_apps(cfg: &ModelConfig, rec: &RecurrenceSpec) -> f64 {
    (0..cfg.n_layers)
        .map(|l| {
            if rec.group_of(l).is_some() {
                rec.schedule.expected_loops()
            } else {
                1.0
            }
        })
        .sum()
}

fn param_specs(cfg: &ModelConfig, rec: &RecurrenceSpec) -> Vec<InitSpec> {
    let d = cfg.d_model;
    let hidden = 4 * d;
    let resid_std = BASE_STD / (2.0 * effective_layer_apps(cfg, rec)).sqrt();
    let mut specs = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, kind: InitKind| {
        specs.push(InitSpec {
            name,
            rows,
            cols,
            kind,
        })
    };

    push("embed.token".into(), cfg.vocab_size, d, InitKind::Gauss(BASE_STD));
    push("embed.pos".into(), cfg.block_size, d, InitKind::Gauss(BASE_STD));
    push("final_norm.gain".into(), 1, d, InitKind::One);
    push("lm_head.w".into(), d, cfg.vocab_size, InitKind::Gauss(BASE_STD));
    push("lm_head.b".into(), 1, cfg.vocab_size, InitKind::Zero);
    for i in 0..cfg.n_layers {
        let p = layer_prefix(i);
        push(format!("{p}.attn.norm_in.gain"), 1, d, InitKind::One);
        push(format!("{p}.attn.norm_out.gain"), 1, d, InitKind::One);
        for w in ["wq", "wk", "wv"] {
            push(format!("{p}.attn.{w}"), d, d, InitKind::Gauss(BASE_STD));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            push(format!("{p}.attn.{b}"), 1, d, InitKind::Zero);
        }
        push(format!("{p}.attn.wo"), d, d, InitKind::Gauss(resid_std));
        push(format!("{p}.mlp.norm_in.gain"), 1, d, InitKind::One);
        push(format!("{p}.mlp.norm_out.gain"), 1, d, InitKind::One);
        push(format!("{p}.mlp.w1"), d, hidden, InitKind::Gauss(BASE_STD));
        push(format!("{p}.mlp.b1"), 1, hidden, InitKind::Zero);
        push(format!("{p}.mlp.w2"), hidden, d, InitKind::Gauss(resid_std));
        push(format!("{p}.mlp.b2"), 1, d, InitKind::Zero);
    }
    for g in 0..rec.groups.len() {
        push(format!("group{g}.input_proj"), 2 * d, d, InitKind::Gauss(BASE_STD));
    }
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

fn init_params(cfg: &ModelConfig, rec: &RecurrenceSpec) -> Result<Params> {
    let mut r = rng::substream(cfg.seed, "param-init");
    let mut params = Params::new();
    for spec in param_specs(cfg, rec) {
        let n = spec.rows * spec.cols;
        let data = match spec.kind {
            InitKind::Zero => vec![0.0; n],
            InitKind::One => vec![1.0; n],
            InitKind::Gauss(std) => {
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidDistribution(format!("init: {e}")))?;
                (0..n).map(|_| normal.sample(&mut r)).collect()
            }
        };
        params.insert(spec.name, Tensor::matrix(spec.rows, spec.cols, data)?);
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    rec: RecurrenceSpec,
    params: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig, rec: RecurrenceSpec) -> Result<Self> {
        cfg.validate()?;
        rec.validate(&cfg)?;
        let params = init_params(&cfg, &rec)?;
        Ok(Model { cfg, rec, params })
    }

    /// Rebuild from stored parts (checkpoint load); the parameter table
    /// must exactly match the architecture.
    pub fn from_parts(cfg: ModelConfig, rec: RecurrenceSpec, params: Params) -> Result<Self> {
        cfg.validate()?;
        rec.validate(&cfg)?;
        let specs = param_specs(&cfg, &rec);
        if specs.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params.get(&spec.name).ok_or_else(|| {
                Error::InvalidConfig(format!("missing parameter {}", spec.name))
            })?;
            if t.dims2() != (spec.rows, spec.cols) {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} has shape {:?}, expected {}x{}",
                    spec.name,
                    t.shape(),
                    spec.rows,
                    spec.cols
                )));
            }
        }
        Ok(Model { cfg, rec, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn recurrence(&self) -> &RecurrenceSpec {
        &self.rec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn n_groups(&self) -> usize {
        self.rec.groups.len()
    }

    fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.block_size {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds block size {}",
                tokens.len(),
                self.cfg.block_size
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, gp: &mut GraphParams, tokens: &[usize]) -> Result<Var> {
        let table = gp.get(g, &self.params, "embed.token")?;
        let tok = g.gather_rows(table, tokens)?;
        let pos_table = gp.get(g, &self.params, "embed.pos")?;
        let pos_ids: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        g.add(tok, pos)
    }

    fn attention(&self, g: &mut Graph, gp: &mut GraphParams, x: Var, p: &str) -> Result<Var> {
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let get = |gp: &mut GraphParams, g: &mut Graph, suffix: &str| -> Result<Var> {
            gp.get(g, &self.params, &format!("{p}.attn.{suffix}"))
        };
        let wq = get(gp, g, "wq")?;
        let bq = get(gp, g, "bq")?;
        let wk = get(gp, g, "wk")?;
        let bk = get(gp, g, "bk")?;
        let wv = get(gp, g, "wv")?;
        let bv = get(gp, g, "bv")?;
        let wo = get(gp, g, "wo")?;
        let bo = get(gp, g, "bo")?;

        let q = g.matmul(x, wq)?;
        let q = g.add_bias(q, bq)?;
        let k = g.matmul(x, wk)?;
        let k = g.add_bias(k, bk)?;
        let v = g.matmul(x, wv)?;
        let v = g.add_bias(v, bv)?;

        let scale = 1.0 / (hd as f64).sqrt();
        let mut merged: Option<Var> = None;
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.causal_softmax_rows(scores)?;
            let oh = g.matmul(probs, vh)?;
            merged = Some(match merged {
                None => oh,
                Some(acc) => g.concat_cols(acc, oh)?,
            });
        }
        let cat = merged.expect("n_heads >= 1");
        debug_assert_eq!(g.value(cat).dims2().1, d);
        let o = g.matmul(cat, wo)?;
        g.add_bias(o, bo)
    }

    fn mlp(&self, g: &mut Graph, gp: &mut GraphParams, x: Var, p: &str) -> Result<Var> {
        let w1 = gp.get(g, &self.params, &format!("{p}.mlp.w1"))?;
        let b1 = gp.get(g, &self.params, &format!("{p}.mlp.b1"))?;
        let w2 = gp.get(g, &self.params, &format!("{p}.mlp.w2"))?;
        let b2 = gp.get(g, &self.params, &format!("{p}.mlp.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let a = g.silu(h)?;
        let o = g.matmul(a, w2)?;
        g.add_bias(o, b2)
    }

    /// One full layer with sandwich normalization on both sublayers.
    fn layer(&self, g: &mut Graph, gp: &mut GraphParams, x: Var, layer: usize) -> Result<Var> {
        let p = layer_prefix(layer);
        let gain_in = gp.get(g, &self.params, &format!("{p}.attn.norm_in.gain"))?;
        let xn = g.rmsnorm_rows(x, gain_in)?;
        let att = self.attention(g, gp, xn, &p)?;
        let gain_out = gp.get(g, &self.params, &format!("{p}.attn.norm_out.gain"))?;
        let att = g.rmsnorm_rows(att, gain_out)?;
        let x = g.add(x, att)?;

        let gain_in = gp.get(g, &self.params, &format!("{p}.mlp.norm_in.gain"))?;
        let xn = g.rmsnorm_rows(x, gain_in)?;
        let m = self.mlp(g, gp, xn, &p)?;
        let gain_out = gp.get(g, &self.params, &format!("{p}.mlp.norm_out.gain"))?;
        let m = g.rmsnorm_rows(m, gain_out)?;
        g.add(x, m)
    }

    fn span(&self, g: &mut Graph, gp: &mut GraphParams, s: Var, layers: &[usize]) -> Result<Var> {
        let mut s = s;
        for &l in layers {
            s = self.layer(g, gp, s, l)?;
        }
        Ok(s)
    }

    /// [e ; s] P for group `group`.
    fn project(
        &self,
        g: &mut Graph,
        gp: &mut GraphParams,
        e: Var,
        s: Var,
        group: usize,
    ) -> Result<Var> {
        let cat = g.concat_cols(e, s)?;
        let p = gp.get(g, &self.params, &format!("group{group}.input_proj"))?;
        g.matmul(cat, p)
    }

    /// Group-entry state s0 = [e ; xi] P.
    fn entry_var(
        &self,
        g: &mut Graph,
        gp: &mut GraphParams,
        e: Var,
        noise: Option<&Tensor>,
        group: usize,
    ) -> Result<Var> {
        let (t, d) = g.value(e).dims2();
        let xi = match noise {
            Some(n) => {
                if n.dims2() != (t, d) {
                    return Err(Error::shape("init_loop_state", "noise shape mismatch"));
                }
                n.clone()
            }
            None => Tensor::zeros(t, d),
        };
        let xi = g.leaf(xi);
        self.project(g, gp, e, xi, group)
    }

    /// One loop step: s <- span([e ; s + step_noise] P).
    fn step_var(
        &self,
        g: &mut Graph,
        gp: &mut GraphParams,
        e: Var,
        s: Var,
        group: usize,
        step_noise: Option<&Tensor>,
    ) -> Result<Var> {
        let s = match step_noise {
            Some(n) => {
                let nv = g.leaf(n.clone());
                g.add(s, nv)?
            }
            None => s,
        };
        let proj = self.project(g, gp, e, s, group)?;
        self.span(g, gp, proj, &self.rec.groups[group].layers)
    }

    fn head(&self, g: &mut Graph, gp: &mut GraphParams, x: Var) -> Result<Var> {
        let gain = gp.get(g, &self.params, "final_norm.gain")?;
        let xn = g.rmsnorm_rows(x, gain)?;
        let w = gp.get(g, &self.params, "lm_head.w")?;
        let b = gp.get(g, &self.params, "lm_head.b")?;
        let z = g.matmul(xn, w)?;
        g.add_bias(z, b)
    }

    fn draw_entry_noise(
        &self,
        rng: &mut ChaCha12Rng,
        t: usize,
    ) -> Result<Option<Tensor>> {
        if self.rec.sigma_state == 0.0 {
            return Ok(None);
        }
        Ok(Some(sample_state_noise(
            rng,
            t,
            self.cfg.d_model,
            self.rec.sigma_state,
        )?))
    }

    fn draw_step_noise(&self, rng: &mut ChaCha12Rng, t: usize) -> Result<Option<Tensor>> {
        if !self.rec.noise_every_step || self.rec.sigma_state == 0.0 {
            return Ok(None);
        }
        Ok(Some(sample_state_noise(
            rng,
            t,
            self.cfg.d_model,
            self.rec.sigma_state,
        )?))
    }

    /// Core driver shared by all non-exit forward paths.
    fn forward_pass(
        &self,
        g: &mut Graph,
        gp: &mut GraphParams,
        tokens: &[usize],
        plan: &LoopPlan,
        rng: &mut ChaCha12Rng,
        trace: TraceMode,
    ) -> Result<(Var, Vec<usize>, Vec<GroupTrace>, Vec<StageState>)> {
        self.validate_tokens(tokens)?;
        if let LoopPlan::Budgets(b) = plan {
            if b.len() != self.rec.groups.len() {
                return Err(Error::InvalidInput(format!(
                    "got {} budgets for {} groups",
                    b.len(),
                    self.rec.groups.len()
                )));
            }
            if b.iter().any(|&l| l == 0) {
                return Err(Error::InvalidInput("loop budget must be >= 1".into()));
            }
        }
        let t = tokens.len();
        let full = trace == TraceMode::Full;
        let record_loops = trace != TraceMode::Off;

        let mut loop_counts = Vec::with_capacity(self.rec.groups.len());
        let mut traces = Vec::new();
        let mut stages = Vec::new();

        let mut x = self.embed(g, gp, tokens)?;
        if full {
            stages.push(StageState {
                stage: "embed".into(),
                k: 0,
                state: g.value(x).clone(),
            });
        }

        let mut layer = 0;
        while layer < self.cfg.n_layers {
            if let Some(gidx) = self
                .rec
                .groups
                .iter()
                .position(|grp| grp.layers[0] == layer)
            {
                let l_count = match plan {
                    LoopPlan::Schedule => sample_loop_count(&self.rec.schedule, rng)?,
                    LoopPlan::Budgets(b) => b[gidx],
                };
                let e = x;
                let noise0 = self.draw_entry_noise(rng, t)?;
                let mut s = self.entry_var(g, gp, e, noise0.as_ref(), gidx)?;
                let mut states = Vec::new();
                if record_loops {
                    states.push(g.value(s).clone());
                }
                if full {
                    stages.push(StageState {
                        stage: format!("group{gidx}"),
                        k: 0,
                        state: g.value(s).clone(),
                    });
                }
                for k in 0..l_count {
                    let step_noise = self.draw_step_noise(rng, t)?;
                    s = self.step_var(g, gp, e, s, gidx, step_noise.as_ref())?;
                    if record_loops {
                        states.push(g.value(s).clone());
                    }
                    if full {
                        stages.push(StageState {
                            stage: format!("group{gidx}"),
                            k: k + 1,
                            state: g.value(s).clone(),
                        });
                    }
                }
                if record_loops {
                    traces.push(GroupTrace {
                        group: gidx,
                        states,
                    });
                }
                loop_counts.push(l_count);
                x = s;
                layer = self.rec.groups[gidx].layers.last().expect("nonempty") + 1;
            } else {
                x = self.layer(g, gp, x, layer)?;
                if full {
                    stages.push(StageState {
                        stage: layer_prefix(layer),
                        k: 0,
                        state: g.value(x).clone(),
                    });
                }
                layer += 1;
            }
        }
        let logits = self.head(g, gp, x)?;
        Ok((logits, loop_counts, traces, stages))
    }

    /// Forward with loop counts drawn from the schedule.
    pub fn forward(
        &self,
        tokens: &[usize],
        rng: &mut ChaCha12Rng,
        trace: TraceMode,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let mut gp = GraphParams::new(false);
        let (logits, loop_counts, traces, stages) =
            self.forward_pass(&mut g, &mut gp, tokens, &LoopPlan::Schedule, rng, trace)?;
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            loop_counts,
            traces,
            stages,
        })
    }

    /// Forward with fixed per-group loop budgets (noise still drawn).
    pub fn forward_budget(
        &self,
        tokens: &[usize],
        budgets: &[usize],
        rng: &mut ChaCha12Rng,
        trace: TraceMode,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let mut gp = GraphParams::new(false);
        let (logits, loop_counts, traces, stages) = self.forward_pass(
            &mut g,
            &mut gp,
            tokens,
            &LoopPlan::Budgets(budgets),
            rng,
            trace,
        )?;
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            loop_counts,
            traces,
            stages,
        })
    }

    /// Training forward on a caller-owned graph with shared parameter
    /// leaves; returns the logits node and the sampled loop counts.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        gp: &mut GraphParams,
        tokens: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<(Var, Vec<usize>)> {
        let (logits, loop_counts, _, _) =
            self.forward_pass(g, gp, tokens, &LoopPlan::Schedule, rng, TraceMode::Off)?;
        Ok((logits, loop_counts))
    }

    /// Decode a hidden state to next-token probabilities by running the
    /// remaining stack single-pass (every layer after `after_layer` runs
    /// once, loop structure ignored) plus the output head.
    fn decode_tail(
        &self,
        g: &mut Graph,
        gp: &mut GraphParams,
        x: Var,
        after_layer: usize,
    ) -> Result<Tensor> {
        let mut h = x;
        for l in (after_layer + 1)..self.cfg.n_layers {
            h = self.layer(g, gp, h, l)?;
        }
        let z = self.head(g, gp, h)?;
        let p = g.softmax_rows(z)?;
        Ok(g.value(p).clone())
    }

    /// Forward with per-token early exit in every group. `cfgs` holds one
    /// exit config per group ordered by group index (clone one config to
    /// share a threshold across groups).
    pub fn forward_with_exit(
        &self,
        tokens: &[usize],
        cfgs: &[ExitConfig],
        rng: &mut ChaCha12Rng,
    ) -> Result<ExitForwardOutput> {
        self.validate_tokens(tokens)?;
        if cfgs.len() != self.rec.groups.len() {
            return Err(Error::InvalidInput(format!(
                "got {} exit configs for {} groups",
                cfgs.len(),
                self.rec.groups.len()
            )));
        }
        let t = tokens.len();
        let mut g = Graph::new();
        let mut gp = GraphParams::new(false);
        let mut decoder_calls = 0usize;
        let mut reports = Vec::with_capacity(cfgs.len());

        let mut x = self.embed(&mut g, &mut gp, tokens)?;
        let mut layer = 0;
        while layer < self.cfg.n_layers {
            if let Some(gidx) = self
                .rec
                .groups
                .iter()
                .position(|grp| grp.layers[0] == layer)
            {
                let cfg = &cfgs[gidx];
                let last_layer = *self.rec.groups[gidx].layers.last().expect("nonempty");
                let is_kl = matches!(cfg.policy, ExitPolicy::Kl);
                let e = x;
                let noise0 = self.draw_entry_noise(rng, t)?;
                let mut s = self.entry_var(&mut g, &mut gp, e, noise0.as_ref(), gidx)?;
                let mut ctl = BatchExit::new(cfg.clone(), t)?;
                let mut p_prev: Option<Tensor> = if is_kl {
                    decoder_calls += 1;
                    Some(self.decode_tail(&mut g, &mut gp, s, last_layer)?)
                } else {
                    None
                };

                while !ctl.all_halted() && ctl.k() < cfg.k_max {
                    let step_noise = self.draw_step_noise(rng, t)?;
                    let s_new = self.step_var(&mut g, &mut gp, e, s, gidx, step_noise.as_ref())?;
                    let p_new: Option<Tensor> = if is_kl {
                        decoder_calls += 1;
                        Some(self.decode_tail(&mut g, &mut gp, s_new, last_layer)?)
                    } else {
                        None
                    };
                    let freeze = {
                        let old = g.value(s);
                        let new = g.value(s_new);
                        match (&p_prev, &p_new) {
                            (Some(pp), Some(pn)) => ctl.observe_step(old, new, Some((pp, pn)))?,
                            _ => ctl.observe_step(old, new, None)?,
                        }
                    };
                    let any_froze = freeze.iter().any(|&f| f);
                    s = g.freeze_rows(s_new, s, &freeze)?;
                    if is_kl && !ctl.all_halted() {
                        if any_froze {
                            // Keep the cached distribution consistent with
                            // the mixed (partially frozen) accepted state.
                            decoder_calls += 1;
                            p_prev = Some(self.decode_tail(&mut g, &mut gp, s, last_layer)?);
                        } else {
                            p_prev = p_new;
                        }
                    }
                }
                reports.push(GroupExitReport {
                    group: gidx,
                    decisions: ctl.finish(),
                });
                x = s;
                layer = last_layer + 1;
            } else {
                x = self.layer(&mut g, &mut gp, x, layer)?;
                layer += 1;
            }
        }
        let logits = self.head(&mut g, &mut gp, x)?;
        Ok(ExitForwardOutput {
            logits: g.value(logits).clone(),
            reports,
            decoder_calls,
        })
    }

    /// Standalone value-level looped-input projection [e ; s] P_group.
    pub fn looped_input_projection(
        &self,
        input_embed: &Tensor,
        state: &Tensor,
        group: usize,
    ) -> Result<Tensor> {
        if group >= self.rec.groups.len() {
            return Err(Error::InvalidInput(format!("no group {group}")));
        }
        if input_embed.dims2() != state.dims2() {
            return Err(Error::shape(
                "looped_input_projection",
                "embed and state shapes differ",
            ));
        }
        let mut g = Graph::new();
        let mut gp = GraphParams::new(false);
        let e = g.leaf(input_embed.clone());
        let s = g.leaf(state.clone());
        let v = self.project(&mut g, &mut gp, e, s, group)?;
        Ok(g.value(v).clone())
    }

    /// Standalone group-entry initialization from an input activation.
    pub fn init_loop_state(
        &self,
        input_embed: &Tensor,
        rng: &mut ChaCha12Rng,
        group: usize,
    ) -> Result<LoopState> {
        if group >= self.rec.groups.len() {
            return Err(Error::InvalidInput(format!("no group {group}")));
        }
        let (t, _) = input_embed.dims2();
        let noise = self.draw_entry_noise(rng, t)?;
        let mut g = Graph::new();
        let mut gp = GraphParams::new(false);
        let e = g.leaf(input_embed.clone());
        let v = self.entry_var(&mut g, &mut gp, e, noise.as_ref(), group)?;
        Ok(LoopState {
            group,
            k: 0,
            state: g.value(v).clone(),
        })
    }

    /// Standalone single loop step; `rng` is consumed only when the
    /// recurrence settings inject noise at every step.
    pub fn step_group(
        &self,
        input_embed: &Tensor,
        state: &LoopState,
        rng: &mut ChaCha12Rng,
    ) -> Result<LoopState> {
        if state.group >= self.rec.groups.len() {
            return Err(Error::InvalidInput(format!("no group {}", state.group)));
        }
        let (t, _) = input_embed.dims2();
        let step_noise = self.draw_step_noise(rng, t)?;
        let mut g = Graph::new();
        let mut gp = GraphParams::new(false);
        let e = g.leaf(input_embed.clone());
        let s = g.leaf(state.state.clone());
        let v = self.step_var(&mut g, &mut gp, e, s, state.group, step_noise.as_ref())?;
        Ok(LoopState {
            group: state.group,
            k: state.k + 1,
            state: g.value(v).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, RecurrenceSpec) {
        let cfg = ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            block_size: 6,
            seed: 5,
        };
        let rec = RecurrenceSpec {
            groups: vec![Group::self_loop(1)],
            schedule: LoopSchedule::Fixed { l: 3 },
            sigma_state: 0.0,
            noise_every_step: false,
        };
        (cfg, rec)
    }

    #[test]
    fn logits_shape_and_trace_length() {
        let (cfg, rec) = tiny();
        let m = Model::new(cfg, rec).unwrap();
        let mut r = rng::seeded(1);
        let out = m.forward(&[1, 2, 3, 4], &mut r, TraceMode::Loops).unwrap();
        assert_eq!(out.logits.dims2(), (4, 11));
        assert_eq!(out.loop_counts, vec![3]);
        assert_eq!(out.traces.len(), 1);
        assert_eq!(out.traces[0].states.len(), 4); // L + 1
        let tt = out.traces[0].token_trace(2).unwrap();
        assert_eq!(tt.len(), 4);
        assert_eq!(tt.dim(), 8);
    }

    #[test]
    fn token_validation() {
        let (cfg, rec) = tiny();
        let m = Model::new(cfg, rec).unwrap();
        let mut r = rng::seeded(1);
        assert!(m.forward(&[11], &mut r, TraceMode::Off).is_err()); // id == V
        assert!(m
            .forward(&[0; 7], &mut r, TraceMode::Off)
            .is_err()); // T > block
        assert!(m.forward(&[], &mut r, TraceMode::Off).is_err());
    }

    #[test]
    fn deterministic_without_noise() {
        let (cfg, rec) = tiny();
        let m = Model::new(cfg, rec).unwrap();
        let a = m
            .forward(&[5, 6, 7], &mut rng::seeded(9), TraceMode::Off)
            .unwrap();
        let b = m
            .forward(&[5, 6, 7], &mut rng::seeded(1234), TraceMode::Off)
            .unwrap();
        // sigma_state = 0 and fixed L: pure function of weights + tokens.
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn different_seeds_differ() {
        let (cfg, rec) = tiny();
        let m1 = Model::new(cfg.clone(), rec.clone()).unwrap();
        let mut cfg2 = cfg;
        cfg2.seed = 6;
        let m2 = Model::new(cfg2, rec).unwrap();
        assert_ne!(
            m1.params().get("embed.token").unwrap().data(),
            m2.params().get("embed.token").unwrap().data()
        );
    }

    #[test]
    fn projection_identity_halves() {
        let (cfg, rec) = tiny();
        let d = cfg.d_model;
        let mut m = Model::new(cfg, rec).unwrap();
        let mut keep_state = vec![0.0; 2 * d * d];
        let mut keep_embed = vec![0.0; 2 * d * d];
        for i in 0..d {
            keep_state[(d + i) * d + i] = 1.0; // [0 | I]
            keep_embed[i * d + i] = 1.0; // [I | 0]
        }
        let e = Tensor::matrix(2, d, (0..2 * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let s = Tensor::matrix(2, d, (0..2 * d).map(|i| 1.0 - i as f64 * 0.05).collect()).unwrap();

        *m.params_mut().get_mut("group0.input_proj").unwrap() =
            Tensor::matrix(2 * d, d, keep_state).unwrap();
        let out = m.looped_input_projection(&e, &s, 0).unwrap();
        assert_eq!(out.data(), s.data());

        *m.params_mut().get_mut("group0.input_proj").unwrap() =
            Tensor::matrix(2 * d, d, keep_embed).unwrap();
        let out = m.looped_input_projection(&e, &s, 0).unwrap();
        assert_eq!(out.data(), e.data());
    }

    #[test]
    fn step_group_increments_k_and_is_deterministic() {
        let (cfg, rec) = tiny();
        let m = Model::new(cfg.clone(), rec).unwrap();
        let e = Tensor::matrix(2, cfg.d_model, vec![0.05; 2 * cfg.d_model]).unwrap();
        let s0 = m
            .init_loop_state(&e, &mut rng::seeded(3), 0)
            .unwrap();
        assert_eq!(s0.k, 0);
        let s1 = m.step_group(&e, &s0, &mut rng::seeded(3)).unwrap();
        let s1b = m.step_group(&e, &s0, &mut rng::seeded(99)).unwrap();
        assert_eq!(s1.k, 1);
        assert_eq!(s1.state.data(), s1b.state.data());
        let s2 = m.step_group(&e, &s1, &mut rng::seeded(3)).unwrap();
        assert_eq!(s2.k, 2);
    }

    #[test]
    fn states_stay_finite_over_many_steps() {
        let (cfg, rec) = tiny();
        let m = Model::new(cfg.clone(), rec).unwrap();
        let mut r = rng::seeded(11);
        let e = Tensor::matrix(3, cfg.d_model, vec![0.1; 3 * cfg.d_model]).unwrap();
        let mut s = m.init_loop_state(&e, &mut r, 0).unwrap();
        for _ in 0..64 {
            s = m.step_group(&e, &s, &mut r).unwrap();
        }
        assert_eq!(s.k, 64);
        assert!(s.state.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loop_count_sampling_bounds() {
        let sched = LoopSchedule::Sampled { r: 12.0, sigma: 0.5 };
        let mut r = rng::seeded(42);
        for _ in 0..1000 {
            assert!(sample_loop_count(&sched, &mut r).unwrap() >= 1);
        }
        let fixed = LoopSchedule::Fixed { l: 4 };
        assert_eq!(sample_loop_count(&fixed, &mut r).unwrap(), 4);
    }

    #[test]
    fn paired_group_traces_step_jointly() {
        let cfg = ModelConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            block_size: 6,
            seed: 5,
        };
        let rec = RecurrenceSpec {
            groups: vec![Group::paired(1, 2)],
            schedule: LoopSchedule::Fixed { l: 5 },
            sigma_state: 0.0,
            noise_every_step: false,
        };
        let m = Model::new(cfg, rec).unwrap();
        let mut r = rng::seeded(0);
        let out = m.forward(&[1, 2], &mut r, TraceMode::Loops).unwrap();
        // One trace for the pair, one state per joint step.
        assert_eq!(out.traces.len(), 1);
        assert_eq!(out.traces[0].states.len(), 6);
    }
}
