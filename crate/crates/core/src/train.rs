//! Byte-level next-token training for the recurrent model, plus the
//! teacher-forced CE/PPL evaluator with optional early-exit control.
//!
//! Training is single-threaded and fully deterministic: one RNG stream
//! drives batch offsets, loop-count draws, and state noise in a fixed
//! order, and its word position is captured in every checkpoint so a
//! resumed run is bit-identical to an uninterrupted one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::ExitConfig;
use crate::graph::{Graph, Var};
use crate::model::{
    AdamMoments, Checkpoint, GraphParams, GroupExitReport, Model, TraceMode,
};
use crate::rng::{self, RngState};
use crate::tensor::Tensor;
use crate::vecmath;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup before the cosine decay
    /// down to lr/10.
    pub warmup_frac: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
    /// Recorded into checkpoints for provenance; empty outside harness runs.
    #[serde(default)]
    pub config_hash: String,
}

impl TrainConfig {
    pub fn desk_defaults(corpus: PathBuf, out_dir: PathBuf) -> Self {
        TrainConfig {
            corpus,
            out_dir,
            steps: 2000,
            batch_size: 4,
            seq_len: 64,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            checkpoint_interval: 500,
            seed: 0,
            config_hash: String::new(),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "steps and batch_size must be >= 1".into(),
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig("seq_len must be >= 2".into()));
        }
        if self.seq_len > model.config().block_size {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} exceeds block size {}",
                self.seq_len,
                model.config().block_size
            )));
        }
        if self.checkpoint_interval == 0 || self.steps % self.checkpoint_interval != 0 {
            return Err(Error::InvalidConfig(format!(
                "checkpoint interval {} must divide steps {}",
                self.checkpoint_interval, self.steps
            )));
        }
        if !(self.lr > 0.0) || !(self.warmup_frac >= 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::InvalidConfig(
                "lr must be > 0 and warmup_frac in [0, 1)".into(),
            ));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "grad_clip must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then cosine decay to lr/10 over the remainder.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = ((cfg.steps as f64 * cfg.warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let lr_min = cfg.lr / 10.0;
    let total = (cfg.steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / total;
    lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled weight decay applies to weight matrices only, not to biases
/// or norm gains (all stored 1 x n).
fn is_decayed(t: &Tensor) -> bool {
    let (r, c) = t.dims2();
    r > 1 && c > 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LogRow>,
    pub final_loss: f64,
}

fn load_corpus(path: &Path, seq_len: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < seq_len + 1 {
        return Err(Error::InvalidInput(format!(
            "corpus has {} bytes, need at least seq_len + 1 = {}",
            bytes.len(),
            seq_len + 1
        )));
    }
    Ok(bytes)
}

fn save_checkpoint(
    model: &Model,
    cfg: &TrainConfig,
    moments: &AdamMoments,
    rng: &ChaCha12Rng,
    step: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("ckpt_step{step:06}.lsc"));
    Checkpoint {
        step,
        model_config: model.config().clone(),
        recurrence: model.recurrence().clone(),
        params: model.params().clone(),
        moments: Some(moments.clone()),
        rng: RngState::capture(rng),
        config_hash: cfg.config_hash.clone(),
    }
    .save(&path)?;
    Ok(path)
}

/// One optimization step: batch assembly, forward/backward over the full
/// sampled unroll, clipping, and the AdamW update. Returns (loss, grad norm).
fn train_step(
    model: &mut Model,
    cfg: &TrainConfig,
    corpus: &[u8],
    rng: &mut ChaCha12Rng,
    moments: &mut AdamMoments,
    step: usize,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let mut gp = GraphParams::new(true);
    let mut total: Option<Var> = None;
    for _ in 0..cfg.batch_size {
        let max_off = corpus.len() - cfg.seq_len - 1;
        let off = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) };
        let window = &corpus[off..off + cfg.seq_len + 1];
        let tokens: Vec<usize> = window[..cfg.seq_len].iter().map(|&b| b as usize).collect();
        let targets: Vec<usize> = window[1..].iter().map(|&b| b as usize).collect();
        let (logits, _) = model.forward_train(&mut g, &mut gp, &tokens, rng)?;
        let ce = g.cross_entropy_mean(logits, &targets)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64)?;
    let loss_val = g.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    g.backward(loss)?;

    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in gp.vars() {
        if let Some(grad) = g.grad(*var) {
            grads.insert(name.clone(), grad.clone());
        }
    }
    let sq_sum: f64 = grads
        .values()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let grad_norm = sq_sum.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let clip_scale = if grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };

    moments.t += 1;
    let t = moments.t;
    let lr_t = lr_at(cfg, step);
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for (name, param) in model.params_mut().iter_mut() {
        let decay = is_decayed(param);
        let m = moments
            .m
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no moment for {name}")))?;
        let v = moments
            .v
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no moment for {name}")))?;
        let zero;
        let grad = match grads.get(name) {
            Some(gr) => gr.data(),
            None => {
                zero = vec![0.0; param.numel()];
                &zero
            }
        };
        let pdata = param.data_mut();
        let mdata = m.data_mut();
        let vdata = v.data_mut();
        for i in 0..pdata.len() {
            let gi = grad[i] * clip_scale;
            mdata[i] = BETA1 * mdata[i] + (1.0 - BETA1) * gi;
            vdata[i] = BETA2 * vdata[i] + (1.0 - BETA2) * gi * gi;
            let mhat = mdata[i] / bc1;
            let vhat = vdata[i] / bc2;
            if decay {
                pdata[i] -= lr_t * cfg.weight_decay * pdata[i];
            }
            pdata[i] -= lr_t * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok((loss_val, grad_norm))
}

fn run_loop(
    model: &mut Model,
    cfg: &TrainConfig,
    corpus: &[u8],
    rng: &mut ChaCha12Rng,
    moments: &mut AdamMoments,
    start_step: u64,
) -> Result<TrainOutcome> {
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    if start_step == 0 {
        checkpoints.push(save_checkpoint(model, cfg, moments, rng, 0)?);
    }
    let mut final_loss = f64::NAN;
    for step in (start_step as usize)..cfg.steps {
        let (loss, grad_norm) = train_step(model, cfg, corpus, rng, moments, step)?;
        final_loss = loss;
        log.push(LogRow {
            step: step as u64 + 1,
            loss,
            lr: lr_at(cfg, step),
            grad_norm,
        });
        if (step + 1) % cfg.checkpoint_interval == 0 {
            checkpoints.push(save_checkpoint(model, cfg, moments, rng, step as u64 + 1)?);
        }
    }
    Ok(TrainOutcome {
        checkpoints,
        log,
        final_loss,
    })
}

/// Train from the model's current parameters (step 0), emitting a
/// checkpoint immediately and then on the configured interval.
pub fn train(model: &mut Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(model)?;
    let corpus = load_corpus(&cfg.corpus, cfg.seq_len)?;
    let mut rng = rng::substream(cfg.seed, "train");
    let mut moments = AdamMoments::zeros_like(model.params());
    run_loop(model, cfg, &corpus, &mut rng, &mut moments, 0)
}

/// Continue training from a checkpoint; bit-identical to the run that
/// would have produced those steps without interruption.
pub fn resume(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<(Model, TrainOutcome)> {
    let mut model = Model::from_parts(
        ckpt.model_config.clone(),
        ckpt.recurrence.clone(),
        ckpt.params.clone(),
    )?;
    cfg.validate(&model)?;
    if ckpt.step as usize > cfg.steps {
        return Err(Error::InvalidConfig(format!(
            "checkpoint step {} beyond configured steps {}",
            ckpt.step, cfg.steps
        )));
    }
    let corpus = load_corpus(&cfg.corpus, cfg.seq_len)?;
    let mut moments = ckpt
        .moments
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks optimizer state".into()))?;
    let mut rng = ckpt.rng.restore()?;
    let out = run_loop(&mut model, cfg, &corpus, &mut rng, &mut moments, ckpt.step)?;
    Ok((model, out))
}

/// Loop control for evaluation.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// One exit config per group; None evaluates at the fixed budget.
    pub exit: Option<Vec<ExitConfig>>,
    /// Loop budget per group when no exit policy governs.
    pub budget: usize,
    /// Seed for per-sequence noise streams; fixed across sweep cells so
    /// every cell sees identical stochasticity.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SeqExitRecords {
    pub seq: usize,
    pub reports: Vec<GroupExitReport>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Teacher-forced cross-entropy, nats per token.
    pub ce: f64,
    pub ppl: f64,
    /// Mean loop steps per group, token-weighted across sequences.
    pub mean_steps_per_group: Vec<f64>,
    pub overall_mean_steps: f64,
    pub ms_per_token: f64,
    pub tokens: usize,
    pub decoder_calls: usize,
    pub exits: Vec<SeqExitRecords>,
}

/// Teacher-forced evaluation over complete sequences: each sequence of
/// length n contributes n - 1 prediction positions.
pub fn eval_ce_ppl(model: &Model, seqs: &[Vec<usize>], opts: &EvalOptions) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("empty eval set".into()));
    }
    if opts.exit.is_none() && opts.budget == 0 {
        return Err(Error::InvalidConfig("eval budget must be >= 1".into()));
    }
    let n_groups = model.n_groups();
    let start = Instant::now();
    let mut ce_sum = 0.0;
    let mut tokens = 0usize;
    let mut steps_sum = vec![0.0f64; n_groups];
    let mut steps_count = vec![0usize; n_groups];
    let mut decoder_calls = 0usize;
    let mut exits = Vec::new();

    for (i, seq) in seqs.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "eval sequence {i} shorter than 2 tokens"
            )));
        }
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        let mut r = rng::substream(opts.seed, &format!("eval-seq{i}"));
        let logits = match &opts.exit {
            None => {
                let budgets = vec![opts.budget; n_groups];
                let out = model.forward_budget(inputs, &budgets, &mut r, TraceMode::Off)?;
                for gidx in 0..n_groups {
                    steps_sum[gidx] += (opts.budget * inputs.len()) as f64;
                    steps_count[gidx] += inputs.len();
                }
                out.logits
            }
            Some(cfgs) => {
                let out = model.forward_with_exit(inputs, cfgs, &mut r)?;
                decoder_calls += out.decoder_calls;
                for rep in &out.reports {
                    steps_sum[rep.group] +=
                        rep.decisions.iter().map(|d| d.steps_used as f64).sum::<f64>();
                    steps_count[rep.group] += rep.decisions.len();
                }
                let logits = out.logits.clone();
                exits.push(SeqExitRecords {
                    seq: i,
                    reports: out.reports,
                });
                logits
            }
        };
        for (row, &target) in logits.rows_iter().zip(targets) {
            ce_sum += vecmath::cross_entropy_row(row, target);
        }
        tokens += targets.len();
    }

    let ce = ce_sum / tokens as f64;
    let mean_steps_per_group: Vec<f64> = steps_sum
        .iter()
        .zip(&steps_count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let overall = if n_groups == 0 {
        0.0
    } else {
        mean_steps_per_group.iter().sum::<f64>() / n_groups as f64
    };
    Ok(EvalReport {
        ce,
        ppl: ce.exp(),
        mean_steps_per_group,
        overall_mean_steps: overall,
        ms_per_token: start.elapsed().as_secs_f64() * 1e3 / tokens as f64,
        tokens,
        decoder_calls,
        exits,
    })
}

/// Split corpus bytes into non-overlapping eval sequences of `len + 1`
/// tokens (so each yields `len` prediction positions).
pub fn eval_sequences(corpus: &[u8], len: usize, max_seqs: usize) -> Result<Vec<Vec<usize>>> {
    if len < 1 {
        return Err(Error::InvalidInput("eval sequence length must be >= 1".into()));
    }
    let window = len + 1;
    if corpus.len() < window {
        return Err(Error::InvalidInput(format!(
            "corpus has {} bytes, need {window}",
            corpus.len()
        )));
    }
    let seqs: Vec<Vec<usize>> = corpus
        .chunks_exact(window)
        .take(max_seqs)
        .map(|w| w.iter().map(|&b| b as usize).collect())
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidInput("no eval sequences produced".into()));
    }
    Ok(seqs)
}
