//! CSV writers for every artifact the harness emits. All fields are
//! written with Rust's shortest-roundtrip float formatting, so outputs are
//! byte-deterministic for identical inputs; undefined values (flagged
//! cosines, the fixed-budget row's tau) become empty fields.

use std::path::Path;

use crate::error::Result;
use crate::geometry::{AggregateCurves, StepStats};
use crate::train::LogRow;

fn esc(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

struct Csv {
    out: String,
    width: usize,
}

impl Csv {
    fn new(header: &[&str]) -> Self {
        let mut out = String::new();
        out.push_str(&header.join(","));
        out.push('\n');
        Csv {
            out,
            width: header.len(),
        }
    }

    fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.width, "csv row width mismatch");
        let escaped: Vec<String> = fields.iter().map(|f| esc(f)).collect();
        self.out.push_str(&escaped.join(","));
        self.out.push('\n');
    }

    fn write(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.out)?;
        Ok(())
    }
}

/// Per-(checkpoint, sequence, group, token, k) diagnostic record.
#[derive(Debug, Clone)]
pub struct RecordRow {
    pub checkpoint: u64,
    pub seq: usize,
    pub group: usize,
    pub token: usize,
    pub k: usize,
    pub step_norm: f64,
    pub normalized_step: f64,
    pub cosine: Option<f64>,
    pub acceleration: Option<f64>,
    pub normalized_accel: Option<f64>,
}

/// Expand one token's step statistics into per-k records.
pub fn records_from_stats(
    checkpoint: u64,
    seq: usize,
    group: usize,
    token: usize,
    stats: &StepStats,
) -> Vec<RecordRow> {
    (0..stats.step_norms.len())
        .map(|k| RecordRow {
            checkpoint,
            seq,
            group,
            token,
            k,
            step_norm: stats.step_norms[k],
            normalized_step: stats.normalized_steps[k],
            cosine: if k >= 1 { stats.cosines[k - 1] } else { None },
            acceleration: if k >= 1 {
                Some(stats.accelerations[k - 1])
            } else {
                None
            },
            normalized_accel: if k >= 1 {
                Some(stats.normalized_accels[k - 1])
            } else {
                None
            },
        })
        .collect()
}

pub fn write_records(path: &Path, rows: &[RecordRow], config_hash: &str) -> Result<()> {
    let mut csv = Csv::new(&[
        "checkpoint",
        "seq",
        "group",
        "token",
        "k",
        "step_norm",
        "normalized_step",
        "cosine",
        "acceleration",
        "normalized_accel",
        "config_hash",
    ]);
    for r in rows {
        csv.row(&[
            r.checkpoint.to_string(),
            r.seq.to_string(),
            r.group.to_string(),
            r.token.to_string(),
            r.k.to_string(),
            fmt(r.step_norm),
            fmt(r.normalized_step),
            fmt_opt(r.cosine),
            fmt_opt(r.acceleration),
            fmt_opt(r.normalized_accel),
            config_hash.to_string(),
        ]);
    }
    csv.write(path)
}

/// One point of an aggregate curve, tagged by checkpoint and metric.
#[derive(Debug, Clone)]
pub struct CurveRow {
    pub checkpoint: u64,
    pub group: usize,
    pub metric: String,
    pub k: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

/// Flatten a group's aggregate curves. Cosine/acceleration indices are
/// shifted so `k` always refers to the loop counter of the later delta.
pub fn curve_rows(checkpoint: u64, group: usize, curves: &AggregateCurves) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    let mut emit = |metric: &str, offset: usize, mean: &[Option<f64>], std: &[Option<f64>], count: &[usize]| {
        for i in 0..mean.len() {
            rows.push(CurveRow {
                checkpoint,
                group,
                metric: metric.to_string(),
                k: i + offset,
                mean: mean[i],
                std: std[i],
                count: count[i],
            });
        }
    };
    let c = &curves.step_norms;
    emit("step_norm", 0, &c.mean, &c.std, &c.count);
    let c = &curves.normalized_steps;
    emit("normalized_step", 0, &c.mean, &c.std, &c.count);
    let c = &curves.cosines;
    emit("cosine", 1, &c.mean, &c.std, &c.count);
    let c = &curves.accelerations;
    emit("acceleration", 1, &c.mean, &c.std, &c.count);
    let c = &curves.normalized_accels;
    emit("normalized_accel", 1, &c.mean, &c.std, &c.count);
    rows
}

pub fn write_curves(path: &Path, rows: &[CurveRow], config_hash: &str) -> Result<()> {
    let mut csv = Csv::new(&[
        "checkpoint",
        "group",
        "metric",
        "k",
        "mean",
        "std",
        "count",
        "config_hash",
    ]);
    for r in rows {
        csv.row(&[
            r.checkpoint.to_string(),
            r.group.to_string(),
            r.metric.clone(),
            r.k.to_string(),
            fmt_opt(r.mean),
            fmt_opt(r.std),
            r.count.to_string(),
            config_hash.to_string(),
        ]);
    }
    csv.write(path)
}

/// One projected trajectory point.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub checkpoint: u64,
    pub seq: usize,
    pub token: usize,
    pub stage: String,
    pub k: usize,
    pub pc1: f64,
    pub pc2: f64,
}

pub fn write_trajectories(path: &Path, rows: &[TrajectoryRow], config_hash: &str) -> Result<()> {
    let mut csv = Csv::new(&[
        "checkpoint",
        "seq",
        "token",
        "stage",
        "k",
        "pc1",
        "pc2",
        "config_hash",
    ]);
    for r in rows {
        csv.row(&[
            r.checkpoint.to_string(),
            r.seq.to_string(),
            r.token.to_string(),
            r.stage.clone(),
            r.k.to_string(),
            fmt(r.pc1),
            fmt(r.pc2),
            config_hash.to_string(),
        ]);
    }
    csv.write(path)
}

/// One sweep cell (policy x tau), or the fixed-budget reference row
/// (empty tau, budget set).
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub policy: String,
    pub tau: Option<f64>,
    pub normalized: bool,
    pub budget: Option<usize>,
    pub ms_per_token: f64,
    pub mean_steps: Vec<f64>,
    pub overall_mean_steps: f64,
    pub ce: f64,
    pub ppl: f64,
    pub tokens: usize,
    pub decoder_calls: usize,
    pub config_hash: String,
    pub prompt_hash: String,
}

pub fn write_sweep(path: &Path, n_groups: usize, rows: &[SweepRow]) -> Result<()> {
    let mut header: Vec<String> = ["policy", "tau", "normalized", "budget", "ms_per_token"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for g in 0..n_groups {
        header.push(format!("mean_steps_g{g}"));
    }
    header.extend(
        [
            "mean_steps_overall",
            "ce",
            "ppl",
            "tokens",
            "decoder_calls",
            "config_hash",
            "prompt_hash",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for r in rows {
        let mut fields = vec![
            r.policy.clone(),
            fmt_opt(r.tau),
            r.normalized.to_string(),
            r.budget.map(|b| b.to_string()).unwrap_or_default(),
            fmt(r.ms_per_token),
        ];
        for g in 0..n_groups {
            fields.push(fmt(*r.mean_steps.get(g).unwrap_or(&0.0)));
        }
        fields.extend([
            fmt(r.overall_mean_steps),
            fmt(r.ce),
            fmt(r.ppl),
            r.tokens.to_string(),
            r.decoder_calls.to_string(),
            r.config_hash.clone(),
            r.prompt_hash.clone(),
        ]);
        csv.row(&fields);
    }
    csv.write(path)
}

/// Strip the wall-time column from a sweep CSV for byte-level
/// determinism comparisons.
pub fn strip_wall_time_column(csv_text: &str) -> String {
    let mut out = String::new();
    let mut drop_idx: Option<usize> = None;
    for (i, line) in csv_text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if i == 0 {
            drop_idx = fields.iter().position(|f| *f == "ms_per_token");
        }
        let kept: Vec<&str> = fields
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != drop_idx)
            .map(|(_, f)| *f)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

/// One per-token exit outcome.
#[derive(Debug, Clone)]
pub struct ExitRow {
    pub seq: usize,
    pub token: usize,
    pub group: usize,
    pub policy: String,
    pub tau: f64,
    pub steps_used: usize,
    pub exited_early: bool,
    pub reason: String,
}

pub fn write_exits(path: &Path, rows: &[ExitRow], config_hash: &str) -> Result<()> {
    let mut csv = Csv::new(&[
        "seq",
        "token",
        "group",
        "policy",
        "tau",
        "steps_used",
        "exited_early",
        "reason",
        "config_hash",
    ]);
    for r in rows {
        csv.row(&[
            r.seq.to_string(),
            r.token.to_string(),
            r.group.to_string(),
            r.policy.clone(),
            fmt(r.tau),
            r.steps_used.to_string(),
            r.exited_early.to_string(),
            r.reason.clone(),
            config_hash.to_string(),
        ]);
    }
    csv.write(path)
}

pub fn write_train_log(path: &Path, rows: &[LogRow], config_hash: &str) -> Result<()> {
    let mut csv = Csv::new(&["step", "loss", "lr", "grad_norm", "config_hash"]);
    for r in rows {
        csv.row(&[
            r.step.to_string(),
            fmt(r.loss),
            fmt(r.lr),
            fmt(r.grad_norm),
            config_hash.to_string(),
        ]);
    }
    csv.write(path)
}

/// One oracle conformance check result.
#[derive(Debug, Clone)]
pub struct OracleRow {
    pub check: String,
    pub case: String,
    pub expected: String,
    pub actual: String,
    pub pass: bool,
}

pub fn write_oracle_report(path: &Path, rows: &[OracleRow], config_hash: &str) -> Result<()> {
    let mut csv = Csv::new(&["check", "case", "expected", "actual", "pass", "config_hash"]);
    for r in rows {
        csv.row(&[
            r.check.clone(),
            r.case.clone(),
            r.expected.clone(),
            r.actual.clone(),
            r.pass.to_string(),
            config_hash.to_string(),
        ]);
    }
    csv.write(path)
}
