//! `loopscope diagnose`: iterate-geometry collection. Model mode runs
//! each checkpoint over the eval set at a fixed budget and emits
//! per-(seq, group, token, k) records, per-group aggregate curves
//! (mean +/- 1 sigma), and per-sequence 2-D projections of the whole
//! depth trajectory. Spiral mode pipes synthetic traces through the same
//! statistics and writers.

use anyhow::{anyhow, bail, Result};
use loopscope_core::dump::{self, curve_rows, records_from_stats, CurveRow, RecordRow, TrajectoryRow};
use loopscope_core::geometry::{aggregate, fit_pca, project_point, StepStats, STAT_EPS};
use loopscope_core::model::TraceMode;
use loopscope_core::rng;
use loopscope_core::spiral::{generate_two_scale_trace, simulate_trace, DriftConfig, SpiralConfig};

use crate::config::{DiagnoseSection, DiagnoseSource, LoadedConfig};
use crate::manifest::Manifest;

use super::{load_eval_seqs, model_from_checkpoint, prompt_set_hash};

struct Artifacts {
    records: Vec<RecordRow>,
    curves: Vec<CurveRow>,
    trajectories: Vec<TrajectoryRow>,
    prompt_hash: Option<String>,
}

pub fn run(lc: &LoadedConfig) -> Result<()> {
    let cfg = &lc.config;
    let d = cfg
        .diagnose
        .as_ref()
        .ok_or_else(|| anyhow!("diagnose needs a [diagnose] section"))?;
    let art = match d.source {
        DiagnoseSource::Model => collect_model(lc, d)?,
        DiagnoseSource::Spiral => collect_spiral(lc)?,
    };

    let names = [
        (format!("{}_records.csv", lc.run_id), 0),
        (format!("{}_curves.csv", lc.run_id), 1),
        (format!("{}_trajectories.csv", lc.run_id), 2),
    ];
    dump::write_records(&cfg.out_dir.join(&names[0].0), &art.records, &lc.config_hash)?;
    dump::write_curves(&cfg.out_dir.join(&names[1].0), &art.curves, &lc.config_hash)?;
    dump::write_trajectories(
        &cfg.out_dir.join(&names[2].0),
        &art.trajectories,
        &lc.config_hash,
    )?;

    let mut manifest = Manifest::new(&lc.run_id, "diagnose", &lc.config_hash, cfg.seed);
    manifest.prompt_hash = art.prompt_hash;
    for (n, _) in &names {
        manifest.push_output(n);
    }
    manifest.write(&cfg.out_dir)?;

    println!(
        "diagnose: {} records, {} curve points, {} trajectory points -> {}",
        art.records.len(),
        art.curves.len(),
        art.trajectories.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn collect_model(lc: &LoadedConfig, d: &DiagnoseSection) -> Result<Artifacts> {
    let cfg = &lc.config;
    if d.checkpoints.is_empty() {
        bail!("diagnose over a model needs [diagnose].checkpoints");
    }
    let corpus = d
        .corpus
        .as_ref()
        .ok_or_else(|| anyhow!("diagnose over a model needs [diagnose].corpus"))?;
    let seqs = load_eval_seqs(corpus, d.seq_len, d.max_seqs)?;
    let phash = prompt_set_hash(&seqs);

    let mut records = Vec::new();
    let mut curves = Vec::new();
    let mut trajectories = Vec::new();

    for path in &d.checkpoints {
        let (model, step) = model_from_checkpoint(path, cfg.recurrence.as_ref())?;
        let n_groups = model.n_groups();
        let budgets = vec![d.budget; n_groups];
        let mut group_stats: Vec<Vec<StepStats>> = vec![Vec::new(); n_groups];

        for (i, seq) in seqs.iter().enumerate() {
            let inputs = &seq[..seq.len() - 1];
            // Same per-sequence stream eval uses, so diagnosed trajectories
            // are the ones the eval numbers came from.
            let mut r = rng::substream(cfg.seed, &format!("eval-seq{i}"));
            let out = model.forward_budget(inputs, &budgets, &mut r, TraceMode::Full)?;

            for tr in &out.traces {
                for token in 0..tr.n_tokens() {
                    let it = tr.token_trace(token)?;
                    let stats = StepStats::from_trace(&it, STAT_EPS)?;
                    records.extend(records_from_stats(step, i, tr.group, token, &stats));
                    group_stats[tr.group].push(stats);
                }
            }

            // One projection plane per sequence, fitted over every depth
            // stage of every token, so loop iterates and single-pass
            // stages land in a common 2-D picture.
            let mut points = Vec::new();
            for st in &out.stages {
                for t in 0..inputs.len() {
                    points.push(st.state.row(t).to_vec());
                }
            }
            let proj = fit_pca(&points)?;
            for st in &out.stages {
                for t in 0..inputs.len() {
                    let [pc1, pc2] = project_point(&proj, st.state.row(t))?;
                    trajectories.push(TrajectoryRow {
                        checkpoint: step,
                        seq: i,
                        token: t,
                        stage: st.stage.clone(),
                        k: st.k,
                        pc1,
                        pc2,
                    });
                }
            }
        }

        for (g, stats) in group_stats.iter().enumerate() {
            curves.extend(curve_rows(step, g, &aggregate(stats)?));
        }
    }

    Ok(Artifacts {
        records,
        curves,
        trajectories,
        prompt_hash: Some(phash),
    })
}

/// Spiral traces run through the identical stats/CSV path as model
/// traces; the `group`/`seq` columns both carry the spiral's index and
/// the checkpoint column is 0. With jumps on every section after the
/// first, the sections also form one two-scale trace whose projection
/// lands in the trajectories CSV, labeled by segment.
fn collect_spiral(lc: &LoadedConfig) -> Result<Artifacts> {
    let cfg = &lc.config;
    if cfg.spiral.is_empty() {
        bail!("diagnose over spirals needs [[spiral]] sections");
    }
    let spirals: Vec<SpiralConfig> = cfg
        .spiral
        .iter()
        .map(|s| s.to_spiral())
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut curves = Vec::new();
    let mut trajectories = Vec::new();

    for (i, (sec, sp)) in cfg.spiral.iter().zip(&spirals).enumerate() {
        let trace = simulate_trace(sp, sec.steps)?;
        let stats = StepStats::from_trace(&trace, STAT_EPS)?;
        records.extend(records_from_stats(0, i, i, 0, &stats));
        curves.extend(curve_rows(0, i, &aggregate(std::slice::from_ref(&stats))?));
    }

    let two_scale = spirals.len() >= 2 && cfg.spiral[1..].iter().all(|s| s.jump.is_some());
    if two_scale {
        let steps: Vec<usize> = cfg.spiral.iter().map(|s| s.steps).collect();
        let jumps: Vec<Vec<f64>> = cfg.spiral[1..]
            .iter()
            .map(|s| s.jump.clone().expect("checked above"))
            .collect();
        let ts = generate_two_scale_trace(&spirals, &steps, &DriftConfig { block_jumps: jumps })?;
        let proj = fit_pca(&ts.states)?;
        for (state, label) in ts.states.iter().zip(&ts.labels) {
            let [pc1, pc2] = project_point(&proj, state)?;
            trajectories.push(TrajectoryRow {
                checkpoint: 0,
                seq: 0,
                token: 0,
                stage: format!("segment{}", label.segment),
                k: label.step,
                pc1,
                pc2,
            });
        }
    } else {
        if cfg.spiral.iter().skip(1).any(|s| s.jump.is_some()) {
            bail!("two-scale mode needs a jump on every [[spiral]] after the first");
        }
        for (i, (sec, sp)) in cfg.spiral.iter().zip(&spirals).enumerate() {
            let trace = simulate_trace(sp, sec.steps)?;
            let proj = fit_pca(&trace.states)?;
            for (k, state) in trace.states.iter().enumerate() {
                let [pc1, pc2] = project_point(&proj, state)?;
                trajectories.push(TrajectoryRow {
                    checkpoint: 0,
                    seq: i,
                    token: 0,
                    stage: "segment0".into(),
                    k,
                    pc1,
                    pc2,
                });
            }
        }
    }

    Ok(Artifacts {
        records,
        curves,
        trajectories,
        prompt_hash: None,
    })
}
