//! `loopscope eval`: teacher-forced CE/PPL of one checkpoint, either at a
//! fixed loop budget or under a single exit policy; per-token exit
//! decisions go to their own CSV when a policy runs.

use anyhow::{anyhow, Result};
use loopscope_core::dump::{self, ExitRow, SweepRow};
use loopscope_core::train::{eval_ce_ppl, EvalOptions};

use crate::config::LoadedConfig;
use crate::manifest::Manifest;

use super::{load_eval_seqs, model_from_checkpoint, prompt_set_hash};

pub fn run(lc: &LoadedConfig) -> Result<()> {
    let cfg = &lc.config;
    let e = cfg
        .eval
        .as_ref()
        .ok_or_else(|| anyhow!("eval needs an [eval] section"))?;
    let (model, ckpt_step) = model_from_checkpoint(&e.checkpoint, cfg.recurrence.as_ref())?;
    let seqs = load_eval_seqs(&e.corpus, e.seq_len, e.max_seqs)?;
    let phash = prompt_set_hash(&seqs);

    let exit_cfg = e
        .exit
        .as_ref()
        .map(|x| x.to_exit_config(e.budget))
        .transpose()?;
    let opts = EvalOptions {
        exit: exit_cfg.clone().map(|c| vec![c; model.n_groups()]),
        budget: e.budget,
        seed: cfg.seed,
    };
    let report = eval_ce_ppl(&model, &seqs, &opts)?;

    let row = SweepRow {
        policy: exit_cfg
            .as_ref()
            .map(|c| c.policy.label().to_string())
            .unwrap_or_else(|| "fixed-budget".into()),
        tau: exit_cfg.as_ref().map(|c| c.tau),
        normalized: exit_cfg.as_ref().map(|c| c.normalized).unwrap_or(false),
        budget: if exit_cfg.is_some() { None } else { Some(e.budget) },
        ms_per_token: report.ms_per_token,
        mean_steps: report.mean_steps_per_group.clone(),
        overall_mean_steps: report.overall_mean_steps,
        ce: report.ce,
        ppl: report.ppl,
        tokens: report.tokens,
        decoder_calls: report.decoder_calls,
        config_hash: lc.config_hash.clone(),
        prompt_hash: phash.clone(),
    };
    let eval_name = format!("{}_eval.csv", lc.run_id);
    dump::write_sweep(&cfg.out_dir.join(&eval_name), model.n_groups(), &[row])?;

    let mut manifest = Manifest::new(&lc.run_id, "eval", &lc.config_hash, cfg.seed);
    manifest.prompt_hash = Some(phash);
    manifest.push_output(&eval_name);

    if let Some(ec) = &exit_cfg {
        let mut rows = Vec::new();
        for seq_rec in &report.exits {
            for rep in &seq_rec.reports {
                for (token, d) in rep.decisions.iter().enumerate() {
                    rows.push(ExitRow {
                        seq: seq_rec.seq,
                        token,
                        group: rep.group,
                        policy: ec.policy.label().to_string(),
                        tau: ec.tau,
                        steps_used: d.steps_used,
                        exited_early: d.exited_early,
                        reason: d.reason.label().to_string(),
                    });
                }
            }
        }
        let exits_name = format!("{}_exits.csv", lc.run_id);
        dump::write_exits(&cfg.out_dir.join(&exits_name), &rows, &lc.config_hash)?;
        manifest.push_output(&exits_name);
    }
    manifest.write(&cfg.out_dir)?;

    println!(
        "eval: checkpoint step {ckpt_step}, {} tokens: ce {:.6} nats, ppl {:.4}, mean loop steps {:.3}, decoder calls {}",
        report.tokens, report.ce, report.ppl, report.overall_mean_steps, report.decoder_calls
    );
    Ok(())
}
