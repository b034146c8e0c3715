//! `loopscope sweep`: grid of exit policies x thresholds against a
//! fixed-budget reference, every cell on the identical prompt set and
//! identical per-sequence noise streams. The reference row comes first;
//! cells follow in (policy, ascending tau) order.

use anyhow::{anyhow, Result};
use loopscope_core::dump::{self, SweepRow};
use loopscope_core::exit::{ExitConfig, ExitPolicy};
use loopscope_core::train::{eval_ce_ppl, EvalOptions, EvalReport};

use crate::config::LoadedConfig;
use crate::manifest::Manifest;

use super::{load_eval_seqs, model_from_checkpoint, prompt_set_hash};

fn row_from_report(
    lc: &LoadedConfig,
    phash: &str,
    policy: String,
    tau: Option<f64>,
    normalized: bool,
    budget: Option<usize>,
    r: &EvalReport,
) -> SweepRow {
    SweepRow {
        policy,
        tau,
        normalized,
        budget,
        ms_per_token: r.ms_per_token,
        mean_steps: r.mean_steps_per_group.clone(),
        overall_mean_steps: r.overall_mean_steps,
        ce: r.ce,
        ppl: r.ppl,
        tokens: r.tokens,
        decoder_calls: r.decoder_calls,
        config_hash: lc.config_hash.clone(),
        prompt_hash: phash.to_string(),
    }
}

pub fn run(lc: &LoadedConfig) -> Result<()> {
    let cfg = &lc.config;
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow!("sweep needs a [sweep] section"))?;
    s.validate()?;
    let (model, ckpt_step) = model_from_checkpoint(&s.checkpoint, cfg.recurrence.as_ref())?;
    let n_groups = model.n_groups();
    let seqs = load_eval_seqs(&s.corpus, s.seq_len, s.max_seqs)?;
    let phash = prompt_set_hash(&seqs);

    let mut rows = Vec::new();
    let base = eval_ce_ppl(
        &model,
        &seqs,
        &EvalOptions {
            exit: None,
            budget: s.budget,
            seed: cfg.seed,
        },
    )?;
    rows.push(row_from_report(
        lc,
        &phash,
        "fixed-budget".into(),
        None,
        false,
        Some(s.budget),
        &base,
    ));

    for &policy in &s.policies {
        for &tau in &s.taus {
            let mut ec = ExitConfig::new(policy, tau, s.budget)?;
            // KL is already scale-free; the flag only shapes the other two.
            ec.normalized = s.normalized && policy != ExitPolicy::Kl;
            ec.validate()?;
            let rep = eval_ce_ppl(
                &model,
                &seqs,
                &EvalOptions {
                    exit: Some(vec![ec.clone(); n_groups]),
                    budget: s.budget,
                    seed: cfg.seed,
                },
            )?;
            rows.push(row_from_report(
                lc,
                &phash,
                policy.label().to_string(),
                Some(tau),
                ec.normalized,
                None,
                &rep,
            ));
        }
    }

    let sweep_name = format!("{}_sweep.csv", lc.run_id);
    dump::write_sweep(&cfg.out_dir.join(&sweep_name), n_groups, &rows)?;

    let mut manifest = Manifest::new(&lc.run_id, "sweep", &lc.config_hash, cfg.seed);
    manifest.prompt_hash = Some(phash);
    manifest.push_output(&sweep_name);
    manifest.write(&cfg.out_dir)?;

    println!(
        "sweep: checkpoint step {ckpt_step}, {} prompts, budget {} -> {} rows",
        seqs.len(),
        s.budget,
        rows.len()
    );
    for r in &rows {
        println!(
            "  {:<13} tau {:<8} steps {:>7.3}  ce {:.6}  ppl {:>9.4}  decoder calls {}",
            r.policy,
            r.tau.map(|t| format!("{t:.0e}")).unwrap_or_else(|| "-".into()),
            r.overall_mean_steps,
            r.ce,
            r.ppl,
            r.decoder_calls
        );
    }
    Ok(())
}
