//! `loopscope train`: fit the model described by [model]/[recurrence]
//! under [train], or resume from a checkpoint; writes the step log CSV and
//! a manifest listing every checkpoint produced.

use anyhow::{anyhow, Result};
use loopscope_core::dump;
use loopscope_core::model::{Checkpoint, Model};
use loopscope_core::train;

use crate::config::LoadedConfig;
use crate::manifest::Manifest;

pub fn run(lc: &LoadedConfig) -> Result<()> {
    let cfg = &lc.config;
    let mut tcfg = cfg
        .train
        .clone()
        .ok_or_else(|| anyhow!("train needs a [train] section"))?;
    tcfg.config_hash = lc.config_hash.clone();

    let (_model, outcome) = match &cfg.resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            println!("resuming from {} (step {})", path.display(), ckpt.step);
            train::resume(&ckpt, &tcfg)?
        }
        None => {
            let mc = cfg
                .model
                .clone()
                .ok_or_else(|| anyhow!("train needs a [model] section (or resume_from)"))?;
            let rec = cfg
                .recurrence
                .clone()
                .ok_or_else(|| anyhow!("train needs a [recurrence] section (or resume_from)"))?;
            let mut model = Model::new(mc, rec)?;
            let outcome = train::train(&mut model, &tcfg)?;
            (model, outcome)
        }
    };

    let log_name = format!("{}_trainlog.csv", lc.run_id);
    dump::write_train_log(&cfg.out_dir.join(&log_name), &outcome.log, &lc.config_hash)?;

    let mut manifest = Manifest::new(&lc.run_id, "train", &lc.config_hash, cfg.seed);
    manifest.push_output(&log_name);
    for p in &outcome.checkpoints {
        manifest.push_output(p.display().to_string());
    }
    manifest.write(&cfg.out_dir)?;

    println!(
        "train: {} steps, final loss {:.6}, {} checkpoints under {}",
        tcfg.steps,
        outcome.final_loss,
        outcome.checkpoints.len(),
        tcfg.out_dir.display()
    );
    Ok(())
}
