//! Subcommand implementations plus the helpers they share.

pub mod diagnose;
pub mod eval;
pub mod oracle;
pub mod sweep;
pub mod train;

use std::path::Path;

use anyhow::{Context, Result};
use loopscope_core::model::{Checkpoint, Model, RecurrenceSpec};
use loopscope_core::train::eval_sequences;
use sha2::{Digest, Sha256};

/// Rebuild the model stored in a checkpoint, optionally swapping in a
/// recurrence override (e.g. to evaluate at a different schedule than the
/// one trained with). Returns the model and the checkpoint's step.
pub(crate) fn model_from_checkpoint(
    path: &Path,
    rec_override: Option<&RecurrenceSpec>,
) -> Result<(Model, u64)> {
    let ckpt =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let rec = rec_override.cloned().unwrap_or(ckpt.recurrence);
    let model = Model::from_parts(ckpt.model_config, rec, ckpt.params)?;
    Ok((model, ckpt.step))
}

/// Non-overlapping eval sequences from a byte corpus.
pub(crate) fn load_eval_seqs(path: &Path, seq_len: usize, max_seqs: usize) -> Result<Vec<Vec<usize>>> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading eval corpus {}", path.display()))?;
    Ok(eval_sequences(&bytes, seq_len, max_seqs)?)
}

/// Order-sensitive hash of the prompt set, recorded in sweep rows and
/// manifests so prompt parity across cells and runs is checkable.
pub(crate) fn prompt_set_hash(seqs: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for s in seqs {
        h.update((s.len() as u64).to_le_bytes());
        for &t in s {
            h.update((t as u64).to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_hash_is_order_and_content_sensitive() {
        let a = vec![vec![1usize, 2, 3], vec![4, 5, 6]];
        let b = vec![vec![4usize, 5, 6], vec![1, 2, 3]];
        let c = vec![vec![1usize, 2], vec![3, 4, 5, 6]];
        let ha = prompt_set_hash(&a);
        assert_eq!(ha.len(), 12);
        assert_eq!(ha, prompt_set_hash(&a));
        assert_ne!(ha, prompt_set_hash(&b));
        assert_ne!(ha, prompt_set_hash(&c));
    }
}
