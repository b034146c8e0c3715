//! Model and recurrence configuration: architecture sizes, block-group
//! layout (which layer spans loop, self vs paired), and the loop-count
//! schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            vocab_size: 50257,
            block_size: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Byte-vocabulary desk scale: small enough to train on one core.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size: 256,
            block_size: 128,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.vocab_size == 0
            || self.block_size == 0
        {
            return Err(Error::InvalidConfig(
                "model dimensions must be nonzero".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    /// One layer looped on itself.
    SelfLoop,
    /// Two (or more) adjacent layers stepped jointly under one loop count.
    PairedLoop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    /// Contiguous, ascending layer indices looped as one unit.
    pub layers: Vec<usize>,
    pub kind: GroupKind,
}

impl Group {
    pub fn self_loop(layer: usize) -> Self {
        Group {
            layers: vec![layer],
            kind: GroupKind::SelfLoop,
        }
    }

    pub fn paired(first: usize, last: usize) -> Self {
        Group {
            layers: (first..=last).collect(),
            kind: GroupKind::PairedLoop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum LoopSchedule {
    /// Every group loops exactly `l` times.
    Fixed { l: usize },
    /// Loop count L = 1 + Poisson(lambda), lambda ~ LogNormal with
    /// E[lambda] = r, so E[L] = r + 1.
    Sampled { r: f64, sigma: f64 },
}

impl LoopSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LoopSchedule::Fixed { l } => {
                if *l == 0 {
                    return Err(Error::InvalidConfig("fixed loop count must be >= 1".into()));
                }
            }
            LoopSchedule::Sampled { r, sigma } => {
                if !(*r > 0.0) || !r.is_finite() {
                    return Err(Error::InvalidConfig("sampled rate r must be > 0".into()));
                }
                if !(*sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::InvalidConfig("sampled sigma must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Expected loop count, used to scale residual init for the effective
    /// network depth.
    pub fn expected_loops(&self) -> f64 {
        match self {
            LoopSchedule::Fixed { l } => *l as f64,
            LoopSchedule::Sampled { r, .. } => r + 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceSpec {
    pub groups: Vec<Group>,
    pub schedule: LoopSchedule,
    /// Std of the Gaussian state noise injected at group entry.
    pub sigma_state: f64,
    /// Re-inject fresh noise before every loop step instead of only at
    /// group entry.
    #[serde(default)]
    pub noise_every_step: bool,
}

impl RecurrenceSpec {
    /// The default deep layout: self-loop at layer 3, paired loop over
    /// layers 4-5, self-loop at layer 6 (0-indexed, 12-layer stack).
    pub fn deep_default() -> Self {
        RecurrenceSpec {
            groups: vec![
                Group::self_loop(3),
                Group::paired(4, 5),
                Group::self_loop(6),
            ],
            schedule: LoopSchedule::Sampled { r: 12.0, sigma: 0.5 },
            sigma_state: 0.02,
            noise_every_step: false,
        }
    }

    /// Desk layout with two independent self-loops (layers 1 and 2 of a
    /// 4-layer stack).
    pub fn desk_two_self() -> Self {
        RecurrenceSpec {
            groups: vec![Group::self_loop(1), Group::self_loop(2)],
            schedule: LoopSchedule::Sampled { r: 4.0, sigma: 0.5 },
            sigma_state: 0.02,
            noise_every_step: false,
        }
    }

    /// Desk layout with one paired loop over layers 1-2.
    pub fn desk_paired() -> Self {
        RecurrenceSpec {
            groups: vec![Group::paired(1, 2)],
            schedule: LoopSchedule::Sampled { r: 4.0, sigma: 0.5 },
            sigma_state: 0.02,
            noise_every_step: false,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        if !(self.sigma_state >= 0.0) || !self.sigma_state.is_finite() {
            return Err(Error::InvalidConfig("sigma_state must be >= 0".into()));
        }
        let mut prev_end: Option<usize> = None;
        for (g, group) in self.groups.iter().enumerate() {
            if group.layers.is_empty() {
                return Err(Error::InvalidConfig(format!("group {g} has no layers")));
            }
            for w in group.layers.windows(2) {
                if w[1] != w[0] + 1 {
                    return Err(Error::InvalidConfig(format!(
                        "group {g} layer span must be contiguous ascending"
                    )));
                }
            }
            match group.kind {
                GroupKind::SelfLoop if group.layers.len() != 1 => {
                    return Err(Error::InvalidConfig(format!(
                        "group {g} is a self-loop but spans {} layers",
                        group.layers.len()
                    )));
                }
                GroupKind::PairedLoop if group.layers.len() < 2 => {
                    return Err(Error::InvalidConfig(format!(
                        "group {g} is a paired loop but spans one layer"
                    )));
                }
                _ => {}
            }
            let first = group.layers[0];
            let last = *group.layers.last().expect("nonempty");
            if last >= model.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "group {g} references layer {last} outside the {}-layer stack",
                    model.n_layers
                )));
            }
            if let Some(pe) = prev_end {
                if first <= pe {
                    return Err(Error::InvalidConfig(
                        "group layer spans must be disjoint and ordered".into(),
                    ));
                }
            }
            prev_end = Some(last);
        }
        Ok(())
    }

    /// Group index owning `layer`, if any.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| g.layers.contains(&layer))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("recurrence file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("recurrence serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
