//! Experiment configuration: one TOML file drives every subcommand, with
//! dotted `--set key=value` overrides applied before deserialization.
//!
//! The run's config hash is the sha256 of the raw file bytes plus every
//! override string (NUL-separated, in order). The run id prefixing every
//! artifact folds the subcommand in as well, so e.g. eval and sweep over
//! one config never clobber each other's manifests, while repeat runs of
//! the same invocation keep identical names (outputs stay comparable).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use loopscope_core::exit::{ExitConfig, ExitPolicy};
use loopscope_core::model::{ModelConfig, RecurrenceSpec};
use loopscope_core::spiral::SpiralConfig;
use loopscope_core::train::TrainConfig;
use serde::Deserialize;
use sha2::{Digest, Sha256};

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_taus() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3, 1e-2]
}

fn default_policies() -> Vec<ExitPolicy> {
    vec![ExitPolicy::StepNorm, ExitPolicy::Kl, ExitPolicy::Acceleration]
}

fn default_diag_seq_len() -> usize {
    32
}

fn default_diag_max_seqs() -> usize {
    8
}

fn default_diag_budget() -> usize {
    8
}

fn default_radius() -> f64 {
    1.0
}

fn default_spiral_steps() -> usize {
    80
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; only 1 exists.
    pub version: u32,
    /// Harness seed: drives per-sequence eval noise streams. Training has
    /// its own seed under [train], model init its own under [model].
    #[serde(default)]
    pub seed: u64,
    /// Directory for CSV artifacts and the run manifest.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Checkpoint to resume training from instead of a fresh init.
    pub resume_from: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    /// Grouping/schedule/noise spec. When evaluating a checkpoint this
    /// overrides the one stored in it; omit to use the stored spec.
    pub recurrence: Option<RecurrenceSpec>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalSection>,
    pub sweep: Option<SweepSection>,
    pub diagnose: Option<DiagnoseSection>,
    /// Spiral fixtures for `diagnose` (source = "spiral") and extra
    /// `oracle` cases. Listed in segment order for two-scale traces.
    #[serde(default)]
    pub spiral: Vec<SpiralSection>,
    #[serde(default)]
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSection {
    pub policy: ExitPolicy,
    pub tau: f64,
    #[serde(default)]
    pub normalized: bool,
    pub two_hit: Option<bool>,
    pub min_steps: Option<usize>,
    pub k_max: Option<usize>,
}

impl ExitSection {
    /// Concrete exit config; `default_k_max` (the eval budget) caps the
    /// loop when the section doesn't pin its own ceiling.
    pub fn to_exit_config(&self, default_k_max: usize) -> Result<ExitConfig> {
        let mut c = ExitConfig::new(self.policy, self.tau, self.k_max.unwrap_or(default_k_max))?;
        c.normalized = self.normalized;
        if let Some(t) = self.two_hit {
            c.two_hit = t;
        }
        if let Some(m) = self.min_steps {
            c.min_steps = m;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub seq_len: usize,
    pub max_seqs: usize,
    /// Loop budget per group: the fixed depth without an exit policy, the
    /// step ceiling with one.
    pub budget: usize,
    pub exit: Option<ExitSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub seq_len: usize,
    pub max_seqs: usize,
    /// Fixed-budget reference depth; also the k_max every exit cell runs
    /// under, so cells and reference share a ceiling.
    pub budget: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_policies")]
    pub policies: Vec<ExitPolicy>,
    /// Use normalized trigger statistics for step-norm and acceleration
    /// cells (KL is already scale-free).
    #[serde(default)]
    pub normalized: bool,
}

impl SweepSection {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            bail!("[sweep].budget must be >= 1");
        }
        if self.taus.is_empty() {
            bail!("[sweep].taus must not be empty");
        }
        for w in self.taus.windows(2) {
            if w[0] >= w[1] {
                bail!("[sweep].taus must be strictly ascending, got {:?}", self.taus);
            }
        }
        if self.taus[0] <= 0.0 {
            bail!("[sweep].taus must be strictly positive");
        }
        if self.policies.is_empty() {
            bail!("[sweep].policies must not be empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnoseSource {
    #[default]
    Model,
    Spiral,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    #[serde(default)]
    pub source: DiagnoseSource,
    /// Checkpoints to compare, e.g. first and final from one run.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_diag_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_diag_max_seqs")]
    pub max_seqs: usize,
    /// Fixed loop budget so every token records the same number of
    /// iterates.
    #[serde(default = "default_diag_budget")]
    pub budget: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralSection {
    pub dim: usize,
    pub rho: f64,
    pub theta_deg: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_spiral_steps")]
    pub steps: usize,
    /// Offset applied before this segment in a two-scale trace; required
    /// on every section after the first to enable that mode.
    pub jump: Option<Vec<f64>>,
}

impl SpiralSection {
    pub fn to_spiral(&self) -> Result<SpiralConfig> {
        Ok(SpiralConfig::axis_aligned(
            self.dim,
            self.rho,
            self.theta_deg.to_radians(),
            self.radius,
        )?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Thresholds the exit-step predictions are checked at.
    pub taus: Vec<f64>,
    pub k_max: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            taus: default_taus(),
            k_max: 2000,
        }
    }
}

/// Parsed config plus its identity.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Full sha256 hex of raw config bytes + overrides.
    pub config_hash: String,
    /// 12 hex chars of sha256(command + config bytes + overrides);
    /// prefixes artifact names.
    pub run_id: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path, sets: &[String], command: &str) -> Result<LoadedConfig> {
    let raw = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&raw);
    for s in sets {
        hasher.update([0u8]);
        hasher.update(s.as_bytes());
    }
    let config_hash = hex(&hasher.finalize());

    let mut id_hasher = Sha256::new();
    id_hasher.update(command.as_bytes());
    id_hasher.update([0u8]);
    id_hasher.update(config_hash.as_bytes());
    let run_id = hex(&id_hasher.finalize())[..12].to_string();

    let text = String::from_utf8(raw).context("config is not utf-8")?;
    let mut value: toml::Value = text.parse().context("parsing config TOML")?;
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .context("config does not match the schema")?;
    if config.version != 1 {
        bail!("unsupported config version {} (expected 1)", config.version);
    }
    Ok(LoadedConfig {
        config,
        config_hash,
        run_id,
    })
}

/// Parse an override value as a TOML literal, falling back to a string so
/// bare paths work without quoting.
fn parse_scalar(s: &str) -> toml::Value {
    match format!("v = {s}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v just parsed"),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, val) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--set wants key=value, got {spec:?}"))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        bail!("--set key {key:?} has an empty path segment");
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let here = || segments[..=i].join(".");
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cur
                .as_array_mut()
                .ok_or_else(|| anyhow!("--set {key}: {} is not an array index", here()))?;
            if idx >= arr.len() {
                bail!("--set {key}: index {idx} out of bounds (len {})", arr.len());
            }
            if last {
                arr[idx] = parse_scalar(val.trim());
                return Ok(());
            }
            cur = &mut arr[idx];
        } else {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| anyhow!("--set {key}: {} is not a table", here()))?;
            if last {
                table.insert(seg.to_string(), parse_scalar(val.trim()));
                return Ok(());
            }
            cur = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    unreachable!("loop returns on the last segment")
}
