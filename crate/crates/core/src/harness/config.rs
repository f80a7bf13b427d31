use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::MemberSpec;
use crate::error::{Error, Result};
use crate::harness::DatasetSpec;
use crate::numerics::Precision;
use crate::train::LrSchedule;
use crate::weightgen::MemberId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Gradient-similarity cluster search, then training with coefficient refinement.
    Swn,
    SingleCluster,
    RandomCluster,
    DepthBin,
    CoeffCluster,
    /// `swn` without coefficient refinement.
    NoRefine,
    /// Coefficient clustering in place of the gradient-similarity search.
    NoGradSim,
    /// One cluster with hard sharing for the whole run.
    SharedCoefficients,
    /// Standard layers, widths reduced to fit the budget.
    Baseline,
}

impl SharingMode {
    pub fn refines(self) -> bool {
        !matches!(self, SharingMode::NoRefine | SharingMode::SharedCoefficients | SharingMode::Baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemberConfig {
    /// Output channels of the convolutional stem (empty for a plain MLP).
    pub conv: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    /// Widths of the affine hidden layers.
    pub hidden: Vec<usize>,
    /// Scales every conv and hidden width (rounded, at least 1).
    pub width: f64,
}

impl Default for MemberConfig {
    fn default() -> Self {
        Self {
            conv: Vec::new(),
            kernel: 3,
            pool: 1,
            hidden: vec![32, 32, 32],
            width: 1.0,
        }
    }
}

impl MemberConfig {
    fn scaled(&self, widths: &[usize], factor: f64) -> Vec<usize> {
        widths
            .iter()
            .map(|&w| ((w as f64 * self.width * factor).round() as usize).max(1))
            .collect()
    }

    /// Member with every width additionally scaled by `factor`.
    pub fn build(
        &self,
        member_id: MemberId,
        first_layer_id: u32,
        input_shape: &[usize],
        classes: usize,
        factor: f64,
    ) -> Result<MemberSpec> {
        MemberSpec::build(
            member_id,
            first_layer_id,
            input_shape,
            &self.scaled(&self.conv, factor),
            self.kernel,
            self.pool,
            &self.scaled(&self.hidden, factor),
            classes,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub mode: SharingMode,
    /// Budget as a fraction of the full (unshared) ensemble's parameters.
    pub budget_fraction: f64,
    /// Cluster-search threshold on SuperWeight gradient similarity.
    pub tau: f64,
    /// Refinement threshold on coefficient gradient similarity.
    pub beta: f64,
    /// Epoch at which coefficients are refined.
    pub refine_epoch: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Group count of `random_cluster`, bin count of `depth_bin`, k of `coeff_cluster`.
    pub groups: usize,
    pub ece_bins: usize,
    pub symmetric_diversity: bool,
    pub interpolation_steps: usize,
    pub tie_heads: bool,
    pub members: Vec<MemberConfig>,
    pub dataset: DatasetSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            mode: SharingMode::Swn,
            budget_fraction: 0.5,
            tau: 0.1,
            beta: 0.9,
            refine_epoch: 10,
            warmup_epochs: 3,
            epochs: 30,
            batch_size: 64,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            groups: 4,
            ece_bins: 15,
            symmetric_diversity: false,
            interpolation_steps: 10,
            tie_heads: false,
            members: vec![MemberConfig::default()],
            dataset: DatasetSpec::default(),
        }
    }
}

fn check(ok: bool, key: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(
            self.budget_fraction > 0.0 && self.budget_fraction <= 1.0,
            "budget_fraction",
            "must lie in (0, 1]",
        )?;
        check(self.tau.is_finite(), "tau", "must be finite")?;
        check(self.beta.is_finite(), "beta", "must be finite")?;
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(self.refine_epoch < self.epochs, "refine_epoch", "must be smaller than epochs")?;
        check(self.warmup_epochs >= 1, "warmup_epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.lr.initial > 0.0 && self.lr.initial.is_finite(), "lr.initial", "must be positive")?;
        check(
            self.lr.decay_factor > 0.0 && self.lr.decay_factor <= 1.0,
            "lr.decay_factor",
            "must lie in (0, 1]",
        )?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", "must be non-negative")?;
        check(self.groups >= 1, "groups", "must be at least 1")?;
        check(self.ece_bins >= 1, "ece_bins", "must be at least 1")?;
        check(self.interpolation_steps >= 1, "interpolation_steps", "must be at least 1")?;
        check(!self.members.is_empty(), "members", "at least one member is required")?;
        for (i, m) in self.members.iter().enumerate() {
            let key = |f: &str| format!("members[{i}].{f}");
            check(!m.hidden.is_empty() || !m.conv.is_empty(), &key("hidden"), "a member needs at least one layer")?;
            check(m.hidden.iter().chain(&m.conv).all(|&w| w > 0), &key("hidden"), "widths must be positive")?;
            check(m.width > 0.0 && m.width.is_finite(), &key("width"), "must be positive")?;
            check(m.kernel % 2 == 1, &key("kernel"), "must be odd")?;
            check(m.pool >= 1, &key("pool"), "must be at least 1")?;
        }
        self.dataset.validate()
    }

    /// Members with globally unique, consecutive layer ids.
    pub fn build_members(&self, input_shape: &[usize], classes: usize, factor: f64) -> Result<Vec<MemberSpec>> {
        let mut next = 0u32;
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let spec = m.build(MemberId(i as u32), next, input_shape, classes, factor)?;
                next += spec.layers.len() as u32;
                Ok(spec)
            })
            .collect()
    }

    /// Hash of the configuration without its seed; names run directories.
    pub fn config_hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.seed = 0;
        let json = serde_json::to_vec(&unseeded).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML text, applies `key=value` overrides (dotted keys, values in
    /// TOML syntax or bare strings), fills defaults and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_owned()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_owned() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Reads, overrides, fills defaults and validates a configuration file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text, overrides)
}
