//! Flat key-value training configuration with `desk` and `paper-scale` presets.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertConfig;
use crate::gating::GateConfig;
use crate::losses::{LambdaScope, Weighting};
use crate::task::{canonical, Task};

pub const DESK_PRESET: &str = include_str!("../../../presets/desk.toml");
pub const PAPER_SCALE_PRESET: &str = include_str!("../../../presets/paper-scale.toml");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 - it / total)^0.9`
    Poly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub epochs: usize,
    /// Optimizer iterations per epoch; 0 means one pass over the labeled set.
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub gamma: f64,
    pub lambda_max: f64,
    /// Warm-up length as a fraction of `epochs`.
    pub ramp_fraction: f64,
    pub lambda_scope: LambdaScope,
    pub labeled_ratio: f64,
    pub fold: usize,
    pub n_folds: usize,
    /// Seed of the train-pool shuffle that folds are cut from.
    pub split_seed: u64,
    pub depth: usize,
    pub base_channels: usize,
    /// Channels of the features handed to the gates; 0 means `base_channels`.
    pub feature_channels: usize,
    pub gate_reduction: usize,
    pub gate_dropout: f64,
    pub experts: Vec<Task>,
    pub single_gate: bool,
    pub linear_sum_loss: bool,
    pub shared_encoder: bool,
    pub augment: bool,
    pub augment_unlabeled: bool,
    /// Side of the random crop relative to the image, resized back; 0 disables.
    pub crop_fraction: f64,
    pub dice_smooth: f64,
    /// Evaluate on the test set every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            iters_per_epoch: 0,
            batch_size: 2,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-5,
            lr_schedule: LrSchedule::Constant,
            gamma: 0.4,
            lambda_max: 5.0,
            ramp_fraction: 0.4,
            lambda_scope: LambdaScope::Whole,
            labeled_ratio: 0.1,
            fold: 0,
            n_folds: 3,
            split_seed: 0,
            depth: 3,
            base_channels: 8,
            feature_channels: 0,
            gate_reduction: 4,
            gate_dropout: 0.1,
            experts: Task::ALL.to_vec(),
            single_gate: false,
            linear_sum_loss: false,
            shared_encoder: false,
            augment: true,
            augment_unlabeled: true,
            crop_fraction: 0.0,
            dice_smooth: 1.0,
            eval_every: 1,
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    match toml::Value::try_from(TrainConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => unreachable!("config serializes to a table"),
    }
}

impl TrainConfig {
    /// Parses a config file body. Keys missing from the file take their
    /// default; unknown keys are all reported together.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = known_keys();
        let unknown: Vec<String> = table.keys().filter(|k| !known.contains(*k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Built-in presets: `desk` and `paper-scale`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Self::from_toml(DESK_PRESET),
            "paper-scale" => Self::from_toml(PAPER_SCALE_PRESET),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper-scale)"))),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key = value` overrides written in TOML value syntax.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = match toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        for (k, v) in overrides {
            let parsed: toml::Table = format!("v = {v}")
                .parse()
                .or_else(|_| format!("v = {}", toml::Value::String(v.to_string())).parse())
                .map_err(|e: toml::de::Error| Error::Config(format!("override {k}: {e}")))?;
            table.insert(k.to_string(), parsed["v"].clone());
        }
        Self::from_toml(&toml::to_string(&table).expect("table serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lambda_max >= 0.0) {
            return fail(format!("lambda_max must be non-negative, got {}", self.lambda_max));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return fail(format!("ramp_fraction must be in [0, 1], got {}", self.ramp_fraction));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return fail(format!("labeled_ratio must be in (0, 1], got {}", self.labeled_ratio));
        }
        if self.n_folds == 0 || self.fold >= self.n_folds {
            return fail(format!("fold {} out of range for {} folds", self.fold, self.n_folds));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("lr must be positive, momentum in [0, 1), weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.crop_fraction) {
            return fail(format!("crop_fraction must be in [0, 1), got {}", self.crop_fraction));
        }
        if !(self.dice_smooth >= 0.0) {
            return fail("dice_smooth must be non-negative".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        let experts = canonical(&self.experts);
        if experts.len() != self.experts.len() {
            return fail("experts list contains duplicates".into());
        }
        if !experts.contains(&Task::Seg) {
            return fail("the seg expert is required; it is the evaluated task".into());
        }
        if self.gate_reduction == 0 {
            return fail("gate_reduction must be at least 1".into());
        }
        for c in self.expert_configs() {
            c.validate()?;
        }
        if !(0.0..1.0).contains(&self.gate_dropout) {
            return fail(format!("gate_dropout must be in [0, 1), got {}", self.gate_dropout));
        }
        Ok(())
    }

    pub fn expert_tasks(&self) -> Vec<Task> {
        canonical(&self.experts)
    }

    /// Tasks that receive a gate: all experts, or only seg in the single-gate variant.
    pub fn gated_tasks(&self) -> Vec<Task> {
        if self.single_gate {
            vec![Task::Seg]
        } else {
            self.expert_tasks()
        }
    }

    pub fn expert_configs(&self) -> Vec<ExpertConfig> {
        self.expert_tasks()
            .into_iter()
            .map(|t| {
                let mut c = ExpertConfig::new(t, self.depth, self.base_channels);
                if self.feature_channels > 0 {
                    c.feature_channels = self.feature_channels;
                }
                c
            })
            .collect()
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            reduction: self.gate_reduction,
            dropout: self.gate_dropout,
        }
    }

    pub fn weighting(&self) -> Weighting {
        if self.linear_sum_loss {
            Weighting::LinearSum
        } else {
            Weighting::Adaptive { gamma: self.gamma }
        }
    }

    /// Warm-up length in epochs.
    pub fn ramp_epochs(&self) -> usize {
        (self.ramp_fraction * self.epochs as f64).round() as usize
    }

    /// Hex SHA-256 of the canonical serialized form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Named experiment variants, each a transformation of a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// All three experts, multi-gate pseudo-labels, adaptive weighting.
    Full,
    /// Same architecture trained on the labeled set only (λ = 0).
    Baseline,
    SegSdf,
    SegBnd,
    SegOnly,
    /// One seg gate; sdf/bnd pseudo-labels derived from its mask.
    SingleGate,
    /// Unweighted sum of task losses.
    LinearSum,
    SharedEncoder,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::Baseline,
        Ablation::SegSdf,
        Ablation::SegBnd,
        Ablation::SegOnly,
        Ablation::SingleGate,
        Ablation::LinearSum,
        Ablation::SharedEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Baseline => "baseline",
            Ablation::SegSdf => "seg_sdf",
            Ablation::SegBnd => "seg_bnd",
            Ablation::SegOnly => "seg_only",
            Ablation::SingleGate => "single_gate",
            Ablation::LinearSum => "linear_sum",
            Ablation::SharedEncoder => "shared_encoder",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::Baseline => cfg.lambda_max = 0.0,
            Ablation::SegSdf => cfg.experts = vec![Task::Seg, Task::Sdf],
            Ablation::SegBnd => cfg.experts = vec![Task::Seg, Task::Bnd],
            Ablation::SegOnly => cfg.experts = vec![Task::Seg],
            Ablation::SingleGate => cfg.single_gate = true,
            Ablation::LinearSum => cfg.linear_sum_loss = true,
            Ablation::SharedEncoder => cfg.shared_encoder = true,
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        let alias = match s.as_str() {
            "linear_sum_loss" => "linear_sum",
            "seg+sdf" => "seg_sdf",
            "seg+bnd" => "seg_bnd",
            other => other,
        };
        Ablation::ALL.into_iter().find(|a| a.name() == alias).ok_or_else(|| {
            let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation `{s}` (expected one of {})", names.join(", ")))
        })
    }
}
