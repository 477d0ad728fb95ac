//! Flat `key = value` run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, config file, `INVMIH_*`
//! environment variables, command-line flags. Unknown keys are rejected so a
//! typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{InvMihError, Result};
use crate::nn::SubnetConfig;
use crate::transforms::{grid_for_count, MosaicLayout};

/// Training stage selector; `All` runs the three stages in sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelector {
    All,
    IirWarmup,
    IihWarmup,
    Joint,
}

impl StageSelector {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StageSelector::All),
            "iir_warmup" => Ok(StageSelector::IirWarmup),
            "iih_warmup" => Ok(StageSelector::IihWarmup),
            "joint" => Ok(StageSelector::Joint),
            _ => Err(InvMihError::Config(format!(
                "stage must be one of all, iir_warmup, iih_warmup, joint; got {s}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StageSelector::All => "all",
            StageSelector::IirWarmup => "iir_warmup",
            StageSelector::IihWarmup => "iih_warmup",
            StageSelector::Joint => "joint",
        }
    }
}

/// Every tunable of the pipeline in one flat document.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: StageSelector,
    pub iir_warmup_iterations: u64,
    pub iih_warmup_iterations: u64,
    pub joint_iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub base_lr: f64,
    pub lr_halving_period: u64,
    pub seed: u64,
    pub n_secrets: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub iir_blocks: usize,
    pub iih_blocks: usize,
    pub subnet_layers: usize,
    pub growth_channels: usize,
    pub kernel_size: usize,
    pub clamp_constant: f64,
    pub final_init_scale: f64,
    pub histogram_bins: usize,
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: StageSelector::All,
            iir_warmup_iterations: 30_000,
            iih_warmup_iterations: 30_000,
            joint_iterations: 20_000,
            batch_size: 4,
            patch_size: 144,
            base_lr: 2e-4,
            lr_halving_period: 10_000,
            seed: 0,
            n_secrets: 4,
            lambda1: 1.0,
            lambda2: 4.0,
            lambda3: 5.0,
            iir_blocks: 8,
            iih_blocks: 16,
            subnet_layers: 5,
            growth_channels: 32,
            kernel_size: 3,
            clamp_constant: 2.0,
            final_init_scale: 0.0,
            histogram_bins: 64,
            checkpoint_interval: 1000,
        }
    }
}

const KEYS: &[&str] = &[
    "stage",
    "iir_warmup_iterations",
    "iih_warmup_iterations",
    "joint_iterations",
    "batch_size",
    "patch_size",
    "base_lr",
    "lr_halving_period",
    "seed",
    "n_secrets",
    "lambda1",
    "lambda2",
    "lambda3",
    "iir_blocks",
    "iih_blocks",
    "subnet_layers",
    "growth_channels",
    "kernel_size",
    "clamp_constant",
    "final_init_scale",
    "histogram_bins",
    "checkpoint_interval",
];

impl RunConfig {
    /// Parse a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                InvMihError::Config(format!("line {}: expected `key = value`: {raw}", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| InvMihError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `INVMIH_<KEY>` environment variables (uppercased key names).
    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            if let Some(suffix) = name.strip_prefix("INVMIH_") {
                let key = suffix.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    self.set(&key, &value)
                        .map_err(|e| InvMihError::Config(format!("{name}: {e}")))?;
                } else {
                    return Err(InvMihError::Config(format!(
                        "unknown environment override {name}"
                    )));
                }
            }
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| InvMihError::Config(format!("bad value for {key}: {v}")))
        }
        match key {
            "stage" => self.stage = StageSelector::parse(value)?,
            "iir_warmup_iterations" => self.iir_warmup_iterations = num(key, value)?,
            "iih_warmup_iterations" => self.iih_warmup_iterations = num(key, value)?,
            "joint_iterations" => self.joint_iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "lr_halving_period" => self.lr_halving_period = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "n_secrets" => self.n_secrets = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda3" => self.lambda3 = num(key, value)?,
            "iir_blocks" => self.iir_blocks = num(key, value)?,
            "iih_blocks" => self.iih_blocks = num(key, value)?,
            "subnet_layers" => self.subnet_layers = num(key, value)?,
            "growth_channels" => self.growth_channels = num(key, value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            "clamp_constant" => self.clamp_constant = num(key, value)?,
            "final_init_scale" => self.final_init_scale = num(key, value)?,
            "histogram_bins" => self.histogram_bins = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            _ => {
                return Err(InvMihError::Config(format!("unknown key: {key}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(InvMihError::Config("batch_size must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(InvMihError::Config("loss weights must be non-negative".into()));
        }
        if self.base_lr <= 0.0 || self.lr_halving_period == 0 {
            return Err(InvMihError::Config("learning-rate schedule must be positive".into()));
        }
        if self.iir_blocks == 0 || self.iih_blocks == 0 {
            return Err(InvMihError::Config("block counts must be positive".into()));
        }
        if self.histogram_bins < 2 {
            return Err(InvMihError::Config("histogram_bins must be at least 2".into()));
        }
        let (m, n) = grid_for_count(self.n_secrets)?;
        if self.patch_size == 0
            || self.patch_size % (2 * m) != 0
            || self.patch_size % (2 * n) != 0
        {
            return Err(InvMihError::Config(format!(
                "patch_size {} must be divisible by 2m = {} and 2n = {}",
                self.patch_size,
                2 * m,
                2 * n
            )));
        }
        Ok(())
    }

    /// Mosaic grid and nominal tile sizes at the training patch size.
    pub fn layout(&self) -> Result<MosaicLayout> {
        let (m, n) = grid_for_count(self.n_secrets)?;
        MosaicLayout::new(m, n, self.patch_size / m, self.patch_size / n)
    }

    pub fn subnet_config(&self) -> SubnetConfig {
        SubnetConfig {
            n_layers: self.subnet_layers,
            growth_channels: self.growth_channels,
            kernel_size: self.kernel_size,
            clamp_constant: self.clamp_constant,
            final_init_scale: self.final_init_scale,
        }
    }

    /// Canonical serialization; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage = {}", self.stage.as_str());
        let _ = writeln!(s, "iir_warmup_iterations = {}", self.iir_warmup_iterations);
        let _ = writeln!(s, "iih_warmup_iterations = {}", self.iih_warmup_iterations);
        let _ = writeln!(s, "joint_iterations = {}", self.joint_iterations);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "lr_halving_period = {}", self.lr_halving_period);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_secrets = {}", self.n_secrets);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "lambda3 = {}", self.lambda3);
        let _ = writeln!(s, "iir_blocks = {}", self.iir_blocks);
        let _ = writeln!(s, "iih_blocks = {}", self.iih_blocks);
        let _ = writeln!(s, "subnet_layers = {}", self.subnet_layers);
        let _ = writeln!(s, "growth_channels = {}", self.growth_channels);
        let _ = writeln!(s, "kernel_size = {}", self.kernel_size);
        let _ = writeln!(s, "clamp_constant = {}", self.clamp_constant);
        let _ = writeln!(s, "final_init_scale = {}", self.final_init_scale);
        let _ = writeln!(s, "histogram_bins = {}", self.histogram_bins);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        s
    }

    /// Key/value view used for the startup echo.
    pub fn entries(&self) -> BTreeMap<String, String> {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }
}
