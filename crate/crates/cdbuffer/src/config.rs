//! Experiment configuration: every knob of a run, serializable and hashable.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cdbuffer_core::backbone::{NetConfig, TrainConfig};
use cdbuffer_core::data::CorruptionKind;
use cdbuffer_core::discrepancy::{DiscrepancyConfig, Metric, Normalization};
use cdbuffer_core::engine::{AdaptConfig, Coupling, Hyper, MaskMode, Switches};

use crate::error::{RunError, RunResult};

pub const CONFIG_SCHEMA: &str = "cdbuffer-config-1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub lambda_reg: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub rho_target: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub k: f64,
    pub r: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Hyper::default().into()
    }
}

impl From<Hyper> for HyperConfig {
    fn from(h: Hyper) -> Self {
        Self {
            lambda_reg: h.lambda_reg,
            lambda_s: h.lambda_s,
            lambda_a: h.lambda_a,
            rho_target: h.rho,
            lr: h.lr,
            batch_size: h.batch_size,
            k: h.k,
            r: h.r,
        }
    }
}

impl From<HyperConfig> for Hyper {
    fn from(h: HyperConfig) -> Self {
        Self {
            lambda_reg: h.lambda_reg,
            lambda_s: h.lambda_s,
            lambda_a: h.lambda_a,
            rho: h.rho_target,
            lr: h.lr,
            batch_size: h.batch_size,
            k: h.k,
            r: h.r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplingConfig {
    #[default]
    Inverse,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchConfig {
    pub mask_loss_on: bool,
    pub subtractive_on: bool,
    pub additive_on: bool,
    pub grad_scaling_on: bool,
    pub coupling: CouplingConfig,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Switches::FULL.into()
    }
}

impl From<Switches> for SwitchConfig {
    fn from(s: Switches) -> Self {
        Self {
            mask_loss_on: s.mask_loss,
            subtractive_on: s.subtractive,
            additive_on: s.additive,
            grad_scaling_on: s.grad_scaling,
            coupling: match s.coupling {
                Coupling::Inverse => CouplingConfig::Inverse,
                Coupling::Constant => CouplingConfig::Constant,
            },
        }
    }
}

impl From<SwitchConfig> for Switches {
    fn from(s: SwitchConfig) -> Self {
        Self {
            mask_loss: s.mask_loss_on,
            subtractive: s.subtractive_on,
            additive: s.additive_on,
            grad_scaling: s.grad_scaling_on,
            coupling: match s.coupling {
                CouplingConfig::Inverse => Coupling::Inverse,
                CouplingConfig::Constant => Coupling::Constant,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricConfig {
    #[default]
    L1,
    L2,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationConfig {
    UnitMean,
    #[default]
    SourceScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancySettings {
    pub metric: MetricConfig,
    pub normalization: NormalizationConfig,
}

impl From<DiscrepancySettings> for DiscrepancyConfig {
    fn from(d: DiscrepancySettings) -> Self {
        Self {
            metric: match d.metric {
                MetricConfig::L1 => Metric::L1,
                MetricConfig::L2 => Metric::L2,
                MetricConfig::Cosine => Metric::Cosine,
            },
            normalization: match d.normalization {
                NormalizationConfig::UnitMean => Normalization::UnitMean,
                NormalizationConfig::SourceScale => Normalization::SourceScale,
            },
        }
    }
}

impl From<DiscrepancyConfig> for DiscrepancySettings {
    fn from(d: DiscrepancyConfig) -> Self {
        Self {
            metric: match d.metric {
                Metric::L1 => MetricConfig::L1,
                Metric::L2 => MetricConfig::L2,
                Metric::Cosine => MetricConfig::Cosine,
            },
            normalization: match d.normalization {
                Normalization::UnitMean => NormalizationConfig::UnitMean,
                Normalization::SourceScale => NormalizationConfig::SourceScale,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskModeConfig {
    #[default]
    Ste,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindConfig {
    GaussianNoise,
    BrightnessShift,
    BoxBlur,
    HazeMix,
}

impl From<KindConfig> for CorruptionKind {
    fn from(k: KindConfig) -> Self {
        match k {
            KindConfig::GaussianNoise => Self::GaussianNoise,
            KindConfig::BrightnessShift => Self::BrightnessShift,
            KindConfig::BoxBlur => Self::BoxBlur,
            KindConfig::HazeMix => Self::HazeMix,
        }
    }
}

impl KindConfig {
    pub fn name(self) -> &'static str {
        CorruptionKind::from(self).name()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::GaussianNoise, Self::BrightnessShift, Self::BoxBlur, Self::HazeMix].into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub kind: KindConfig,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for NetSettings {
    fn default() -> Self {
        let c = NetConfig::default();
        Self { widths: c.widths, blocks_per_stage: c.blocks_per_stage }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSettings {
    pub train_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub stats_batch_size: usize,
}

impl Default for SourceSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { train_size: 1200, epochs: t.epochs, lr: t.lr, batch_size: t.batch_size, stats_batch_size: 64 }
    }
}

/// Seeds derived from one base seed. Every random stream of a run is
/// listed here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub base: u64,
    /// Network initialization and training shuffles.
    pub model: u64,
    /// Clean source images.
    pub train_data: u64,
    /// Clean base of the target set.
    pub test_data: u64,
    /// Corruption noise.
    pub corruption: u64,
    /// Adaptation (reactivation draws, adapter initialization).
    pub adapt: u64,
}

impl SeedPlan {
    pub fn new(base: u64) -> Self {
        Self {
            base,
            model: base,
            train_data: base,
            test_data: base.wrapping_add(1000),
            corruption: base.wrapping_add(2000),
            adapt: base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub seed: u64,
    pub num_seeds: usize,
    pub net: NetSettings,
    pub source: SourceSettings,
    pub hyper: HyperConfig,
    pub switches: SwitchConfig,
    /// Per-stage buffer enable; empty enables every stage.
    pub stage_enable: Vec<bool>,
    pub discrepancy: DiscrepancySettings,
    pub mask_mode: MaskModeConfig,
    pub corruption: CorruptionConfig,
    pub steps: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_size: usize,
    /// Sweep grid.
    pub kinds: Vec<KindConfig>,
    pub severities: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            seed: 0,
            num_seeds: 1,
            net: NetSettings::default(),
            source: SourceSettings::default(),
            hyper: HyperConfig::default(),
            switches: SwitchConfig::default(),
            stage_enable: Vec::new(),
            discrepancy: DiscrepancySettings::default(),
            mask_mode: MaskModeConfig::Ste,
            corruption: CorruptionConfig { kind: KindConfig::HazeMix, severity: 0.7 },
            steps: 300,
            eval_every: 100,
            eval_size: 400,
            kinds: vec![KindConfig::HazeMix],
            severities: vec![0.3, 0.5, 0.8],
        }
    }
}

fn severity_ok(s: f64) -> bool {
    (0.0..=1.0).contains(&s)
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> RunResult<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| RunError::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Seeds `seed, seed + 1, ...` of a multi-seed run.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig { widths: self.net.widths.clone(), blocks_per_stage: self.net.blocks_per_stage, ..NetConfig::default() }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.source.epochs, lr: self.source.lr, batch_size: self.source.batch_size, seed }
    }

    pub fn adapt_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig {
            hyper: self.hyper.into(),
            switches: self.switches.into(),
            stage_enable: self.stage_enable.clone(),
            discrepancy: self.discrepancy.into(),
            mask_mode: match self.mask_mode {
                MaskModeConfig::Ste => MaskMode::Ste,
                MaskModeConfig::Frozen => MaskMode::Frozen,
            },
            seed,
        }
    }

    pub fn validate(&self) -> RunResult<()> {
        let err = |m: String| Err(RunError::Config(m));
        if self.schema != CONFIG_SCHEMA {
            return err(format!("unknown config schema {:?}", self.schema));
        }
        if self.num_seeds == 0 {
            return err("num_seeds must be at least 1".into());
        }
        if self.net.widths.is_empty() || self.net.widths.contains(&0) || self.net.blocks_per_stage == 0 {
            return err("network needs nonzero widths and at least one block per stage".into());
        }
        if !(self.source.lr.is_finite() && self.source.lr >= 0.0) || self.source.batch_size == 0 || self.source.stats_batch_size == 0 {
            return err("source training needs a finite lr and nonzero batch sizes".into());
        }
        if self.source.train_size == 0 || self.eval_size == 0 {
            return err("train_size and eval_size must be positive".into());
        }
        if !severity_ok(self.corruption.severity) || !self.severities.iter().all(|&s| severity_ok(s)) {
            return err("severities must lie in [0, 1]".into());
        }
        if self.eval_size < self.hyper.batch_size {
            return err(format!("eval_size {} is smaller than one batch of {}", self.eval_size, self.hyper.batch_size));
        }
        self.adapt_config(0).validate().map_err(RunError::from)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
