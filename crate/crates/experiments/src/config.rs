//! Declarative experiment configuration.
//!
//! Configurations are TOML documents; every field has a default, so an empty
//! file is a valid configuration. Individual keys can be overridden with
//! dotted paths (`train.epochs=10`, `optimizer.lr0="auto"`).

use serde::{Deserialize, Serialize};
use stochnorm::noise::NoiseConfig;
use stochnorm::variational::{Granularity, PriorConfig};
use stochnorm::{Architecture, ConvSpec, NoiseMode, NormKind, Precision};

use crate::error::{ExpError, ExpResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            optimizer: OptimizerSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Class prototypes (several clusters per class) plus i.i.d. pixel noise.
    #[default]
    GaussianClusters,
    /// Class prototypes plus noise shared across neighbouring pixels and a
    /// per-image offset.
    CorrelatedSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Total number of samples before the train/validation split.
    pub samples: usize,
    pub val_fraction: f64,
    pub clusters_per_class: usize,
    /// Prototype amplitude relative to the unit pixel noise.
    pub separation: f64,
    pub label_noise: f64,
    /// Random ±2-pixel shifts and horizontal flips of training batches.
    pub augment: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::GaussianClusters,
            image_size: 8,
            channels: 1,
            classes: 4,
            samples: 569,
            val_fraction: 0.1,
            clusters_per_class: 3,
            separation: 1.0,
            label_noise: 0.1,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// The nine-layer all-convolutional pattern, widths divided by
    /// `width_divisor`.
    #[default]
    AllCnn,
    /// The layer list in `model.layers`.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSetting {
    #[default]
    None,
    /// Gaussian `(V, U)` with per-layer deviations.
    FixedGaussian,
    /// `(V, U)` drawn from the batch-statistics model.
    ExactChi,
    /// Learned posterior over the post-normalization scales.
    Variational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub width_divisor: usize,
    pub layers: Vec<ConvSpec>,
    pub norm: NormKind,
    pub noise: NoiseSetting,
    /// Per-layer σ_U of the Gaussian noise; empty means the measured profile.
    pub sigma_u: Vec<f64>,
    /// Per-layer σ_V; empty means `√2·σ_U`.
    pub sigma_v: Vec<f64>,
    pub spatial_correlated: bool,
    pub granularity: Granularity,
    /// Initial posterior deviation `σ(u)` of variational scales.
    pub init_sigma: f64,
    pub eps: f64,
    pub bn_momentum: f64,
    pub precision: PrecisionSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionSetting {
    #[default]
    F64,
    F32,
}

impl From<PrecisionSetting> for Precision {
    fn from(p: PrecisionSetting) -> Self {
        match p {
            PrecisionSetting::F64 => Precision::F64,
            PrecisionSetting::F32 => Precision::F32,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::AllCnn,
            width_divisor: 8,
            layers: vec![],
            norm: NormKind::Batch,
            noise: NoiseSetting::None,
            sigma_u: vec![],
            sigma_v: vec![],
            spatial_correlated: true,
            granularity: Granularity::PerChannel,
            init_sigma: stochnorm::variational::INITIAL_SIGMA,
            eps: stochnorm::norm::DEFAULT_EPS,
            bn_momentum: stochnorm::norm::DEFAULT_MOMENTUM,
            precision: PrecisionSetting::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples contributing to batch statistics per step; 0 means
    /// `batch_size`. Extra samples enter only the statistics, not the loss.
    pub norm_batch_size: usize,
    /// Batch for data-dependent initialization of non-BN networks; 0
    /// disables it.
    pub init_batch_size: usize,
    pub mc_eval_samples: usize,
    pub kl_factor: f64,
    pub prior_sigma0: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            norm_batch_size: 0,
            init_batch_size: 128,
            mc_eval_samples: 10,
            kl_factor: 1.0,
            prior_sigma0: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn effective_norm_batch(&self) -> usize {
        if self.norm_batch_size == 0 {
            self.batch_size
        } else {
            self.norm_batch_size
        }
    }
}

/// `lr0 = "auto"` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSetting {
    Fixed(f64),
    Auto(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoKeyword {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: stochnorm::optim::OptimizerKind,
    pub lr0: LrSetting,
    pub momentum: f64,
    /// Epochs after which the learning rate has decayed to a tenth.
    pub gamma_epochs_to_tenth: f64,
    pub project: bool,
    pub search_epochs: usize,
    pub search_lo: f64,
    pub search_hi: f64,
    pub search_points: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: stochnorm::optim::OptimizerKind::SgdNesterov,
            lr0: LrSetting::Fixed(0.05),
            momentum: 0.9,
            gamma_epochs_to_tenth: 600.0,
            project: true,
            search_epochs: 5,
            search_lo: 1e-4,
            search_hi: 1.0,
            search_points: 9,
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document and applies `key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> ExpResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| ExpError::Config(format!("{e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> ExpResult<()> {
        let bad = |m: String| Err(ExpError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let d = &self.dataset;
        if d.classes < 2 || d.channels == 0 || d.image_size == 0 || d.clusters_per_class == 0 {
            return bad("dataset needs ≥ 2 classes and non-empty images".into());
        }
        if !(0.0..1.0).contains(&d.val_fraction) || !(0.0..=1.0).contains(&d.label_noise) {
            return bad("val_fraction must be in [0, 1) and label_noise in [0, 1]".into());
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return bad("batch_size must be ≥ 2".into());
        }
        if t.effective_norm_batch() < t.batch_size {
            return bad(format!(
                "norm_batch_size {} is smaller than batch_size {}",
                t.norm_batch_size, t.batch_size
            ));
        }
        if self.train_samples() < t.effective_norm_batch() {
            return bad(format!(
                "{} training samples cannot fill a normalization batch of {}",
                self.train_samples(),
                t.effective_norm_batch()
            ));
        }
        if !(self.model.init_sigma > 0.0) {
            return bad("model.init_sigma must be > 0".into());
        }
        if !(t.kl_factor >= 0.0) || !(t.prior_sigma0 > 0.0) {
            return bad("kl_factor must be ≥ 0 and prior_sigma0 > 0".into());
        }
        if let LrSetting::Fixed(lr) = self.optimizer.lr0 {
            if !(lr > 0.0) {
                return bad(format!("optimizer.lr0 must be > 0 or \"auto\", got {lr}"));
            }
        }
        let o = &self.optimizer;
        if !(o.gamma_epochs_to_tenth > 0.0)
            || o.search_points == 0
            || !(o.search_lo > 0.0 && o.search_hi >= o.search_lo)
        {
            return bad("invalid learning-rate schedule or search grid".into());
        }
        self.architecture()
            .validate()
            .map_err(|e| ExpError::Config(e.to_string()))?;
        self.optimizer_config(0.1)
            .validate()
            .map_err(|e| ExpError::Config(e.to_string()))?;
        self.noise_mode().map(|_| ())
    }

    pub fn val_samples(&self) -> usize {
        (self.dataset.samples as f64 * self.dataset.val_fraction).round() as usize
    }

    pub fn train_samples(&self) -> usize {
        self.dataset.samples - self.val_samples()
    }

    pub fn architecture(&self) -> Architecture {
        let d = &self.dataset;
        match self.model.arch {
            ArchKind::AllCnn => Architecture::all_cnn(
                d.channels,
                d.image_size,
                d.image_size,
                d.classes,
                self.model.width_divisor,
            ),
            ArchKind::Custom => Architecture {
                in_channels: d.channels,
                height: d.image_size,
                width: d.image_size,
                layers: self.model.layers.clone(),
            },
        }
    }

    pub fn noise_mode(&self) -> ExpResult<NoiseMode> {
        let m = &self.model;
        Ok(match m.noise {
            NoiseSetting::None => NoiseMode::None,
            NoiseSetting::Variational => NoiseMode::Variational {
                granularity: m.granularity,
            },
            NoiseSetting::ExactChi => {
                let mut cfg = NoiseConfig::exact_chi();
                cfg.spatial_correlated = m.spatial_correlated;
                NoiseMode::Injected(cfg)
            }
            NoiseSetting::FixedGaussian => {
                let mut cfg = NoiseConfig::measured_bn_profile();
                if !m.sigma_u.is_empty() {
                    cfg.sigma_u = m.sigma_u.clone();
                    cfg.sigma_v = m.sigma_u.iter().map(|s| s * std::f64::consts::SQRT_2).collect();
                }
                if !m.sigma_v.is_empty() {
                    cfg.sigma_v = m.sigma_v.clone();
                }
                cfg.spatial_correlated = m.spatial_correlated;
                cfg.validate().map_err(|e| ExpError::Config(e.to_string()))?;
                NoiseMode::Injected(cfg)
            }
        })
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig {
            s0: 1.0,
            sigma0: self.train.prior_sigma0,
            kl_factor: self.train.kl_factor,
        }
    }

    pub fn optimizer_config(&self, lr0: f64) -> stochnorm::optim::OptimizerConfig {
        let o = &self.optimizer;
        stochnorm::optim::OptimizerConfig {
            kind: o.kind,
            lr0,
            momentum: o.momentum,
            gamma: stochnorm::optim::gamma_for_tenth_after(o.gamma_epochs_to_tenth),
            project: o.project,
            ..Default::default()
        }
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. The value
/// is parsed as a TOML literal, falling back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> ExpResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ExpError::Config(format!("override `{spec}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ExpError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ExpError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
