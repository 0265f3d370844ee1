//! Structured configuration.
//!
//! A pipeline run is described by one TOML file (see `configs/toy.toml` in the
//! repository root). Every section has defaults, so an empty file is a valid
//! desk-scale configuration. `HELLO_SEED` in the environment replaces
//! `hyper.seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::ElementWidth;
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "HELLO_SEED";

/// Representation used for soft labels: the ensemble average, the transfer
/// MSE target and the online labels all live in the same space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of the hard-label term when fitting the projector.
    pub lambda_ce: f64,
    /// Weight of the hard-label term when training the student.
    pub beta_ce: f64,
    /// Student learning rate.
    pub alpha_lr: f64,
    /// Downstream epochs.
    pub epochs_k: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_ce: 0.1,
            beta_ce: 0.1,
            alpha_lr: 0.02,
            epochs_k: 300,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda_ce, self.beta_ce, self.alpha_lr].iter().all(|v| v.is_finite());
        check(finite, "hyper-parameters must be finite")?;
        check(self.lambda_ce >= 0.0, "lambda_ce must be non-negative")?;
        check(self.beta_ce >= 0.0, "beta_ce must be non-negative")?;
        check(self.alpha_lr > 0.0, "alpha_lr must be positive")?;
        check(self.epochs_k >= 1, "epochs_k must be at least 1")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `toy` generates the procedural texture dataset; `archive` reads
    /// `train_path` / `test_path`.
    pub source: String,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub label_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "toy".into(),
            train_path: None,
            test_path: None,
            classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            image_size: 32,
            label_noise: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `toy` builds the seeded toy encoder pair; anything else is a path to
    /// an encoder archive.
    pub source: String,
    pub arch: String,
    pub embed_dim: usize,
    pub text_vocab: usize,
    /// Prompt templates with a single `{}` placeholder; empty selects the
    /// built-in list.
    pub templates: Vec<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            source: "toy".into(),
            arch: "toy-encoder".into(),
            embed_dim: 64,
            text_vocab: 512,
            templates: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub arch: String,
    pub total_epochs: usize,
    pub save_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Inclusive epoch window the ensemble is drawn from.
    pub window: (usize, usize),
    pub count: usize,
    pub space: OutputSpace,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            arch: "convnet-s".into(),
            total_epochs: 18,
            save_every: 1,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            window: (1, 9),
            count: 9,
            space: OutputSpace::Probabilities,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub rank_encoder: usize,
    pub rank_head: usize,
    /// Regular expression over encoder parameter names (`conv1/weight`, ...)
    /// selecting the weights that receive adapters.
    pub layer_filter: String,
    pub lora_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine: bool,
    pub temperature: f64,
    pub holdout_fraction: f64,
    pub patience: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            rank_encoder: 8,
            rank_head: 8,
            layer_filter: r"^conv\d+/weight$".into(),
            lora_scale: 1.0,
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
            cosine: true,
            temperature: 0.05,
            holdout_fraction: 0.05,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub ipc: usize,
    /// Patch grid side; 0 picks 1 for IPC 1 and 2 otherwise.
    pub grid: usize,
    pub crops_per_image: usize,
    pub crop_min: f64,
    pub crop_max: f64,
    /// Source images drawn per class for the candidate pool (0 = all).
    pub sources_per_class: usize,
    /// `projector`, or `teacher:<epoch>` to score patches with a checkpoint.
    pub observer: String,
    pub image_update: bool,
    pub update_steps: usize,
    pub update_lr: f64,
    pub degrade_factor: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            grid: 0,
            crops_per_image: 16,
            crop_min: 0.3,
            crop_max: 1.0,
            sources_per_class: 50,
            observer: "projector".into(),
            image_update: false,
            update_steps: 20,
            update_lr: 0.01,
            degrade_factor: 2,
        }
    }
}

impl SynthesisConfig {
    pub fn grid_side(&self) -> usize {
        match self.grid {
            0 if self.ipc <= 1 => 1,
            0 => 2,
            g => g,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelArm {
    /// MSE to online projector labels plus `beta` x hard-label CE.
    #[default]
    Online,
    /// Hard-label CE only (weight 1), the baseline arm.
    HardOnly,
    /// MSE to one-hot labels, no CE.
    OneHotMse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardTargetMode {
    #[default]
    Mixed,
    Unmixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mixup_prob: f64,
    pub cutmix_prob: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub flip: bool,
    /// Random translation by up to this many pixels (zero padded).
    pub shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_prob: 0.5,
            cutmix_prob: 0.5,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            flip: true,
            shift: 4,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            mixup_prob: 0.0,
            cutmix_prob: 0.0,
            flip: false,
            shift: 0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub arch: String,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arm: LabelArm,
    /// Representation the student matches the projector in: raw logits
    /// (network outputs, as written) or probabilities.
    pub label_space: OutputSpace,
    pub hard_targets: HardTargetMode,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub augment: AugmentConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            arch: "convnet-s".into(),
            batch_size: 50,
            momentum: 0.9,
            weight_decay: 5e-4,
            arm: LabelArm::Online,
            label_space: OutputSpace::Logits,
            hard_targets: HardTargetMode::Mixed,
            eval_every: 10,
            seeds: vec![0, 1, 2],
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub element_width: ElementWidth,
    pub hyper: HyperParams,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub teachers: TeacherConfig,
    pub transfer: TransferSection,
    pub synthesis: SynthesisConfig,
    pub downstream: DownstreamConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/toy"),
            element_width: ElementWidth::Four,
            hyper: HyperParams::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            teachers: TeacherConfig::default(),
            transfer: TransferSection::default(),
            synthesis: SynthesisConfig::default(),
            downstream: DownstreamConfig::default(),
        }
    }
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads the file, then applies the `HELLO_SEED` override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.hyper.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let d = &self.data;
        check(d.source == "toy" || d.source == "archive", "data.source must be `toy` or `archive`")?;
        if d.source == "archive" {
            check(d.train_path.is_some() && d.test_path.is_some(), "archive data needs train_path and test_path")?;
        } else {
            check(d.classes >= 2 && d.classes <= crate::data::TOY_CLASS_NAMES.len(), "toy data supports 2..=10 classes")?;
            check(d.train_per_class >= 1 && d.test_per_class >= 1, "per-class counts must be positive")?;
            check(d.image_size >= 8, "image_size must be at least 8")?;
            check((0.0..1.0).contains(&d.label_noise), "label_noise must be in [0, 1)")?;
        }
        check(self.encoder.embed_dim >= 2, "encoder.embed_dim must be at least 2")?;
        check(self.encoder.text_vocab >= 1, "encoder.text_vocab must be positive")?;
        let t = &self.teachers;
        check(t.total_epochs >= 1 && t.save_every >= 1, "teacher epochs and save_every must be positive")?;
        check(t.count >= 1, "teachers.count must be positive")?;
        check(t.window.0 >= 1 && t.window.0 <= t.window.1, "teachers.window must satisfy 1 <= lo <= hi")?;
        check(t.lr > 0.0 && t.batch_size >= 1, "teacher lr and batch size must be positive")?;
        let x = &self.transfer;
        check(x.rank_encoder >= 1 && x.rank_head >= 1, "ranks must be positive")?;
        check(x.lora_scale > 0.0 && x.lora_scale.is_finite(), "lora_scale must be positive")?;
        check(x.temperature > 0.0 && x.temperature.is_finite(), "transfer.temperature must be positive")?;
        check(x.lr > 0.0 && x.batch_size >= 1, "transfer lr and batch size must be positive")?;
        check((0.0..0.5).contains(&x.holdout_fraction), "holdout_fraction must be in [0, 0.5)")?;
        regex::Regex::new(&x.layer_filter).map_err(|e| Error::Config(format!("transfer.layer_filter: {e}")))?;
        let s = &self.synthesis;
        check(s.ipc >= 1, "synthesis.ipc must be positive")?;
        check(s.crops_per_image >= 1, "crops_per_image must be positive")?;
        check(0.0 < s.crop_min && s.crop_min <= s.crop_max && s.crop_max <= 1.0, "crop fractions must satisfy 0 < min <= max <= 1")?;
        check(s.degrade_factor >= 2, "degrade_factor must be at least 2")?;
        check(s.observer == "projector" || s.observer.starts_with("teacher:"), "observer must be `projector` or `teacher:<epoch>`")?;
        let ds = &self.downstream;
        check(ds.batch_size >= 1, "downstream.batch_size must be positive")?;
        check(!ds.seeds.is_empty(), "downstream.seeds must not be empty")?;
        check(ds.eval_every >= 1, "downstream.eval_every must be positive")?;
        let a = &ds.augment;
        check(
            (0.0..=1.0).contains(&a.mixup_prob) && (0.0..=1.0).contains(&a.cutmix_prob) && a.mixup_prob + a.cutmix_prob <= 1.0,
            "augmentation probabilities must be in [0, 1] and sum to at most 1",
        )?;
        check(a.mixup_alpha > 0.0 && a.cutmix_alpha > 0.0, "mixing alphas must be positive")?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`; the first
    /// 16 hex digits identify every artifact produced under this config.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = PathBuf::new();
        let json = serde_json::to_string(&copy).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.transfer.rank_head = 5;
        cfg.downstream.arm = LabelArm::HardOnly;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml_str("[transfer]\nrank_enc = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = PipelineConfig::default();
        cfg.hyper.epochs_k = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.hyper.alpha_lr = f64::NAN;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.transfer.layer_filter = "(".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.hyper.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn grid_side_rule() {
        let mut s = SynthesisConfig::default();
        s.ipc = 1;
        assert_eq!(s.grid_side(), 1);
        s.ipc = 10;
        assert_eq!(s.grid_side(), 2);
        s.grid = 3;
        assert_eq!(s.grid_side(), 3);
    }
}
