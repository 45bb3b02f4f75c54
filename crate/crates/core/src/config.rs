//! Plain-text key-value configuration with dotted keys. Unknown keys
//! are hard errors. The resolved config can be echoed back as text and
//! is embedded verbatim in run records and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::augment::AugmentConfig;
use crate::backbone::AttentionMode;
use crate::data::SyntheticConfig;
use crate::error::{CoreError, Result};
use crate::model::{ForwardConfig, ModelDims};
use crate::objective::LossConfig;
use crate::position::ROPE_DEFAULT_BASE;
use crate::serial::{OrderKind, DEFAULT_BITS};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_dim: usize,
    pub model_attn_mode: AttentionMode,
    pub model_patches: usize,
    pub model_patch_size: usize,
    pub tokenizer_h1: usize,
    pub tokenizer_h2: usize,
    pub pe_center_additive: bool,
    pub pe_rope3d: bool,
    pub rope_base: f64,
    pub serial_bits: u32,
    pub serial_bank: Vec<OrderKind>,
    pub loss_shift: bool,
    pub loss_stopgrad: bool,
    pub aug_rotation: bool,
    pub aug_scale_translate: bool,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    pub aug_translate: f64,
    pub data_points: usize,
    pub data_train_per_class: usize,
    pub data_test_per_class: usize,
    pub data_noise: f64,
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_warmup_frac: f64,
    pub train_seed: u64,
    pub train_log_every: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for Config {
    /// Desk-scale preset: CPU-trainable while preserving every
    /// mechanism.
    fn default() -> Self {
        Self {
            model_layers: 4,
            model_heads: 4,
            model_dim: 64,
            model_attn_mode: AttentionMode::Causal,
            model_patches: 32,
            model_patch_size: 16,
            tokenizer_h1: 64,
            tokenizer_h2: 128,
            pe_center_additive: true,
            pe_rope3d: true,
            rope_base: ROPE_DEFAULT_BASE,
            serial_bits: DEFAULT_BITS,
            serial_bank: vec![OrderKind::Hilbert, OrderKind::HilbertTrans],
            loss_shift: true,
            loss_stopgrad: true,
            aug_rotation: true,
            aug_scale_translate: false,
            aug_scale_lo: 0.8,
            aug_scale_hi: 1.2,
            aug_translate: 0.2,
            data_points: 512,
            data_train_per_class: 200,
            data_test_per_class: 50,
            data_noise: 0.0,
            train_steps: 500,
            train_batch: 8,
            train_lr: 1e-3,
            train_weight_decay: 0.05,
            train_warmup_frac: 0.1,
            train_seed: 0,
            train_log_every: 10,
            probe_epochs: 200,
            probe_lr: 0.1,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(CoreError::Config(format!("{key}: cannot parse '{v}' as bool"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::Config(format!("{key}: cannot parse '{v}' as a number")))
}

impl Config {
    /// Apply one dotted key. Unknown keys are errors, not warnings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.preset" => match v {
                "desk" => {
                    let d = Config::default();
                    self.model_layers = d.model_layers;
                    self.model_heads = d.model_heads;
                    self.model_dim = d.model_dim;
                    self.tokenizer_h1 = d.tokenizer_h1;
                    self.tokenizer_h2 = d.tokenizer_h2;
                }
                "full" => {
                    let d = ModelDims::full();
                    self.model_layers = d.layers;
                    self.model_heads = d.heads;
                    self.model_dim = d.dim;
                    self.tokenizer_h1 = d.tok_h1;
                    self.tokenizer_h2 = d.tok_h2;
                }
                _ => {
                    return Err(CoreError::Config(format!(
                        "model.preset: unknown preset '{v}' (desk, full)"
                    )))
                }
            },
            "model.layers" => self.model_layers = parse_num(key, v)?,
            "model.heads" => self.model_heads = parse_num(key, v)?,
            "model.dim" => self.model_dim = parse_num(key, v)?,
            "model.attn_mode" => self.model_attn_mode = AttentionMode::parse(v)?,
            "model.patches" => self.model_patches = parse_num(key, v)?,
            "model.patch_size" => self.model_patch_size = parse_num(key, v)?,
            "tokenizer.h1" => self.tokenizer_h1 = parse_num(key, v)?,
            "tokenizer.h2" => self.tokenizer_h2 = parse_num(key, v)?,
            "pe.center_additive" => self.pe_center_additive = parse_bool(key, v)?,
            "pe.rope3d" => self.pe_rope3d = parse_bool(key, v)?,
            "rope.base" => self.rope_base = parse_num(key, v)?,
            "serial.bits" => self.serial_bits = parse_num(key, v)?,
            "serial.bank" => {
                let bank: Result<Vec<OrderKind>> =
                    v.split(',').map(|s| OrderKind::parse(s.trim())).collect();
                let bank = bank?;
                if bank.is_empty() {
                    return Err(CoreError::Config("serial.bank: empty bank".into()));
                }
                self.serial_bank = bank;
            }
            "loss.shift" => self.loss_shift = parse_bool(key, v)?,
            "loss.stopgrad" => self.loss_stopgrad = parse_bool(key, v)?,
            "aug.rotation" => self.aug_rotation = parse_bool(key, v)?,
            "aug.scale_translate" => self.aug_scale_translate = parse_bool(key, v)?,
            "aug.scale_lo" => self.aug_scale_lo = parse_num(key, v)?,
            "aug.scale_hi" => self.aug_scale_hi = parse_num(key, v)?,
            "aug.translate" => self.aug_translate = parse_num(key, v)?,
            "data.points" => self.data_points = parse_num(key, v)?,
            "data.train_per_class" => self.data_train_per_class = parse_num(key, v)?,
            "data.test_per_class" => self.data_test_per_class = parse_num(key, v)?,
            "data.noise" => self.data_noise = parse_num(key, v)?,
            "train.steps" => self.train_steps = parse_num(key, v)?,
            "train.batch" => self.train_batch = parse_num(key, v)?,
            "train.lr" => self.train_lr = parse_num(key, v)?,
            "train.weight_decay" => self.train_weight_decay = parse_num(key, v)?,
            "train.warmup_frac" => self.train_warmup_frac = parse_num(key, v)?,
            "train.seed" => self.train_seed = parse_num(key, v)?,
            "train.log_every" => self.train_log_every = parse_num(key, v)?,
            "probe.epochs" => self.probe_epochs = parse_num(key, v)?,
            "probe.lr" => self.probe_lr = parse_num(key, v)?,
            _ => return Err(CoreError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; '#' comments and blanks skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CoreError::Parse {
                line: lineno + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(key.trim(), value).map_err(|e| CoreError::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Fully resolved echo of every key, one per line, sorted.
    pub fn to_text(&self) -> String {
        let bank: Vec<&str> = self.serial_bank.iter().map(|o| o.name()).collect();
        let mut pairs: Vec<(String, String)> = vec![
            ("model.layers".into(), self.model_layers.to_string()),
            ("model.heads".into(), self.model_heads.to_string()),
            ("model.dim".into(), self.model_dim.to_string()),
            ("model.attn_mode".into(), self.model_attn_mode.name().into()),
            ("model.patches".into(), self.model_patches.to_string()),
            ("model.patch_size".into(), self.model_patch_size.to_string()),
            ("tokenizer.h1".into(), self.tokenizer_h1.to_string()),
            ("tokenizer.h2".into(), self.tokenizer_h2.to_string()),
            ("pe.center_additive".into(), self.pe_center_additive.to_string()),
            ("pe.rope3d".into(), self.pe_rope3d.to_string()),
            ("rope.base".into(), self.rope_base.to_string()),
            ("serial.bits".into(), self.serial_bits.to_string()),
            ("serial.bank".into(), bank.join(",")),
            ("loss.shift".into(), self.loss_shift.to_string()),
            ("loss.stopgrad".into(), self.loss_stopgrad.to_string()),
            ("aug.rotation".into(), self.aug_rotation.to_string()),
            ("aug.scale_translate".into(), self.aug_scale_translate.to_string()),
            ("aug.scale_lo".into(), self.aug_scale_lo.to_string()),
            ("aug.scale_hi".into(), self.aug_scale_hi.to_string()),
            ("aug.translate".into(), self.aug_translate.to_string()),
            ("data.points".into(), self.data_points.to_string()),
            ("data.train_per_class".into(), self.data_train_per_class.to_string()),
            ("data.test_per_class".into(), self.data_test_per_class.to_string()),
            ("data.noise".into(), self.data_noise.to_string()),
            ("train.steps".into(), self.train_steps.to_string()),
            ("train.batch".into(), self.train_batch.to_string()),
            ("train.lr".into(), self.train_lr.to_string()),
            ("train.weight_decay".into(), self.train_weight_decay.to_string()),
            ("train.warmup_frac".into(), self.train_warmup_frac.to_string()),
            ("train.seed".into(), self.train_seed.to_string()),
            ("train.log_every".into(), self.train_log_every.to_string()),
            ("probe.epochs".into(), self.probe_epochs.to_string()),
            ("probe.lr".into(), self.probe_lr.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Reconstruct from a resolved echo (checkpoint snapshots).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            dim: self.model_dim,
            layers: self.model_layers,
            heads: self.model_heads,
            tok_h1: self.tokenizer_h1,
            tok_h2: self.tokenizer_h2,
            bank: self.serial_bank.clone(),
        }
    }

    pub fn forward(&self) -> ForwardConfig {
        ForwardConfig {
            center_additive_pe: self.pe_center_additive,
            rope3d: self.pe_rope3d,
            mode: self.model_attn_mode,
            rope_base: self.rope_base,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            shift_enabled: self.loss_shift,
            stopgrad_enabled: self.loss_stopgrad,
            ..LossConfig::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            rotation: self.aug_rotation,
            scale_translate: self.aug_scale_translate,
            scale_range: (self.aug_scale_lo, self.aug_scale_hi),
            translate_range: self.aug_translate,
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            train_per_class: self.data_train_per_class,
            test_per_class: self.data_test_per_class,
            points_per_cloud: self.data_points,
            noise_sigma: self.data_noise,
        }
    }
}
