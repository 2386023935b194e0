//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error so a
//! typo cannot silently fall back to a default.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{DataConfig, SceneSpec};
use crate::depthnet::ModelConfig;
use crate::error::{Error, Result};
use crate::grad::OptimConfig;
use crate::losses::DEFAULT_LAMBDA;

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Seeds initialisation, shuffling and training-time sparse sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Stage 2 minimises prediction + completion loss; otherwise completion only.
    pub joint: bool,
    pub freeze_pred_encoder: bool,
    pub freeze_pred_decoder: bool,
    /// Restart the learning-rate schedule at the stage boundary.
    pub reset_lr_decay: bool,
    pub lambda: f64,
    /// Samples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub train_sparsity_min: f64,
    pub train_sparsity_max: f64,
    /// Input density used for the per-epoch completion validation column.
    pub val_sparsity: f64,
    pub eval_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig { lr_decay_every: 10, ..OptimConfig::default() },
            stage1_epochs: 15,
            stage2_epochs: 10,
            joint: true,
            freeze_pred_encoder: true,
            freeze_pred_decoder: false,
            reset_lr_decay: false,
            lambda: DEFAULT_LAMBDA,
            batch_size: 4,
            train_sparsity_min: 0.05,
            train_sparsity_max: 0.5,
            val_sparsity: 0.2,
            eval_cap: 80.0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects true/false, got {value:?}"))),
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.data.scene.validate(self.model.scales(), self.model.d_min, self.model.d_max)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let (lo, hi) = (self.train_sparsity_min, self.train_sparsity_max);
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("training sparsity range [{lo}, {hi}] must satisfy 0 < min <= max <= 1")));
        }
        if !(0.0..=1.0).contains(&self.val_sparsity) || !(self.eval_cap > 0.0) {
            return Err(Error::Config("val_sparsity must lie in [0, 1] and eval_cap be positive".into()));
        }
        Ok(())
    }

    /// Sets one key. Seeds given as `seed` apply to both training and data.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.data.scene;
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
                self.data.seed = self.seed;
            }
            "train_seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data.seed = parse(key, v)?,
            "train_frames" => self.data.train_frames = parse(key, v)?,
            "val_frames" => self.data.val_frames = parse(key, v)?,
            "width" => s.width = parse(key, v)?,
            "height" => s.height = parse(key, v)?,
            "min_objects" => s.min_objects = parse(key, v)?,
            "max_objects" => s.max_objects = parse(key, v)?,
            "min_depth" => s.min_depth = parse(key, v)?,
            "max_depth" => s.max_depth = parse(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            "invalid_fraction" => s.invalid_fraction = parse(key, v)?,
            "widths" => {
                self.model.widths = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?;
            }
            "d_min" => self.model.d_min = parse(key, v)?,
            "d_max" => self.model.d_max = parse(key, v)?,
            "init_depth" => self.model.init_depth = parse(key, v)?,
            "srb_branches" => self.model.srb_branches = parse(key, v)?,
            "use_wb" => self.model.use_wb = parse_bool(key, v)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, v)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, v)?,
            "joint" => self.joint = parse_bool(key, v)?,
            "freeze_pred_encoder" => self.freeze_pred_encoder = parse_bool(key, v)?,
            "freeze_pred_decoder" => self.freeze_pred_decoder = parse_bool(key, v)?,
            "reset_lr_decay" => self.reset_lr_decay = parse_bool(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "adam_eps" => self.optim.eps = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "lr_decay_factor" => self.optim.lr_decay_factor = parse(key, v)?,
            "lr_decay_every" => self.optim.lr_decay_every = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_sparsity_min" => self.train_sparsity_min = parse(key, v)?,
            "train_sparsity_max" => self.train_sparsity_max = parse(key, v)?,
            "val_sparsity" => self.val_sparsity = parse(key, v)?,
            "eval_cap" => self.eval_cap = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Canonical `key = value` rendering; [`from_text`](Self::from_text) inverts it.
    pub fn to_text(&self) -> String {
        let s = &self.data.scene;
        let widths: Vec<String> = self.model.widths.iter().map(|w| w.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("train_seed", self.seed.to_string()),
            ("data_seed", self.data.seed.to_string()),
            ("train_frames", self.data.train_frames.to_string()),
            ("val_frames", self.data.val_frames.to_string()),
            ("width", s.width.to_string()),
            ("height", s.height.to_string()),
            ("min_objects", s.min_objects.to_string()),
            ("max_objects", s.max_objects.to_string()),
            ("min_depth", s.min_depth.to_string()),
            ("max_depth", s.max_depth.to_string()),
            ("noise", s.noise.to_string()),
            ("invalid_fraction", s.invalid_fraction.to_string()),
            ("widths", widths.join(",")),
            ("d_min", self.model.d_min.to_string()),
            ("d_max", self.model.d_max.to_string()),
            ("init_depth", self.model.init_depth.to_string()),
            ("srb_branches", self.model.srb_branches.to_string()),
            ("use_wb", self.model.use_wb.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("joint", self.joint.to_string()),
            ("freeze_pred_encoder", self.freeze_pred_encoder.to_string()),
            ("freeze_pred_decoder", self.freeze_pred_decoder.to_string()),
            ("reset_lr_decay", self.reset_lr_decay.to_string()),
            ("lr", self.optim.lr.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("adam_eps", self.optim.eps.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("lr_decay_factor", self.optim.lr_decay_factor.to_string()),
            ("lr_decay_every", self.optim.lr_decay_every.to_string()),
            ("lambda", self.lambda.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_sparsity_min", self.train_sparsity_min.to_string()),
            ("train_sparsity_max", self.train_sparsity_max.to_string()),
            ("val_sparsity", self.val_sparsity.to_string()),
            ("eval_cap", self.eval_cap.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").expect("write to String");
        }
        out
    }

    /// Reduced benchmark used by the test suites: 32x32 frames, half-width
    /// network, fewer frames; the two-stage schedule is unchanged.
    pub fn compact() -> Self {
        let mut cfg = TrainConfig::default();
        cfg.data.scene = SceneSpec { width: 32, height: 32, ..SceneSpec::default() };
        cfg.data.train_frames = 128;
        cfg.data.val_frames = 32;
        cfg.model.widths = vec![8, 16, 32, 64];
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.stage1_epochs, c.stage2_epochs, c.batch_size), (15, 10, 4));
        assert_eq!(c.optim.lr_decay_every, 10);
        assert_eq!(c.lambda, 0.85);
        TrainConfig::compact().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::compact();
        c.seed = 42;
        c.model.use_wb = false;
        c.optim.lr = 3.5e-4;
        c.train_sparsity_min = 0.1;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::from_text("# header\nseed = 7  # trailing\n\nwidths = 4, 8\n").unwrap();
        assert_eq!((c.seed, c.data.seed), (7, 7));
        assert_eq!(c.model.widths, vec![4, 8]);
        assert!(TrainConfig::from_text("bogus = 1").unwrap_err().is_config());
        assert!(TrainConfig::from_text("seed").unwrap_err().is_config());
        assert!(TrainConfig::from_text("joint = maybe").unwrap_err().is_config());
        assert!(TrainConfig::from_text("lr = fast").unwrap_err().is_config());
    }

    #[test]
    fn validation_rejects_bad_values() {
        for text in ["lambda = 1.5", "batch_size = 0", "width = 60", "train_sparsity_min = 0", "srb_branches = 4", "beta2 = 1"] {
            assert!(TrainConfig::from_text(text).unwrap().validate().is_err(), "{text}");
        }
    }
}
