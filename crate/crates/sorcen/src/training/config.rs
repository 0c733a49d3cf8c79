//! Training hyperparameters and the flat `key=value` config-file format.

use crate::error::{Result, SorcenError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Peak learning rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr_warmup_epochs: u64,
    pub grad_clip: f64,
    /// Half-cosine EMA momentum start; it anneals to 1.0 over training.
    pub ema_base: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = final step only).
    pub checkpoint_every: u64,
    pub mask_mean: f64,
    pub mask_std: f64,
    pub mask_min: f64,
    pub mask_max: f64,
    /// Element type for training: "f32" or "f64".
    pub precision: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1600,
            batch_size: 4096,
            base_lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            lr_warmup_epochs: 40,
            grad_clip: 3.0,
            ema_base: 0.996,
            seed: 0,
            checkpoint_every: 0,
            mask_mean: 0.55,
            mask_std: 0.25,
            mask_min: 0.5,
            mask_max: 1.0,
            precision: "f32".to_string(),
        }
    }
}

impl TrainConfig {
    /// Scale the warmup defaults pro-rata for a shorter run: 2.5% of epochs
    /// for the learning rate, matching the 40-of-1600 full-scale setting.
    pub fn desk(epochs: u64) -> Self {
        TrainConfig {
            epochs,
            lr_warmup_epochs: ((epochs as f64 * 0.025).round() as u64).max(1),
            ..TrainConfig::default()
        }
    }

    /// The echo warmup analog: 5% of total epochs, at least one.
    pub fn default_echo_warmup(epochs: u64) -> u64 {
        ((epochs as f64 * 0.05).round() as u64).max(1)
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SorcenError::invalid("epochs and batch_size must be positive"));
        }
        if self.lr_warmup_epochs > self.epochs {
            return Err(SorcenError::invalid(format!(
                "lr warmup ({} epochs) exceeds total epochs ({})",
                self.lr_warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SorcenError::invalid("optimizer betas must lie in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(SorcenError::invalid("grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_base) {
            return Err(SorcenError::invalid("ema_base must lie in [0, 1]"));
        }
        if self.mask_min < 0.0
            || self.mask_max > 1.0
            || self.mask_min > self.mask_max
            || self.mask_std < 0.0
        {
            return Err(SorcenError::invalid("mask ratio bounds must satisfy 0 <= min <= max <= 1"));
        }
        if self.precision != "f32" && self.precision != "f64" {
            return Err(SorcenError::invalid(format!(
                "precision must be f32 or f64, got {:?}",
                self.precision
            )));
        }
        Ok(())
    }

    /// Serialize as flat `key=value` lines (one per field, field order).
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("epochs={}\n", self.epochs));
        s.push_str(&format!("batch_size={}\n", self.batch_size));
        s.push_str(&format!("base_lr={}\n", self.base_lr));
        s.push_str(&format!("beta1={}\n", self.beta1));
        s.push_str(&format!("beta2={}\n", self.beta2));
        s.push_str(&format!("weight_decay={}\n", self.weight_decay));
        s.push_str(&format!("lr_warmup_epochs={}\n", self.lr_warmup_epochs));
        s.push_str(&format!("grad_clip={}\n", self.grad_clip));
        s.push_str(&format!("ema_base={}\n", self.ema_base));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("checkpoint_every={}\n", self.checkpoint_every));
        s.push_str(&format!("mask_mean={}\n", self.mask_mean));
        s.push_str(&format!("mask_std={}\n", self.mask_std));
        s.push_str(&format!("mask_min={}\n", self.mask_min));
        s.push_str(&format!("mask_max={}\n", self.mask_max));
        s.push_str(&format!("precision={}\n", self.precision));
        s
    }

    /// Apply one `key=value` setting. Unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                SorcenError::invalid(format!("bad value {value:?} for config key {key:?}"))
            })
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_warmup_epochs" => self.lr_warmup_epochs = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "ema_base" => self.ema_base = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "mask_mean" => self.mask_mean = num(key, value)?,
            "mask_std" => self.mask_std = num(key, value)?,
            "mask_min" => self.mask_min = num(key, value)?,
            "mask_max" => self.mask_max = num(key, value)?,
            "precision" => self.precision = value.to_string(),
            other => {
                return Err(SorcenError::invalid(format!("unknown train config key {other:?}")))
            }
        }
        Ok(())
    }
}

/// Parse flat `key=value` text: one pair per line, `#` comments, blank
/// lines ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SorcenError::invalid(format!(
                "config line {} is not key=value: {raw:?}",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = TrainConfig::desk(30);
        cfg.seed = 7;
        cfg.batch_size = 128;
        let text = cfg.to_kv();
        let mut parsed = TrainConfig::default();
        for (k, v) in parse_kv(&text).unwrap() {
            parsed.apply_kv(&k, &v).unwrap();
        }
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_kv("bogus", "1").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let pairs = parse_kv("# a comment\n\nseed = 5\n").unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "5".to_string())]);
    }

    #[test]
    fn peak_lr_scales_linearly_with_batch() {
        let mut cfg = TrainConfig::default();
        cfg.base_lr = 1.5e-4;
        cfg.batch_size = 256;
        assert!((cfg.peak_lr() - 1.5e-4).abs() < 1e-18);
        cfg.batch_size = 512;
        assert!((cfg.peak_lr() - 3.0e-4).abs() < 1e-18);
    }

    #[test]
    fn warmup_longer_than_run_rejected() {
        let mut cfg = TrainConfig::desk(10);
        cfg.lr_warmup_epochs = 11;
        assert!(cfg.validate().is_err());
    }
}
