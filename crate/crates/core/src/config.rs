//! Run configuration: a flat, line-oriented `key = value` format with `#`
//! comments. Parsing is strict — unknown or duplicate keys are rejected — and
//! serialization is canonical, so a config hash identifies a setup exactly.

use sha2::{Digest, Sha256};

use crate::error::TensorError;
use crate::weavenet::{Arch, StackDims};

/// How the noise strength σ is drawn per training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaDist {
    /// Uniform on [0, 1].
    Uniform,
    /// Sigmoid of a standard normal, concentrating mid-path strengths.
    LogitNormal,
}

impl SigmaDist {
    fn name(self) -> &'static str {
        match self {
            SigmaDist::Uniform => "uniform",
            SigmaDist::LogitNormal => "logit_normal",
        }
    }

    fn parse(s: &str) -> Result<Self, TensorError> {
        match s {
            "uniform" => Ok(SigmaDist::Uniform),
            "logit_normal" => Ok(SigmaDist::LogitNormal),
            other => Err(TensorError::invalid(
                "config",
                format!("unknown sigma_dist {other:?} (uniform | logit_normal)"),
            )),
        }
    }
}

/// Everything a run needs: architecture dims, data dims, optimizer settings,
/// and sampler defaults. Field order here is the canonical file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub arch: Arch,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub base_layers: usize,
    pub ctrl_layers: usize,
    pub n_experts: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub n_cond_types: usize,
    pub cond_scale: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub sigma_dist: SigmaDist,
    pub prompt_dropout: f64,
    pub zero_condition: bool,
    pub guidance: f64,
    pub sample_steps: usize,
    pub val_per_type: usize,
    pub val_interval: usize,
    pub log_interval: usize,
}

impl Default for Config {
    /// The desk-scale setup: d=64, 4 backbone + 4 control layers, 6 experts,
    /// 16×16 images, batch 8, 2000 steps.
    fn default() -> Self {
        Config {
            arch: Arch::Weave,
            image_size: 16,
            patch_size: 2,
            d_model: 64,
            n_heads: 1,
            base_layers: 4,
            ctrl_layers: 4,
            n_experts: 6,
            ffn_mult: 4,
            vocab_size: 64,
            n_cond_types: 8,
            cond_scale: 1.0,
            lr: 1e-4,
            warmup_steps: 500,
            total_steps: 2000,
            batch_size: 8,
            weight_decay: 0.0,
            seed: 1872,
            sigma_dist: SigmaDist::Uniform,
            prompt_dropout: 0.1,
            zero_condition: false,
            guidance: 3.5,
            sample_steps: 28,
            val_per_type: 4,
            val_interval: 50,
            log_interval: 25,
        }
    }
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::invalid("config", msg)
}

impl Config {
    // ==== geometry helpers ====

    /// Tokens per image side (the raster grid is square).
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens per sample.
    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Pixel values carried by one token.
    pub fn token_width(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Structural dims consumed by the stack forwards.
    pub fn stack_dims(&self) -> StackDims {
        StackDims {
            base_layers: self.base_layers,
            ctrl_layers: self.ctrl_layers,
            n_experts: self.n_experts,
            n_heads: self.n_heads,
            cond_scale: self.cond_scale,
        }
    }

    // ==== validation ====

    pub fn validate(&self) -> Result<(), TensorError> {
        let positive = [
            (self.image_size, "image_size"),
            (self.patch_size, "patch_size"),
            (self.d_model, "d_model"),
            (self.n_heads, "n_heads"),
            (self.base_layers, "base_layers"),
            (self.n_experts, "n_experts"),
            (self.ffn_mult, "ffn_mult"),
            (self.n_cond_types, "n_cond_types"),
            (self.batch_size, "batch_size"),
            (self.total_steps, "total_steps"),
            (self.sample_steps, "sample_steps"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(bad(format!("{name} must be ≥ 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(bad("vocab_size must be ≥ 2 (token 0 is the null prompt)"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 4 != 0 || self.d_model % 4 != 0 {
            return Err(bad(
                "d_model and d_model/n_heads must be divisible by 4 (2-D rotary pairs)",
            ));
        }
        if self.ctrl_layers < 1 || self.ctrl_layers > self.base_layers {
            return Err(bad(format!(
                "ctrl_layers {} must be in [1, base_layers = {}]",
                self.ctrl_layers, self.base_layers
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size > self.n_cond_types {
            return Err(bad(format!(
                "batch_size {} exceeds n_cond_types {}: balanced batches need \
                 pairwise-distinct condition types",
                self.batch_size, self.n_cond_types
            )));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(bad("prompt_dropout must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(bad("lr must be positive and finite"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(bad("weight_decay must be ≥ 0 and finite"));
        }
        if self.guidance < 0.0 || !self.guidance.is_finite() {
            return Err(bad("guidance must be ≥ 0 and finite"));
        }
        if !self.cond_scale.is_finite() {
            return Err(bad("cond_scale must be finite"));
        }
        Ok(())
    }

    // ==== canonical text form ====

    /// Canonical serialization: every key, fixed order, `key = value` lines.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("arch", self.arch.name().into());
        put("image_size", self.image_size.to_string());
        put("patch_size", self.patch_size.to_string());
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("base_layers", self.base_layers.to_string());
        put("ctrl_layers", self.ctrl_layers.to_string());
        put("n_experts", self.n_experts.to_string());
        put("ffn_mult", self.ffn_mult.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("n_cond_types", self.n_cond_types.to_string());
        put("cond_scale", self.cond_scale.to_string());
        put("lr", self.lr.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("total_steps", self.total_steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("seed", self.seed.to_string());
        put("sigma_dist", self.sigma_dist.name().into());
        put("prompt_dropout", self.prompt_dropout.to_string());
        put("zero_condition", self.zero_condition.to_string());
        put("guidance", self.guidance.to_string());
        put("sample_steps", self.sample_steps.to_string());
        put("val_per_type", self.val_per_type.to_string());
        put("val_interval", self.val_interval.to_string());
        put("log_interval", self.log_interval.to_string());
        s
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parses the `key = value` format over [`Config::default`]. Unknown and
    /// duplicate keys are errors; values must parse for their key's type.
    pub fn parse(text: &str) -> Result<Config, TensorError> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), TensorError> {
        fn int(key: &str, value: &str) -> Result<usize, TensorError> {
            value
                .parse()
                .map_err(|_| bad(format!("{key} expects an integer, got {value:?}")))
        }
        fn real(key: &str, value: &str) -> Result<f64, TensorError> {
            value
                .parse()
                .map_err(|_| bad(format!("{key} expects a number, got {value:?}")))
        }
        match key {
            "arch" => self.arch = Arch::parse(value)?,
            "image_size" => self.image_size = int(key, value)?,
            "patch_size" => self.patch_size = int(key, value)?,
            "d_model" => self.d_model = int(key, value)?,
            "n_heads" => self.n_heads = int(key, value)?,
            "base_layers" => self.base_layers = int(key, value)?,
            "ctrl_layers" => self.ctrl_layers = int(key, value)?,
            "n_experts" => self.n_experts = int(key, value)?,
            "ffn_mult" => self.ffn_mult = int(key, value)?,
            "vocab_size" => self.vocab_size = int(key, value)?,
            "n_cond_types" => self.n_cond_types = int(key, value)?,
            "cond_scale" => self.cond_scale = real(key, value)?,
            "lr" => self.lr = real(key, value)?,
            "warmup_steps" => self.warmup_steps = int(key, value)?,
            "total_steps" => self.total_steps = int(key, value)?,
            "batch_size" => self.batch_size = int(key, value)?,
            "weight_decay" => self.weight_decay = real(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad(format!("seed expects an integer, got {value:?}")))?;
            }
            "sigma_dist" => self.sigma_dist = SigmaDist::parse(value)?,
            "prompt_dropout" => self.prompt_dropout = real(key, value)?,
            "zero_condition" => {
                self.zero_condition = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad(format!("zero_condition expects true|false, got {value:?}"))),
                };
            }
            "guidance" => self.guidance = real(key, value)?,
            "sample_steps" => self.sample_steps = int(key, value)?,
            "val_per_type" => self.val_per_type = int(key, value)?,
            "val_interval" => self.val_interval = int(key, value)?,
            "log_interval" => self.log_interval = int(key, value)?,
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::parse(&cfg.serialize()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse(
            "# a run\n\nn_experts = 3   # sweep point\n  seed=7\n",
        )
        .unwrap();
        assert_eq!(cfg.n_experts, 3);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::parse("n_expert = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(Config::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn constraint_violations_name_the_constraint() {
        let err = Config::parse("batch_size = 9\n").unwrap_err();
        assert!(err.to_string().contains("n_cond_types"), "{err}");
        let err = Config::parse("warmup_steps = 9000\n").unwrap_err();
        assert!(err.to_string().contains("total_steps"), "{err}");
        assert!(Config::parse("ctrl_layers = 5\n").is_err());
        assert!(Config::parse("patch_size = 3\n").is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = Config::default();
        let mut b = a.clone();
        b.n_experts = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn arch_parses_both_ways() {
        assert_eq!(Config::parse("arch = controlnet\n").unwrap().arch, Arch::ControlNet);
        assert!(Config::parse("arch = resnet\n").is_err());
    }
}
