//! Pipeline configuration: a flat `section.key = value` text format.
//! Unknown keys are rejected; the resolved config is archived beside every
//! run's outputs and its digest is embedded in checkpoints.

use crate::data::Language;
use crate::error::{Result, StaError};
use crate::rng::fnv1a64;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus_dir: String,
    pub corpus_scenes: usize,
    pub corpus_languages: usize,
    pub corpus_speakers: u32,
    pub corpus_repeat_factor: usize,
    pub corpus_test_fraction: f64,
    pub corpus_dev_fraction: f64,
    pub run_dir: String,

    pub vqvae_m: usize,
    pub vqvae_d_code: usize,
    pub vqvae_stride: usize,
    pub vqvae_kernel: usize,
    pub vqvae_hidden: usize,
    pub vqvae_image_size: usize,
    pub vqvae_epochs: usize,
    pub vqvae_batch_size: usize,
    pub vqvae_lr: f64,
    pub vqvae_commitment_weight: f64,
    pub vqvae_dead_code_steps: u32,

    pub encoder_d_emb: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub encoder_blocks: usize,
    pub encoder_ff_mult: usize,
    pub encoder_conv_hidden: usize,
    pub encoder_batch_size: usize,
    pub encoder_weight_decay: f64,
    pub encoder_lr: f64,
    pub encoder_max_epochs: usize,
    pub encoder_patience: usize,
    pub encoder_init_inv_tau: f64,
    pub encoder_max_inv_tau: f64,

    pub diffusion_t: usize,
    pub diffusion_lambda: f64,
    pub diffusion_beta1: f64,
    pub diffusion_beta2: f64,
    pub diffusion_lr: f64,
    pub diffusion_warmup_iters: u64,
    pub diffusion_epochs: usize,
    pub diffusion_batch_size: usize,
    pub diffusion_width: usize,
    pub diffusion_heads: usize,
    pub diffusion_blocks: usize,
    pub diffusion_ff_mult: usize,
    pub diffusion_gamma_bar_end: f64,
    pub diffusion_beta_bar_m_end: f64,
    pub diffusion_random_start: bool,
    pub diffusion_adaln_additive_variant: bool,

    pub evalnet_epochs: usize,
    pub evalnet_lr: f64,
    pub evalnet_batch_size: usize,
    pub evalnet_feature_dim: usize,
    pub evalnet_hidden1: usize,
    pub evalnet_hidden2: usize,

    pub metrics_recall_k: usize,
    pub metrics_is_splits: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            corpus_dir: "data/corpus".into(),
            corpus_scenes: 200,
            corpus_languages: 2,
            corpus_speakers: 2,
            corpus_repeat_factor: 1,
            corpus_test_fraction: 0.2,
            corpus_dev_fraction: 0.15,
            run_dir: "runs/default".into(),

            vqvae_m: 64,
            vqvae_d_code: 16,
            vqvae_stride: 2,
            vqvae_kernel: 2,
            vqvae_hidden: 32,
            vqvae_image_size: 16,
            vqvae_epochs: 30,
            vqvae_batch_size: 16,
            vqvae_lr: 2e-3,
            vqvae_commitment_weight: 0.25,
            vqvae_dead_code_steps: 100,

            encoder_d_emb: 32,
            encoder_width: 64,
            encoder_heads: 4,
            encoder_blocks: 2,
            encoder_ff_mult: 4,
            encoder_conv_hidden: 32,
            encoder_batch_size: 16,
            encoder_weight_decay: 1e-6,
            encoder_lr: 1e-3,
            encoder_max_epochs: 30,
            encoder_patience: 5,
            encoder_init_inv_tau: 10.0,
            encoder_max_inv_tau: 100.0,

            diffusion_t: 100,
            diffusion_lambda: 0.001,
            diffusion_beta1: 0.9,
            diffusion_beta2: 0.96,
            diffusion_lr: 4.5e-4,
            diffusion_warmup_iters: 200,
            diffusion_epochs: 60,
            diffusion_batch_size: 16,
            diffusion_width: 64,
            diffusion_heads: 4,
            diffusion_blocks: 4,
            diffusion_ff_mult: 4,
            diffusion_gamma_bar_end: 0.99,
            diffusion_beta_bar_m_end: 0.01,
            diffusion_random_start: false,
            diffusion_adaln_additive_variant: false,

            evalnet_epochs: 60,
            evalnet_lr: 5e-3,
            evalnet_batch_size: 16,
            evalnet_feature_dim: 64,
            evalnet_hidden1: 24,
            evalnet_hidden2: 48,

            metrics_recall_k: 5,
            metrics_is_splits: 10,
        }
    }
}

macro_rules! config_table {
    ($self:ident, $action:ident) => {
        $action!("seed", $self.seed, u64);
        $action!("corpus.dir", $self.corpus_dir, String);
        $action!("corpus.scenes", $self.corpus_scenes, usize);
        $action!("corpus.languages", $self.corpus_languages, usize);
        $action!("corpus.speakers", $self.corpus_speakers, u32);
        $action!("corpus.repeat_factor", $self.corpus_repeat_factor, usize);
        $action!("corpus.test_fraction", $self.corpus_test_fraction, f64);
        $action!("corpus.dev_fraction", $self.corpus_dev_fraction, f64);
        $action!("run.dir", $self.run_dir, String);
        $action!("vqvae.m", $self.vqvae_m, usize);
        $action!("vqvae.d_code", $self.vqvae_d_code, usize);
        $action!("vqvae.stride", $self.vqvae_stride, usize);
        $action!("vqvae.kernel", $self.vqvae_kernel, usize);
        $action!("vqvae.hidden", $self.vqvae_hidden, usize);
        $action!("vqvae.image_size", $self.vqvae_image_size, usize);
        $action!("vqvae.epochs", $self.vqvae_epochs, usize);
        $action!("vqvae.batch_size", $self.vqvae_batch_size, usize);
        $action!("vqvae.lr", $self.vqvae_lr, f64);
        $action!("vqvae.commitment_weight", $self.vqvae_commitment_weight, f64);
        $action!("vqvae.dead_code_steps", $self.vqvae_dead_code_steps, u32);
        $action!("encoder.d_emb", $self.encoder_d_emb, usize);
        $action!("encoder.width", $self.encoder_width, usize);
        $action!("encoder.heads", $self.encoder_heads, usize);
        $action!("encoder.blocks", $self.encoder_blocks, usize);
        $action!("encoder.ff_mult", $self.encoder_ff_mult, usize);
        $action!("encoder.conv_hidden", $self.encoder_conv_hidden, usize);
        $action!("encoder.batch_size", $self.encoder_batch_size, usize);
        $action!("encoder.weight_decay", $self.encoder_weight_decay, f64);
        $action!("encoder.lr", $self.encoder_lr, f64);
        $action!("encoder.max_epochs", $self.encoder_max_epochs, usize);
        $action!("encoder.patience", $self.encoder_patience, usize);
        $action!("encoder.init_inv_tau", $self.encoder_init_inv_tau, f64);
        $action!("encoder.max_inv_tau", $self.encoder_max_inv_tau, f64);
        $action!("diffusion.T", $self.diffusion_t, usize);
        $action!("diffusion.lambda", $self.diffusion_lambda, f64);
        $action!("diffusion.beta1", $self.diffusion_beta1, f64);
        $action!("diffusion.beta2", $self.diffusion_beta2, f64);
        $action!("diffusion.lr", $self.diffusion_lr, f64);
        $action!("diffusion.warmup_iters", $self.diffusion_warmup_iters, u64);
        $action!("diffusion.epochs", $self.diffusion_epochs, usize);
        $action!("diffusion.batch_size", $self.diffusion_batch_size, usize);
        $action!("diffusion.width", $self.diffusion_width, usize);
        $action!("diffusion.heads", $self.diffusion_heads, usize);
        $action!("diffusion.blocks", $self.diffusion_blocks, usize);
        $action!("diffusion.ff_mult", $self.diffusion_ff_mult, usize);
        $action!("diffusion.gamma_bar_end", $self.diffusion_gamma_bar_end, f64);
        $action!("diffusion.beta_bar_m_end", $self.diffusion_beta_bar_m_end, f64);
        $action!("diffusion.random_start", $self.diffusion_random_start, bool);
        $action!(
            "diffusion.adaln_additive_variant",
            $self.diffusion_adaln_additive_variant,
            bool
        );
        $action!("evalnet.epochs", $self.evalnet_epochs, usize);
        $action!("evalnet.lr", $self.evalnet_lr, f64);
        $action!("evalnet.batch_size", $self.evalnet_batch_size, usize);
        $action!("evalnet.feature_dim", $self.evalnet_feature_dim, usize);
        $action!("evalnet.hidden1", $self.evalnet_hidden1, usize);
        $action!("evalnet.hidden2", $self.evalnet_hidden2, usize);
        $action!("metrics.recall_k", $self.metrics_recall_k, usize);
        $action!("metrics.is_splits", $self.metrics_is_splits, usize);
    };
}

impl PipelineConfig {
    /// Parse the flat key=value format over the defaults. Lines starting
    /// with `#` and blank lines are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                StaError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| {
                StaError::Config(format!("line {}: {}", lineno + 1, e))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StaError::Config(format!("{}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! apply {
            ($name:expr, $field:expr, String) => {
                if key == $name {
                    $field = value.to_string();
                    return Ok(());
                }
            };
            ($name:expr, $field:expr, bool) => {
                if key == $name {
                    $field = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => {
                            return Err(StaError::Config(format!(
                                "key `{}`: expected bool, got `{}`",
                                key, value
                            )))
                        }
                    };
                    return Ok(());
                }
            };
            ($name:expr, $field:expr, $ty:ty) => {
                if key == $name {
                    $field = value.parse::<$ty>().map_err(|_| {
                        StaError::Config(format!(
                            "key `{}`: cannot parse `{}` as {}",
                            key,
                            value,
                            stringify!($ty)
                        ))
                    })?;
                    return Ok(());
                }
            };
        }
        config_table!(self, apply);
        Err(StaError::Config(format!("unknown key `{}`", key)))
    }

    /// Canonical resolved text: every key in table order.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($name:expr, $field:expr, String) => {
                out.push_str(&format!("{} = {}\n", $name, $field));
            };
            ($name:expr, $field:expr, $ty:ty) => {
                out.push_str(&format!("{} = {}\n", $name, $field));
            };
        }
        config_table!(self, emit);
        out
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.resolved_text().as_bytes())
    }

    pub fn languages(&self) -> Vec<Language> {
        match self.corpus_languages {
            1 => vec![Language::A],
            _ => vec![Language::A, Language::B],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.corpus_languages) {
            return Err(StaError::Config(format!(
                "corpus.languages = {} (registered languages: 1 or 2)",
                self.corpus_languages
            )));
        }
        if self.diffusion_t < 1 {
            return Err(StaError::Config("diffusion.T must be >= 1".into()));
        }
        if self.diffusion_lambda < 0.0 {
            return Err(StaError::Config("diffusion.lambda must be >= 0".into()));
        }
        if self.encoder_width % self.encoder_heads != 0 {
            return Err(StaError::Config(
                "encoder.width must divide by encoder.heads".into(),
            ));
        }
        if self.diffusion_width % self.diffusion_heads != 0 {
            return Err(StaError::Config(
                "diffusion.width must divide by diffusion.heads".into(),
            ));
        }
        Ok(())
    }
}
