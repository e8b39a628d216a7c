//! Staged training orchestration, sampling, and evaluation.
//!
//! Stages train in order — vqvae, encoder, diffusion (plus the evaluation
//! classifier) — with earlier stages loaded frozen from their checkpoints.
//! Live parameters and optimizer state are rounded through binary32 at
//! every epoch boundary, so a saved epoch checkpoint is a lossless
//! snapshot and resumed runs reproduce unbroken ones bit-exactly.

use crate::checkpoint::{file_checksum, Checkpoint};
use crate::config::PipelineConfig;
use crate::data::{
    read_caption, read_png, write_png, CaptionSequence, CorpusManifest, Language, SceneSpec,
    Split, IMAGE_SIZE,
};
use crate::denoiser::{DenoiserConfig, DenoiserParams, DiffusionTrainer};
use crate::diffusion::{
    build_schedule, DiffusionLossConfig, SamplerStart, ScheduleSpec, TransitionSchedule,
};
use crate::encoder::{EncoderConfig, EncoderTrainer, SpeechEncoderParams, TeacherEmbedder, TrainPair};
use crate::error::{Result, StaError};
use crate::evalnet::{EvalNet, EvalNetConfig, EvalNetTrainer, EVAL_CLASSES};
use crate::metrics::{
    feature_stats, fid, inception_score_splits, recall_at_k, PredictionSet, RetrievalIndex,
};
use crate::nn::{collect, collect_mut, Params};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::vq::{TokenGrid, VqCodecParams, VqConfig, VqTrainConfig, VqTrainer};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vqvae,
    Encoder,
    Diffusion,
    EvalClassifier,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "vqvae" => Ok(Stage::Vqvae),
            "encoder" => Ok(Stage::Encoder),
            "diffusion" => Ok(Stage::Diffusion),
            "eval-classifier" => Ok(Stage::EvalClassifier),
            other => Err(StaError::invalid(
                "stage",
                format!(
                    "unknown stage `{}` (expected vqvae|encoder|diffusion|eval-classifier)",
                    other
                ),
            )),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::Encoder => "encoder",
            Stage::Diffusion => "diffusion",
            Stage::EvalClassifier => "evalnet",
        }
    }
}

pub fn checkpoint_path(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(format!("{}.stak", stage.tag()))
}

fn resume_path(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(format!("{}.resume.stak", stage.tag()))
}

// ── corpus access ───────────────────────────────────────────────────

pub struct PreparedCorpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    images: BTreeMap<String, Vec<f64>>,
    captions: BTreeMap<String, CaptionSequence>,
}

impl PreparedCorpus {
    pub fn load(dir: &Path) -> Result<PreparedCorpus> {
        let manifest = crate::data::load_manifest(dir)?;
        let mut images = BTreeMap::new();
        let mut captions = BTreeMap::new();
        for rec in &manifest.records {
            if !images.contains_key(&rec.image) {
                let (pixels, w, h) = read_png(&dir.join(&rec.image))?;
                if w != IMAGE_SIZE || h != IMAGE_SIZE {
                    return Err(StaError::Corpus(format!(
                        "{} is {}x{}, corpus images must be {0}x{0}",
                        rec.image, w, h
                    )));
                }
                images.insert(rec.image.clone(), pixels);
            }
            for path in rec.captions.values() {
                if !captions.contains_key(path) {
                    captions.insert(path.clone(), read_caption(&dir.join(path))?);
                }
            }
        }
        Ok(PreparedCorpus {
            dir: dir.to_path_buf(),
            manifest,
            images,
            captions,
        })
    }

    pub fn image(&self, path: &str) -> &Vec<f64> {
        &self.images[path]
    }

    pub fn caption(&self, path: &str) -> &CaptionSequence {
        &self.captions[path]
    }

    /// Unique images of records in the given split, ordered by path.
    pub fn unique_images(&self, split: Split) -> Vec<(String, Vec<f64>)> {
        let mut seen = BTreeMap::new();
        for rec in &self.manifest.records {
            if rec.split == split {
                seen.entry(rec.image.clone())
                    .or_insert_with(|| self.images[&rec.image].clone());
            }
        }
        seen.into_iter().collect()
    }

    /// (caption, scene, language, speaker) tuples of one split.
    pub fn caption_entries(&self, split: Split) -> Vec<(CaptionSequence, SceneSpec, Language, u32)> {
        let mut out = Vec::new();
        for rec in &self.manifest.records {
            if rec.split != split {
                continue;
            }
            for (tag, path) in &rec.captions {
                let lang = Language::parse(tag).expect("manifest language");
                out.push((self.captions[path].clone(), rec.scene, lang, rec.speaker));
            }
        }
        out
    }

    /// One representative pixel buffer per scene attribute combination.
    pub fn scene_images(&self) -> Vec<(SceneSpec, Vec<f64>)> {
        let mut seen: BTreeMap<usize, (SceneSpec, Vec<f64>)> = BTreeMap::new();
        for rec in &self.manifest.records {
            seen.entry(rec.scene.index())
                .or_insert_with(|| (rec.scene, self.images[&rec.image].clone()));
        }
        seen.into_values().collect()
    }
}

// ── shared training-state persistence ───────────────────────────────

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    dev_loss: f64,
    lr: f64,
    seed: u64,
}

struct EpochLogger {
    file: std::fs::File,
}

impl EpochLogger {
    fn create(path: &Path, append: bool) -> Result<EpochLogger> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        Ok(EpochLogger { file })
    }

    fn log(&mut self, line: &LogLine) -> Result<()> {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        Ok(())
    }
}

fn quantize_live<P: Params + ?Sized>(params: &mut P, opt: &mut OptimizerState) {
    for (_, t) in collect_mut(params) {
        t.quantize_f32();
    }
    for series in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        for v in series.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn push_opt_state<P: Params + ?Sized>(ckpt: &mut Checkpoint, params: &P, opt: &OptimizerState) {
    let named = collect(params);
    for (k, (name, t)) in named.iter().enumerate() {
        if k < opt.m.len() {
            ckpt.push_vec(&format!("opt.m.{}", name), t.shape.clone(), &opt.m[k]);
            ckpt.push_vec(&format!("opt.v.{}", name), t.shape.clone(), &opt.v[k]);
        }
    }
    ckpt.push_scalar("opt.t", opt.t as f64);
}

fn restore_opt_state<P: Params + ?Sized>(
    ckpt: &Checkpoint,
    params: &P,
    opt: &mut OptimizerState,
) -> Result<()> {
    let named = collect(params);
    opt.m.clear();
    opt.v.clear();
    for (name, t) in &named {
        let m = ckpt
            .tensor(&format!("opt.m.{}", name))
            .ok_or_else(|| StaError::Checkpoint(format!("missing opt.m.{}", name)))?;
        let v = ckpt
            .tensor(&format!("opt.v.{}", name))
            .ok_or_else(|| StaError::Checkpoint(format!("missing opt.v.{}", name)))?;
        if m.values.len() != t.numel() || v.values.len() != t.numel() {
            return Err(StaError::Checkpoint(format!(
                "optimizer state for `{}` has wrong size",
                name
            )));
        }
        opt.m.push(m.values.iter().map(|&x| x as f64).collect());
        opt.v.push(v.values.iter().map(|&x| x as f64).collect());
    }
    opt.t = ckpt
        .scalar("opt.t")
        .ok_or_else(|| StaError::Checkpoint("missing opt.t".into()))? as u64;
    Ok(())
}

fn apply_params<P: Params + ?Sized>(ckpt: &Checkpoint, params: &mut P) -> Result<()> {
    let mut named = collect_mut(params);
    ckpt.apply_to(&mut named)
}

struct EpochProgress {
    start_epoch: usize,
    best_dev: f64,
    bad_epochs: usize,
}

fn read_progress(ckpt: &Checkpoint) -> EpochProgress {
    EpochProgress {
        start_epoch: ckpt.scalar("train.epoch").unwrap_or(0.0) as usize,
        best_dev: ckpt.scalar("train.best_dev").unwrap_or(f64::INFINITY),
        bad_epochs: ckpt.scalar("train.bad_epochs").unwrap_or(0.0) as usize,
    }
}

// ── stage: vqvae ────────────────────────────────────────────────────

pub fn vq_config_of(cfg: &PipelineConfig) -> VqConfig {
    VqConfig {
        image_size: cfg.vqvae_image_size,
        channels: 3,
        stride: cfg.vqvae_stride,
        kernel: cfg.vqvae_kernel,
        d_code: cfg.vqvae_d_code,
        m: cfg.vqvae_m,
        hidden: cfg.vqvae_hidden,
    }
}

pub fn encoder_config_of(cfg: &PipelineConfig) -> EncoderConfig {
    EncoderConfig {
        d_emb: cfg.encoder_d_emb,
        width: cfg.encoder_width,
        heads: cfg.encoder_heads,
        blocks: cfg.encoder_blocks,
        ff_mult: cfg.encoder_ff_mult,
        conv_hidden: cfg.encoder_conv_hidden,
        init_inv_tau: cfg.encoder_init_inv_tau,
        max_inv_tau: cfg.encoder_max_inv_tau,
    }
}

pub fn denoiser_config_of(cfg: &PipelineConfig) -> DenoiserConfig {
    let grid = cfg.vqvae_image_size / cfg.vqvae_stride;
    DenoiserConfig {
        m: cfg.vqvae_m,
        n_positions: grid * grid,
        t_steps: cfg.diffusion_t,
        d_emb: cfg.encoder_d_emb,
        width: cfg.diffusion_width,
        heads: cfg.diffusion_heads,
        blocks: cfg.diffusion_blocks,
        ff_mult: cfg.diffusion_ff_mult,
        additive_condition_variant: cfg.diffusion_adaln_additive_variant,
    }
}

pub fn schedule_of(cfg: &PipelineConfig) -> Result<TransitionSchedule> {
    build_schedule(
        cfg.diffusion_t,
        cfg.vqvae_m,
        &ScheduleSpec::LinearCumulative {
            gamma_bar_end: cfg.diffusion_gamma_bar_end,
            beta_bar_m_end: cfg.diffusion_beta_bar_m_end,
        },
    )
}

fn archive_config(cfg: &PipelineConfig, run_dir: &Path, stage: Stage) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(
        run_dir.join(format!("config_{}.resolved.cfg", stage.tag())),
        cfg.resolved_text(),
    )?;
    Ok(())
}

pub fn train_vqvae(cfg: &PipelineConfig, corpus: &PreparedCorpus, run_dir: &Path, resume: bool) -> Result<()> {
    archive_config(cfg, run_dir, Stage::Vqvae)?;
    let digest = cfg.digest();
    let mut init_rng = derive_rng(cfg.seed, "vqvae-init", &[]);
    let params = VqCodecParams::new(vq_config_of(cfg), &mut init_rng)?;
    let opt = OptimizerState::new(AdamWConfig {
        lr: cfg.vqvae_lr,
        ..AdamWConfig::default()
    });
    let mut trainer = VqTrainer::new(
        params,
        opt,
        VqTrainConfig {
            commitment_weight: cfg.vqvae_commitment_weight,
            dead_code_steps: cfg.vqvae_dead_code_steps,
            freeze_codebook: false,
        },
    );

    let mut progress = EpochProgress {
        start_epoch: 0,
        best_dev: f64::INFINITY,
        bad_epochs: 0,
    };
    if resume {
        let rp = resume_path(run_dir, Stage::Vqvae);
        let ckpt = Checkpoint::load_checked(&rp, digest, true)?;
        apply_params(&ckpt, &mut trainer.params)?;
        restore_opt_state(&ckpt, &trainer.params, &mut trainer.opt)?;
        if let Some(t) = ckpt.tensor("vq.unused_steps") {
            trainer.unused_steps = t.values.iter().map(|&v| v as u32).collect();
        }
        progress = read_progress(&ckpt);
    }

    let train_images: Vec<Vec<f64>> = corpus
        .unique_images(Split::Train)
        .into_iter()
        .map(|(_, px)| px)
        .collect();
    let dev_images: Vec<Vec<f64>> = corpus
        .unique_images(Split::Dev)
        .into_iter()
        .map(|(_, px)| px)
        .collect();
    if train_images.is_empty() {
        return Err(StaError::Corpus("no training images".into()));
    }

    let log_path = run_dir.join("train_vqvae.log.jsonl");
    let mut logger = EpochLogger::create(&log_path, resume)?;
    for epoch in progress.start_epoch..cfg.vqvae_epochs {
        let mut erng = derive_rng(cfg.seed, "vqvae-epoch", &[epoch as u64]);
        let mut order: Vec<usize> = (0..train_images.len()).collect();
        shuffle(&mut order, &mut erng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.vqvae_batch_size.max(1)) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| train_images[i].clone()).collect();
            let losses = trainer.step(&batch, &mut erng)?;
            total += losses.reconstruction + losses.codebook
                + cfg.vqvae_commitment_weight * losses.commitment;
            batches += 1;
        }
        let loss = total / batches as f64;

        quantize_live(&mut trainer.params, &mut trainer.opt);
        let dev_loss = if dev_images.is_empty() {
            loss
        } else {
            vq_recon_loss(&trainer.params, &dev_images)?
        };
        logger.log(&LogLine {
            epoch,
            loss,
            dev_loss,
            lr: cfg.vqvae_lr,
            seed: cfg.seed,
        })?;

        let improved = dev_loss < progress.best_dev;
        if improved {
            progress.best_dev = dev_loss;
            progress.bad_epochs = 0;
        } else {
            progress.bad_epochs += 1;
        }

        let snapshot = |epoch_done: usize, p: &EpochProgress| -> Checkpoint {
            let mut ckpt = Checkpoint::new(Stage::Vqvae.tag(), digest);
            let named: Vec<(String, &Tensor)> = collect(&trainer.params);
            ckpt.push_named(&named);
            push_opt_state(&mut ckpt, &trainer.params, &trainer.opt);
            let unused: Vec<f64> = trainer.unused_steps.iter().map(|&v| v as f64).collect();
            ckpt.push_vec("vq.unused_steps", vec![unused.len()], &unused);
            ckpt.push_scalar("train.epoch", epoch_done as f64);
            ckpt.push_scalar("train.best_dev", p.best_dev);
            ckpt.push_scalar("train.bad_epochs", p.bad_epochs as f64);
            ckpt
        };
        let ckpt = snapshot(epoch + 1, &progress);
        ckpt.save(&resume_path(run_dir, Stage::Vqvae))?;
        if improved {
            ckpt.save(&checkpoint_path(run_dir, Stage::Vqvae))?;
        }
    }

    // post-training codebook audit
    if let Some((i, j)) = trainer.params.codebook.duplicate_pair(1e-12) {
        return Err(StaError::invalid(
            "train_vqvae",
            format!("codebook entries {} and {} are exact duplicates", i, j),
        ));
    }
    Ok(())
}

fn vq_recon_loss(params: &VqCodecParams, images: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for image in images {
        let grid = params.encode_image(image)?;
        let recon = params.decode_tokens(&grid)?;
        let mse: f64 = recon
            .iter()
            .zip(image)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / image.len() as f64;
        total += mse;
    }
    Ok(total / images.len() as f64)
}

/// Load frozen VQ codec parameters from the stage checkpoint.
pub fn load_vqvae(cfg: &PipelineConfig, run_dir: &Path, allow_mismatch: bool) -> Result<VqCodecParams> {
    let path = checkpoint_path(run_dir, Stage::Vqvae);
    if !path.exists() {
        return Err(StaError::MissingDependency(format!(
            "stage vqvae: checkpoint {} not found (run `sta train --stage vqvae` first)",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load_checked(&path, cfg.digest(), allow_mismatch)?;
    let mut init_rng = derive_rng(cfg.seed, "vqvae-init", &[]);
    let mut params = VqCodecParams::new(vq_config_of(cfg), &mut init_rng)?;
    apply_params(&ckpt, &mut params)?;
    Ok(params)
}

// ── stage: encoder ──────────────────────────────────────────────────

fn encoder_pairs(corpus: &PreparedCorpus, teacher: &TeacherEmbedder, split: Split) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::new();
    for rec in &corpus.manifest.records {
        if rec.split != split {
            continue;
        }
        let image_embedding = teacher.embed_image(corpus.image(&rec.image))?;
        for path in rec.captions.values() {
            pairs.push(TrainPair {
                caption: corpus.caption(path).clone(),
                image_embedding: image_embedding.clone(),
                group: rec.scene.index(),
            });
        }
    }
    Ok(pairs)
}

pub fn train_encoder(cfg: &PipelineConfig, corpus: &PreparedCorpus, run_dir: &Path, resume: bool) -> Result<()> {
    archive_config(cfg, run_dir, Stage::Encoder)?;
    let digest = cfg.digest();
    let teacher = TeacherEmbedder::new(cfg.encoder_d_emb);
    let teacher_checksum_before = teacher.checksum();

    let mut init_rng = derive_rng(cfg.seed, "encoder-init", &[]);
    let params = SpeechEncoderParams::new(encoder_config_of(cfg), &mut init_rng);
    let opt = OptimizerState::new(AdamWConfig {
        lr: cfg.encoder_lr,
        weight_decay: cfg.encoder_weight_decay,
        ..AdamWConfig::default()
    });
    let mut trainer = EncoderTrainer::new(params, opt);

    let mut progress = EpochProgress {
        start_epoch: 0,
        best_dev: f64::INFINITY,
        bad_epochs: 0,
    };
    if resume {
        let ckpt = Checkpoint::load_checked(&resume_path(run_dir, Stage::Encoder), digest, true)?;
        apply_params(&ckpt, &mut trainer.params)?;
        restore_opt_state(&ckpt, &trainer.params, &mut trainer.opt)?;
        progress = read_progress(&ckpt);
    }

    let train_pairs = encoder_pairs(corpus, &teacher, Split::Train)?;
    let dev_pairs = encoder_pairs(corpus, &teacher, Split::Dev)?;
    if train_pairs.len() < 2 {
        return Err(StaError::Corpus("not enough training pairs".into()));
    }

    let mut logger = EpochLogger::create(&run_dir.join("train_encoder.log.jsonl"), resume)?;
    for epoch in progress.start_epoch..cfg.encoder_max_epochs {
        let mut erng = derive_rng(cfg.seed, "encoder-epoch", &[epoch as u64]);
        let loss = trainer.train_epoch(&train_pairs, cfg.encoder_batch_size, &mut erng)?;
        quantize_live(&mut trainer.params, &mut trainer.opt);
        let dev_loss = if dev_pairs.len() >= 2 {
            trainer.eval_loss(&dev_pairs, cfg.encoder_batch_size)?
        } else {
            loss
        };
        logger.log(&LogLine {
            epoch,
            loss,
            dev_loss,
            lr: cfg.encoder_lr,
            seed: cfg.seed,
        })?;

        let improved = dev_loss < progress.best_dev;
        if improved {
            progress.best_dev = dev_loss;
            progress.bad_epochs = 0;
        } else {
            progress.bad_epochs += 1;
        }

        let mut ckpt = Checkpoint::new(Stage::Encoder.tag(), digest);
        ckpt.push_named(&collect(&trainer.params));
        push_opt_state(&mut ckpt, &trainer.params, &trainer.opt);
        ckpt.push_scalar("train.epoch", (epoch + 1) as f64);
        ckpt.push_scalar("train.best_dev", progress.best_dev);
        ckpt.push_scalar("train.bad_epochs", progress.bad_epochs as f64);
        ckpt.save(&resume_path(run_dir, Stage::Encoder))?;
        if improved {
            ckpt.save(&checkpoint_path(run_dir, Stage::Encoder))?;
        }
        if progress.bad_epochs >= cfg.encoder_patience {
            break; // early stopping on dev loss
        }
    }

    debug_assert_eq!(teacher.checksum(), teacher_checksum_before);
    Ok(())
}

pub fn load_encoder(cfg: &PipelineConfig, run_dir: &Path, allow_mismatch: bool) -> Result<SpeechEncoderParams> {
    let path = checkpoint_path(run_dir, Stage::Encoder);
    if !path.exists() {
        return Err(StaError::MissingDependency(format!(
            "stage encoder: checkpoint {} not found (run `sta train --stage encoder` first)",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load_checked(&path, cfg.digest(), allow_mismatch)?;
    let mut init_rng = derive_rng(cfg.seed, "encoder-init", &[]);
    let mut params = SpeechEncoderParams::new(encoder_config_of(cfg), &mut init_rng);
    apply_params(&ckpt, &mut params)?;
    Ok(params)
}

// ── stage: diffusion ────────────────────────────────────────────────

pub fn train_diffusion(cfg: &PipelineConfig, corpus: &PreparedCorpus, run_dir: &Path, resume: bool) -> Result<()> {
    archive_config(cfg, run_dir, Stage::Diffusion)?;
    let digest = cfg.digest();
    // frozen dependencies; a missing checkpoint names the stage. The
    // digest is not enforced here: run-length keys may legally change
    // between stages, and name/shape checks still guard architecture.
    let vq = load_vqvae(cfg, run_dir, true)?;
    let enc = load_encoder(cfg, run_dir, true)?;

    let schedule = schedule_of(cfg)?;
    let mut init_rng = derive_rng(cfg.seed, "diffusion-init", &[]);
    let params = DenoiserParams::new(denoiser_config_of(cfg), &mut init_rng);
    let opt = OptimizerState::new(AdamWConfig {
        lr: cfg.diffusion_lr,
        beta1: cfg.diffusion_beta1,
        beta2: cfg.diffusion_beta2,
        ..AdamWConfig::default()
    });
    let mut trainer = DiffusionTrainer {
        params,
        opt,
        schedule: schedule.clone(),
        loss_cfg: DiffusionLossConfig {
            lambda: cfg.diffusion_lambda,
        },
        base_lr: cfg.diffusion_lr,
        warmup_iters: cfg.diffusion_warmup_iters,
        iters_done: 0,
    };

    let mut progress = EpochProgress {
        start_epoch: 0,
        best_dev: f64::INFINITY,
        bad_epochs: 0,
    };
    if resume {
        let ckpt = Checkpoint::load_checked(&resume_path(run_dir, Stage::Diffusion), digest, true)?;
        apply_params(&ckpt, &mut trainer.params)?;
        restore_opt_state(&ckpt, &trainer.params, &mut trainer.opt)?;
        trainer.iters_done = ckpt.scalar("train.iters_done").unwrap_or(0.0) as u64;
        progress = read_progress(&ckpt);
    }

    // precompute frozen (token grid, speech embedding) pairs
    let prepare = |split: Split| -> Result<Vec<(TokenGrid, Vec<f64>)>> {
        let mut out = Vec::new();
        for rec in &corpus.manifest.records {
            if rec.split != split {
                continue;
            }
            let grid = vq.encode_image(corpus.image(&rec.image))?;
            for path in rec.captions.values() {
                let y = enc.embed_caption(corpus.caption(path))?;
                out.push((grid.clone(), y));
            }
        }
        Ok(out)
    };
    let train_set = prepare(Split::Train)?;
    let dev_set = prepare(Split::Dev)?;
    if train_set.is_empty() {
        return Err(StaError::Corpus("no diffusion training pairs".into()));
    }

    let mut logger = EpochLogger::create(&run_dir.join("train_diffusion.log.jsonl"), resume)?;
    for epoch in progress.start_epoch..cfg.diffusion_epochs {
        let mut erng = derive_rng(cfg.seed, "diffusion-epoch", &[epoch as u64]);
        let loss = trainer.train_epoch(&train_set, cfg.diffusion_batch_size, &mut erng)?;
        quantize_live(&mut trainer.params, &mut trainer.opt);
        let dev_loss = if dev_set.is_empty() {
            loss
        } else {
            trainer.eval_loss(&dev_set, cfg.seed)?
        };
        logger.log(&LogLine {
            epoch,
            loss,
            dev_loss,
            lr: trainer.opt.config.lr,
            seed: cfg.seed,
        })?;

        let improved = dev_loss < progress.best_dev;
        if improved {
            progress.best_dev = dev_loss;
            progress.bad_epochs = 0;
        } else {
            progress.bad_epochs += 1;
        }

        let mut ckpt = Checkpoint::new(Stage::Diffusion.tag(), digest);
        ckpt.push_named(&collect(&trainer.params));
        push_opt_state(&mut ckpt, &trainer.params, &trainer.opt);
        ckpt.push_scalar("train.epoch", (epoch + 1) as f64);
        ckpt.push_scalar("train.best_dev", progress.best_dev);
        ckpt.push_scalar("train.bad_epochs", progress.bad_epochs as f64);
        ckpt.push_scalar("train.iters_done", trainer.iters_done as f64);
        ckpt.schedule = Some(schedule.clone());
        ckpt.save(&resume_path(run_dir, Stage::Diffusion))?;
        if improved {
            ckpt.save(&checkpoint_path(run_dir, Stage::Diffusion))?;
        }
    }
    Ok(())
}

pub fn load_diffusion(
    cfg: &PipelineConfig,
    run_dir: &Path,
    allow_mismatch: bool,
) -> Result<(DenoiserParams, TransitionSchedule)> {
    let path = checkpoint_path(run_dir, Stage::Diffusion);
    if !path.exists() {
        return Err(StaError::MissingDependency(format!(
            "stage diffusion: checkpoint {} not found (run `sta train --stage diffusion` first)",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load_checked(&path, cfg.digest(), allow_mismatch)?;
    let mut init_rng = derive_rng(cfg.seed, "diffusion-init", &[]);
    let mut params = DenoiserParams::new(denoiser_config_of(cfg), &mut init_rng);
    apply_params(&ckpt, &mut params)?;
    let schedule = ckpt
        .schedule
        .ok_or_else(|| StaError::Checkpoint("diffusion checkpoint lacks a schedule".into()))?;
    Ok((params, schedule))
}

// ── stage: evaluation classifier ────────────────────────────────────

pub fn evalnet_config_of(cfg: &PipelineConfig) -> EvalNetConfig {
    EvalNetConfig {
        image_size: IMAGE_SIZE,
        channels: 3,
        hidden1: cfg.evalnet_hidden1,
        hidden2: cfg.evalnet_hidden2,
        feature_dim: cfg.evalnet_feature_dim,
    }
}

pub fn train_evalnet(cfg: &PipelineConfig, corpus: &PreparedCorpus, run_dir: &Path, resume: bool) -> Result<()> {
    archive_config(cfg, run_dir, Stage::EvalClassifier)?;
    let digest = cfg.digest();
    let mut init_rng = derive_rng(cfg.seed, "evalnet-init", &[]);
    let net = EvalNet::new(evalnet_config_of(cfg), &mut init_rng);
    let opt = OptimizerState::new(AdamWConfig {
        lr: cfg.evalnet_lr,
        ..AdamWConfig::default()
    });
    let mut trainer = EvalNetTrainer { net, opt };

    let mut progress = EpochProgress {
        start_epoch: 0,
        best_dev: f64::INFINITY,
        bad_epochs: 0,
    };
    if resume {
        let ckpt = Checkpoint::load_checked(&resume_path(run_dir, Stage::EvalClassifier), digest, true)?;
        apply_params(&ckpt, &mut trainer.net)?;
        restore_opt_state(&ckpt, &trainer.net, &mut trainer.opt)?;
        progress = read_progress(&ckpt);
    }

    // the classifier trains on real train/dev images only; test images
    // stay held out for metric validity checks
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in &corpus.manifest.records {
        if rec.split == Split::Test {
            continue;
        }
        images.push(corpus.image(&rec.image).clone());
        labels.push(rec.scene.shape_color_class());
    }
    let dev_images: Vec<Vec<f64>> = corpus
        .unique_images(Split::Dev)
        .into_iter()
        .map(|(_, px)| px)
        .collect();
    let dev_labels: Vec<usize> = {
        let mut seen = BTreeMap::new();
        for rec in &corpus.manifest.records {
            if rec.split == Split::Dev {
                seen.entry(rec.image.clone())
                    .or_insert(rec.scene.shape_color_class());
            }
        }
        seen.into_values().collect()
    };

    let mut logger = EpochLogger::create(&run_dir.join("train_evalnet.log.jsonl"), resume)?;
    for epoch in progress.start_epoch..cfg.evalnet_epochs {
        let mut erng = derive_rng(cfg.seed, "evalnet-epoch", &[epoch as u64]);
        let loss = trainer.train_epoch(&images, &labels, cfg.evalnet_batch_size, &mut erng)?;
        quantize_live(&mut trainer.net, &mut trainer.opt);
        let dev_loss = if dev_images.is_empty() {
            loss
        } else {
            1.0 - trainer.accuracy(&dev_images, &dev_labels)?
        };
        logger.log(&LogLine {
            epoch,
            loss,
            dev_loss,
            lr: cfg.evalnet_lr,
            seed: cfg.seed,
        })?;

        let improved = dev_loss < progress.best_dev;
        if improved {
            progress.best_dev = dev_loss;
            progress.bad_epochs = 0;
        } else {
            progress.bad_epochs += 1;
        }
        let mut ckpt = Checkpoint::new(Stage::EvalClassifier.tag(), digest);
        ckpt.push_named(&collect(&trainer.net));
        push_opt_state(&mut ckpt, &trainer.net, &trainer.opt);
        ckpt.push_scalar("train.epoch", (epoch + 1) as f64);
        ckpt.push_scalar("train.best_dev", progress.best_dev);
        ckpt.push_scalar("train.bad_epochs", progress.bad_epochs as f64);
        ckpt.save(&resume_path(run_dir, Stage::EvalClassifier))?;
        if improved {
            ckpt.save(&checkpoint_path(run_dir, Stage::EvalClassifier))?;
        }
    }
    Ok(())
}

pub fn load_evalnet(cfg: &PipelineConfig, run_dir: &Path, allow_mismatch: bool) -> Result<EvalNet> {
    let path = checkpoint_path(run_dir, Stage::EvalClassifier);
    if !path.exists() {
        return Err(StaError::MissingDependency(format!(
            "evaluation classifier checkpoint {} not found \
             (run `sta train --stage eval-classifier` first)",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load_checked(&path, cfg.digest(), allow_mismatch)?;
    let mut init_rng = derive_rng(cfg.seed, "evalnet-init", &[]);
    let mut net = EvalNet::new(evalnet_config_of(cfg), &mut init_rng);
    apply_params(&ckpt, &mut net)?;
    Ok(net)
}

pub fn train_stage(cfg: &PipelineConfig, stage: Stage, corpus: &PreparedCorpus, run_dir: &Path, resume: bool) -> Result<()> {
    match stage {
        Stage::Vqvae => train_vqvae(cfg, corpus, run_dir, resume),
        Stage::Encoder => train_encoder(cfg, corpus, run_dir, resume),
        Stage::Diffusion => train_diffusion(cfg, corpus, run_dir, resume),
        Stage::EvalClassifier => train_evalnet(cfg, corpus, run_dir, resume),
    }
}

// ── sampling ────────────────────────────────────────────────────────

pub enum CaptionSource {
    /// Pre-synthesized caption file.
    File(PathBuf),
    /// Synthesize a caption for this scene on the fly.
    Scene {
        spec: SceneSpec,
        language: Language,
        speaker: u32,
    },
}

#[derive(Serialize)]
pub struct GeneratedEntry {
    pub file: String,
    pub scene: Option<SceneSpec>,
    /// Stable scene identity used for retrieval correspondence.
    pub scene_key: Option<String>,
    pub language: Option<Language>,
    pub speaker: Option<u32>,
    pub seed: u64,
}

#[derive(Serialize)]
pub struct GeneratedManifest {
    pub seed: u64,
    pub entries: Vec<GeneratedEntry>,
}

/// Draw `count` images for one caption; writes per-sample PNGs, a contact
/// sheet, and a manifest; deterministic under the seed.
pub fn sample_images(
    cfg: &PipelineConfig,
    run_dir: &Path,
    source: &CaptionSource,
    count: usize,
    seed: u64,
    out_dir: &Path,
    allow_mismatch: bool,
) -> Result<Vec<PathBuf>> {
    let vq = load_vqvae(cfg, run_dir, allow_mismatch)?;
    let enc = load_encoder(cfg, run_dir, allow_mismatch)?;
    let (den, schedule) = load_diffusion(cfg, run_dir, allow_mismatch)?;

    let (caption, scene, language, speaker) = match source {
        CaptionSource::File(path) => (read_caption(path)?, None, None, None),
        CaptionSource::Scene {
            spec,
            language,
            speaker,
        } => {
            let mut crng = derive_rng(seed, "sample-caption", &[]);
            (
                crate::data::synthesize_caption(spec, *language, *speaker, &mut crng),
                Some(*spec),
                Some(*language),
                Some(*speaker),
            )
        }
    };
    let y = enc.embed_caption(&caption)?;
    let start = if cfg.diffusion_random_start {
        SamplerStart::RandomTokens
    } else {
        SamplerStart::AllMask
    };

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(count);
    let mut pixels_all = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = derive_rng(seed, "sample", &[i as u64]);
        let grid = den.sample(&y, &schedule, &mut rng, start)?;
        let pixels = vq.decode_tokens(&grid)?;
        let name = format!("sample_{:03}.png", i);
        write_png(&out_dir.join(&name), &pixels, IMAGE_SIZE, IMAGE_SIZE)?;
        files.push(out_dir.join(&name));
        pixels_all.push(pixels);
        entries.push(GeneratedEntry {
            file: name,
            scene,
            scene_key: scene.map(|s| s.index().to_string()),
            language,
            speaker,
            seed,
        });
    }

    // contact sheet
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols.max(1));
    let mut sheet = vec![0.0; rows * IMAGE_SIZE * cols * IMAGE_SIZE * 3];
    for (i, pixels) in pixels_all.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y_px in 0..IMAGE_SIZE {
            for x_px in 0..IMAGE_SIZE {
                let src = (y_px * IMAGE_SIZE + x_px) * 3;
                let dst =
                    ((r * IMAGE_SIZE + y_px) * cols * IMAGE_SIZE + c * IMAGE_SIZE + x_px) * 3;
                sheet[dst..dst + 3].copy_from_slice(&pixels[src..src + 3]);
            }
        }
    }
    write_png(
        &out_dir.join("grid.png"),
        &sheet,
        cols * IMAGE_SIZE,
        rows * IMAGE_SIZE,
    )?;

    let manifest = GeneratedManifest { seed, entries };
    std::fs::write(
        out_dir.join("generated_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(files)
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Serialize, Clone)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub extractor_checksum: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "png").unwrap_or(false)
                && p.file_name()
                    .map(|n| n != "grid.png")
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_images(files: &[PathBuf]) -> Result<Vec<Vec<f64>>> {
    files
        .iter()
        .map(|p| {
            let (px, w, h) = read_png(p)?;
            if w != IMAGE_SIZE || h != IMAGE_SIZE {
                return Err(StaError::invalid(
                    "evaluate",
                    format!("{} is {}x{}, expected {2}x{2}", p.display(), w, h),
                ));
            }
            Ok(px)
        })
        .collect()
}

/// FID / IS / Recall@k between a generated directory and a reference
/// directory of PNGs. Correspondence for retrieval comes from the
/// generated manifest when present, else from filename equality.
pub fn evaluate(
    cfg: &PipelineConfig,
    run_dir: &Path,
    generated_dir: &Path,
    reference_dir: &Path,
    k_override: Option<usize>,
    allow_mismatch: bool,
) -> Result<Vec<MetricReport>> {
    let net = load_evalnet(cfg, run_dir, allow_mismatch)?;
    let checksum = format!(
        "{:016x}",
        file_checksum(&checkpoint_path(run_dir, Stage::EvalClassifier))?
    );

    let gen_files = png_files(generated_dir)?;
    let ref_files = png_files(reference_dir)?;
    if gen_files.is_empty() || ref_files.is_empty() {
        return Err(StaError::invalid(
            "evaluate",
            format!(
                "empty directory: generated has {} images, reference has {}",
                gen_files.len(),
                ref_files.len()
            ),
        ));
    }
    let gen_images = load_images(&gen_files)?;
    let ref_images = load_images(&ref_files)?;

    let d = cfg.evalnet_feature_dim;
    let (gen_feats, gen_probs) = net.extract(&gen_images)?;
    let (ref_feats, _) = net.extract(&ref_images)?;

    let gen_stats = feature_stats(&gen_feats, gen_images.len(), d)?;
    let ref_stats = feature_stats(&ref_feats, ref_images.len(), d)?;
    let fid_value = fid(&gen_stats, &ref_stats)?;

    let splits = cfg.metrics_is_splits.min(gen_images.len()).max(1);
    let (is_mean, is_std) = inception_score_splits(
        &PredictionSet {
            classes: EVAL_CLASSES,
            rows: gen_probs,
        },
        splits,
    )?;

    // retrieval: reference images as queries, generated as candidates
    let scene_of_gen = correspondence(generated_dir, &gen_files)?;
    let scene_of_ref = correspondence(reference_dir, &ref_files)?;
    let mut ground_truth = Vec::new();
    let mut query_rows = Vec::new();
    for (qi, rs) in scene_of_ref.iter().enumerate() {
        let matches: Vec<usize> = scene_of_gen
            .iter()
            .enumerate()
            .filter(|(_, gs)| *gs == rs)
            .map(|(i, _)| i)
            .collect();
        if !matches.is_empty() {
            ground_truth.push(matches);
            query_rows.extend_from_slice(&ref_feats[qi * d..(qi + 1) * d]);
        }
    }
    if ground_truth.is_empty() {
        return Err(StaError::invalid(
            "evaluate",
            "no reference image corresponds to any generated image",
        ));
    }
    let k = k_override
        .unwrap_or(cfg.metrics_recall_k)
        .min(gen_images.len());
    let index = RetrievalIndex {
        d,
        candidates: gen_feats.clone(),
        ground_truth,
    };
    let n_queries = query_rows.len() / d;
    let recall = recall_at_k(&index, &query_rows, k)?;

    Ok(vec![
        MetricReport {
            metric: "fid".into(),
            value: fid_value,
            n: gen_images.len(),
            extractor_checksum: checksum.clone(),
            seed: cfg.seed,
            std: None,
            k: None,
            note: None,
        },
        MetricReport {
            metric: "is".into(),
            value: is_mean,
            n: gen_images.len(),
            extractor_checksum: checksum.clone(),
            seed: cfg.seed,
            std: Some(is_std),
            k: None,
            note: Some(format!("mean over {} splits", splits)),
        },
        MetricReport {
            metric: "recall_at_k".into(),
            value: recall,
            n: n_queries,
            extractor_checksum: checksum,
            seed: cfg.seed,
            std: None,
            k: Some(k),
            note: Some(
                "k scales the reference Recall@50-on-1000 convention to the \
                 candidate-set size (same retrieved fraction)"
                    .into(),
            ),
        },
    ])
}

/// Scene identity per file for retrieval correspondence. Sources, in
/// order: a `generated_manifest.json` in the directory (sampler output),
/// the corpus `manifest.json` one level up (reference image dirs), else
/// the bare file name (self-correspondence).
fn correspondence(dir: &Path, files: &[PathBuf]) -> Result<Vec<String>> {
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    let gen_manifest = dir.join("generated_manifest.json");
    if gen_manifest.exists() {
        let text = std::fs::read_to_string(&gen_manifest)?;
        let parsed: serde_json::Value = serde_json::from_str(&text)?;
        let mut by_file: BTreeMap<String, String> = BTreeMap::new();
        if let Some(entries) = parsed.get("entries").and_then(|e| e.as_array()) {
            for e in entries {
                let file = e.get("file").and_then(|f| f.as_str()).unwrap_or_default();
                let key = e
                    .get("scene_key")
                    .and_then(|s| s.as_str())
                    .map(|s| format!("scene:{}", s))
                    .unwrap_or_else(|| format!("file:{}", file));
                by_file.insert(file.to_string(), key);
            }
        }
        return names
            .iter()
            .map(|name| {
                by_file.get(name).cloned().ok_or_else(|| {
                    StaError::invalid(
                        "evaluate",
                        format!("{} missing from generated manifest", name),
                    )
                })
            })
            .collect();
    }

    if let Some(parent) = dir.parent() {
        let corpus_manifest = parent.join("manifest.json");
        if corpus_manifest.exists() {
            let manifest = crate::data::load_manifest(parent)?;
            let mut by_file: BTreeMap<String, String> = BTreeMap::new();
            for rec in &manifest.records {
                if let Some(name) = Path::new(&rec.image).file_name() {
                    by_file.insert(
                        name.to_string_lossy().into_owned(),
                        format!("scene:{}", rec.scene.index()),
                    );
                }
            }
            return Ok(names
                .iter()
                .map(|name| {
                    by_file
                        .get(name)
                        .cloned()
                        .unwrap_or_else(|| format!("file:{}", name))
                })
                .collect());
        }
    }

    Ok(names.into_iter().map(|n| format!("file:{}", n)).collect())
}

// ── speech-image retrieval evaluation ───────────────────────────────

#[derive(Serialize, Clone)]
pub struct RetrievalScores {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Serialize)]
pub struct RetrievalReport {
    pub speech_to_image: RetrievalScores,
    pub image_to_speech: RetrievalScores,
    pub per_language_speech_to_image_r1: BTreeMap<String, f64>,
    pub n_queries: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

/// Speech↔image retrieval with test-split captions as speech queries and
/// every scene image as a candidate (teacher embeddings on the image side).
pub fn retrieval_eval(
    cfg: &PipelineConfig,
    corpus: &PreparedCorpus,
    run_dir: &Path,
    encoder: Option<&SpeechEncoderParams>,
) -> Result<RetrievalReport> {
    let loaded;
    let enc = match encoder {
        Some(e) => e,
        None => {
            loaded = load_encoder(cfg, run_dir, false)?;
            &loaded
        }
    };
    let teacher = TeacherEmbedder::new(cfg.encoder_d_emb);
    let d = cfg.encoder_d_emb;

    let scenes = corpus.scene_images();
    let mut image_feats = Vec::with_capacity(scenes.len() * d);
    let mut scene_indices = Vec::with_capacity(scenes.len());
    for (spec, pixels) in &scenes {
        image_feats.extend(teacher.embed_image(pixels)?);
        scene_indices.push(spec.index());
    }

    let entries = corpus.caption_entries(Split::Test);
    if entries.is_empty() {
        return Err(StaError::Corpus("test split has no captions".into()));
    }
    let mut speech_feats = Vec::with_capacity(entries.len() * d);
    let mut speech_scene = Vec::with_capacity(entries.len());
    let mut speech_lang = Vec::with_capacity(entries.len());
    for (caption, spec, lang, _) in &entries {
        speech_feats.extend(enc.embed_caption(caption)?);
        speech_scene.push(spec.index());
        speech_lang.push(*lang);
    }

    // speech -> image
    let s2i_index = RetrievalIndex {
        d,
        candidates: image_feats.clone(),
        ground_truth: speech_scene
            .iter()
            .map(|s| {
                scene_indices
                    .iter()
                    .enumerate()
                    .filter(|(_, idx)| *idx == s)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect(),
    };
    let r_at = |index: &RetrievalIndex, queries: &[f64], k: usize| -> Result<f64> {
        recall_at_k(index, queries, k.min(index.n_candidates()))
    };
    let s2i = RetrievalScores {
        r1: r_at(&s2i_index, &speech_feats, 1)?,
        r5: r_at(&s2i_index, &speech_feats, 5)?,
        r10: r_at(&s2i_index, &speech_feats, 10)?,
    };

    // image -> speech: test-scene images query the caption pool
    let test_scene_ids: Vec<usize> = {
        let mut ids: Vec<usize> = speech_scene.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let mut i2s_queries = Vec::new();
    let mut i2s_truth = Vec::new();
    for sid in &test_scene_ids {
        if let Some(pos) = scene_indices.iter().position(|x| x == sid) {
            i2s_queries.extend_from_slice(&image_feats[pos * d..(pos + 1) * d]);
            i2s_truth.push(
                speech_scene
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| *s == sid)
                    .map(|(i, _)| i)
                    .collect::<Vec<usize>>(),
            );
        }
    }
    let i2s_index = RetrievalIndex {
        d,
        candidates: speech_feats.clone(),
        ground_truth: i2s_truth,
    };
    let i2s = RetrievalScores {
        r1: r_at(&i2s_index, &i2s_queries, 1)?,
        r5: r_at(&i2s_index, &i2s_queries, 5)?,
        r10: r_at(&i2s_index, &i2s_queries, 10)?,
    };

    // per-language speech -> image R@1
    let mut per_language = BTreeMap::new();
    for lang in corpus.manifest.languages.clone() {
        let rows: Vec<usize> = (0..entries.len())
            .filter(|&i| speech_lang[i] == lang)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut queries = Vec::with_capacity(rows.len() * d);
        let mut truth = Vec::with_capacity(rows.len());
        for &i in &rows {
            queries.extend_from_slice(&speech_feats[i * d..(i + 1) * d]);
            truth.push(s2i_index.ground_truth[i].clone());
        }
        let index = RetrievalIndex {
            d,
            candidates: image_feats.clone(),
            ground_truth: truth,
        };
        per_language.insert(lang.tag().to_string(), recall_at_k(&index, &queries, 1)?);
    }

    Ok(RetrievalReport {
        speech_to_image: s2i,
        image_to_speech: i2s,
        per_language_speech_to_image_r1: per_language,
        n_queries: entries.len(),
        n_candidates: scenes.len(),
        seed: cfg.seed,
    })
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
