//! `sta` — generate the corpus, train the pipeline stages, sample images
//! from captions, and evaluate.

use clap::{Parser, Subcommand};
use sta_core::config::PipelineConfig;
use sta_core::data::{generate_corpus, CorpusConfig, Language, SceneSpec};
use sta_core::error::{Result, StaError};
use sta_core::pipeline::{
    evaluate, retrieval_eval, sample_images, train_stage, CaptionSource, PreparedCorpus, Stage,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sta", about = "Speech-to-image pipeline: contrastive speech encoder + discrete diffusion over VQ tokens")]
struct Cli {
    /// Configuration file (flat `section.key = value` format).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config-derived location.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate the synthetic paired corpus on disk.
    GenData {
        /// Overwrite a non-empty target directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one pipeline stage.
    Train {
        /// vqvae | encoder | diffusion | eval-classifier
        #[arg(long)]
        stage: String,
        /// Continue from the stage's resume checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample images from a caption file or an on-the-fly scene caption.
    Sample {
        /// Caption file (.stac) to condition on.
        #[arg(long)]
        caption: Option<PathBuf>,
        /// Scene spec, e.g. `shape=circle,color=red,size=large,pos=4`.
        #[arg(long)]
        scene: Option<String>,
        /// Caption language for --scene (a | b).
        #[arg(long, default_value = "a")]
        language: String,
        /// Speaker id for --scene.
        #[arg(long, default_value_t = 0)]
        speaker: u32,
        /// Number of samples to draw.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Proceed despite checkpoint/config digest mismatches.
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// FID / IS / Recall@k between generated and reference image dirs.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Retrieval cutoff; defaults to metrics.recall_k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Speech↔image retrieval table over the held-out test split.
    RetrievalEval {},
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let run_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.run_dir));

    match &cli.command {
        Commands::GenData { force } => {
            let dir = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.corpus_dir));
            if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
                if !*force {
                    return Err(StaError::Corpus(format!(
                        "{} is not empty; pass --force to overwrite",
                        dir.display()
                    )));
                }
                std::fs::remove_dir_all(&dir)?;
            }
            let corpus_cfg = CorpusConfig {
                n_scenes: cfg.corpus_scenes,
                languages: cfg.languages(),
                speakers_per_caption: cfg.corpus_speakers,
                repeat_factor: cfg.corpus_repeat_factor,
                test_fraction: cfg.corpus_test_fraction,
                dev_fraction: cfg.corpus_dev_fraction,
            };
            let manifest = generate_corpus(&corpus_cfg, cfg.seed, &dir)?;
            let langs: Vec<&str> = manifest.languages.iter().map(|l| l.tag()).collect();
            let counts = |s: sta_core::data::Split| {
                manifest.records.iter().filter(|r| r.split == s).count()
            };
            println!(
                "corpus: {} scenes, languages {{{}}}, {} speakers/caption, {} records \
                 (train {}, dev {}, test {}) -> {}",
                manifest.n_scenes,
                langs.join(","),
                manifest.speakers_per_caption,
                manifest.records.len(),
                counts(sta_core::data::Split::Train),
                counts(sta_core::data::Split::Dev),
                counts(sta_core::data::Split::Test),
                dir.display()
            );
            Ok(())
        }
        Commands::Train { stage, resume } => {
            let stage = Stage::parse(stage)?;
            let corpus = PreparedCorpus::load(&PathBuf::from(&cfg.corpus_dir))?;
            train_stage(&cfg, stage, &corpus, &run_dir, *resume)?;
            println!(
                "stage {} trained; checkpoint at {}",
                stage.tag(),
                sta_core::pipeline::checkpoint_path(&run_dir, stage).display()
            );
            Ok(())
        }
        Commands::Sample {
            caption,
            scene,
            language,
            speaker,
            count,
            allow_mismatch,
        } => {
            let source = match (caption, scene) {
                (Some(path), None) => CaptionSource::File(path.clone()),
                (None, Some(spec)) => CaptionSource::Scene {
                    spec: SceneSpec::parse(spec)?,
                    language: Language::parse(language)?,
                    speaker: *speaker,
                },
                _ => {
                    return Err(StaError::invalid(
                        "sample",
                        "pass exactly one of --caption or --scene",
                    ))
                }
            };
            let out_dir = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.run_dir).join("samples"));
            let files = sample_images(
                &cfg,
                &PathBuf::from(&cfg.run_dir),
                &source,
                *count,
                cfg.seed,
                &out_dir,
                *allow_mismatch,
            )?;
            println!("{} samples + grid written to {}", files.len(), out_dir.display());
            Ok(())
        }
        Commands::Evaluate {
            generated,
            reference,
            k,
            allow_mismatch,
        } => {
            let reports = evaluate(&cfg, &run_dir, generated, reference, *k, *allow_mismatch)?;
            let json = serde_json::to_string_pretty(&reports).map_err(StaError::from)?;
            std::fs::create_dir_all(&run_dir)?;
            std::fs::write(run_dir.join("metrics.json"), &json)?;
            println!("{}", json);
            Ok(())
        }
        Commands::RetrievalEval {} => {
            let corpus = PreparedCorpus::load(&PathBuf::from(&cfg.corpus_dir))?;
            let report = retrieval_eval(&cfg, &corpus, &PathBuf::from(&cfg.run_dir), None)?;
            let json = serde_json::to_string_pretty(&report).map_err(StaError::from)?;
            std::fs::create_dir_all(&run_dir)?;
            std::fs::write(run_dir.join("retrieval.json"), &json)?;
            println!("{}", json);
            println!(
                "speech->image R@1 {:.2}  R@5 {:.2}  R@10 {:.2}",
                report.speech_to_image.r1, report.speech_to_image.r5, report.speech_to_image.r10
            );
            println!(
                "image->speech R@1 {:.2}  R@5 {:.2}  R@10 {:.2}",
                report.image_to_speech.r1, report.image_to_speech.r5, report.image_to_speech.r10
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
