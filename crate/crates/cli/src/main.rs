//! `gtnb`: synthetic corpus, features, the three training stages, dance
//! generation, evaluation and embedding export.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.

mod logging;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtnb_core::audio::{extract_features, load_audio, write_feature_cache, SAMPLE_RATE};
use gtnb_core::checkpoint::{load_stage, save_checkpoint, STAGE_FRAMEWORK, STAGE_GTN, STAGE_VQVAE};
use gtnb_core::config::Config;
use gtnb_core::dataset::{genre_examples, holdout_split, read_manifest, ManifestEntry};
use gtnb_core::generate::{generate_dance, seed_codes, write_sidecar, GenerateOptions, GenreInjection};
use gtnb_core::genre::GenreLabel;
use gtnb_core::gtn::{export_embeddings, genre_accuracy, pretrain_gtn};
use gtnb_core::metrics::{evaluate_suite, write_report};
use gtnb_core::pose::{read_pose_csv, write_pose_csv};
use gtnb_core::synth::{make_synthetic_corpus, DEFAULT_CLIPS_PER_GENRE};
use gtnb_core::train::{train_framework, FrameworkClip, FrameworkEpochLog, FrameworkRun, StepLog, TrainObserver};
use gtnb_core::vq::{reconstruction_mse, train_vqvae, DOWNSAMPLE};
use gtnb_core::Error;
use gtnb_nn::ParameterStore;

#[derive(Parser, Debug)]
#[command(name = "gtnb", version, about = "Genre-conditioned music-to-dance pipeline")]
struct Cli {
    /// TOML config; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and GTNB_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Debug-level logging.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic 10-genre corpus (audio, poses, manifest).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CLIPS_PER_GENRE)]
        clips_per_genre: usize,
    },
    /// Extract and cache audio features for every clip of a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for `<clip_id>.gtnf` files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the genre token network.
    PretrainGtn {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        crop_frames: Option<usize>,
    },
    /// Train the half-body VQ-VAEs.
    TrainVqvae {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        crop_frames: Option<usize>,
        #[arg(long)]
        codebook_size: Option<usize>,
        #[arg(long)]
        beta_commit: Option<f64>,
    },
    /// Train the GPT and fine-tune the GTN.
    TrainFramework {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        gtn: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        freeze_epoch: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Build the genre embedding from inferred weights instead of labels.
        #[arg(long)]
        no_teacher_forcing: bool,
        #[arg(long)]
        crop_frames: Option<usize>,
        /// Continue from a framework checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also log every optimizer step.
        #[arg(long)]
        log_steps: bool,
    },
    /// Generate a dance for one music clip.
    Generate {
        #[arg(long)]
        music: PathBuf,
        /// Pose CSV whose first 8 frames give the seed codes.
        #[arg(long)]
        seed_pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "framework.gtnb")]
        framework: PathBuf,
        /// Inject this genre (code such as `BR`) instead of the inferred one.
        #[arg(long)]
        genre: Option<String>,
    },
    /// Compute FID_k, FID_g, DIV_k, DIV_g and BAS.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// CSV file to append a row to.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        bas_sigma: Option<f64>,
    },
    /// Write genre weights and embeddings of every clip to CSV.
    ExportEmbeddings {
        #[arg(long)]
        gtn: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature cache directory (read if present, filled otherwise).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Leave out the last N clips of each genre.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args, Debug)]
struct StageArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config(cli: &Cli) -> gtnb_core::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    set(&mut cfg.seed, cli.seed);
    Ok(cfg)
}

fn split(data: &DataArgs) -> gtnb_core::Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let entries = read_manifest(&data.manifest)?;
    if let Some(c) = &data.cache {
        std::fs::create_dir_all(c).map_err(gtnb_core::error::io_at(c))?;
    }
    Ok(holdout_split(&entries, data.holdout))
}

struct Progress {
    steps: bool,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, log: &StepLog) {
        if self.steps {
            logging::record(log);
        }
    }

    fn on_epoch(&mut self, log: &FrameworkEpochLog, _params: &ParameterStore<f32>) {
        logging::record(log);
    }
}

fn framework_clips(entries: &[ManifestEntry], cache: Option<&Path>) -> gtnb_core::Result<Vec<FrameworkClip>> {
    entries
        .iter()
        .map(|e| {
            Ok(FrameworkClip {
                clip_id: e.clip_id.clone(),
                features: e.features(cache)?,
                pose: e.load_pose()?,
                label: e.genre,
            })
        })
        .collect()
}

fn run(cli: Cli) -> gtnb_core::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::SynthCorpus { out, clips_per_genre } => {
            let entries = make_synthetic_corpus(&out, cfg.seed, clips_per_genre)?;
            log::info!("wrote {} clips to {}", entries.len(), out.display());
        }
        Command::Features { manifest, out } => {
            std::fs::create_dir_all(&out).map_err(gtnb_core::error::io_at(&out))?;
            let entries = read_manifest(&manifest)?;
            for e in &entries {
                let f = extract_features(&load_audio(e.wav()?, SAMPLE_RATE)?)?;
                write_feature_cache(&out.join(format!("{}.gtnf", e.clip_id)), &f)?;
            }
            log::info!("cached features for {} clips in {}", entries.len(), out.display());
        }
        Command::PretrainGtn { data, out, stage, crop_frames } => {
            set(&mut cfg.gtn.epochs, stage.epochs);
            set(&mut cfg.gtn.batch_size, stage.batch_size);
            set(&mut cfg.gtn.lr, stage.lr);
            set(&mut cfg.gtn.crop_frames, crop_frames);
            cfg.validate()?;
            let (train, held) = split(&data)?;
            let cache = data.cache.as_deref();
            let tr = genre_examples(&train, cache)?;
            let ckpt = pretrain_gtn(&tr, &cfg, logging::record)?;
            if !held.is_empty() {
                let acc = genre_accuracy(&ckpt.params, &cfg.gtn, &genre_examples(&held, cache)?)?;
                logging::record(&serde_json::json!({ "stage": STAGE_GTN, "heldout_clips": held.len(), "heldout_accuracy": acc }));
            }
            save_checkpoint(&ckpt, &out)?;
        }
        Command::TrainVqvae { data, out, stage, crop_frames, codebook_size, beta_commit } => {
            set(&mut cfg.vqvae.epochs, stage.epochs);
            set(&mut cfg.vqvae.batch_size, stage.batch_size);
            set(&mut cfg.vqvae.lr, stage.lr);
            set(&mut cfg.vqvae.crop_frames, crop_frames);
            set(&mut cfg.vqvae.codebook_size, codebook_size);
            set(&mut cfg.vqvae.beta_commit, beta_commit);
            cfg.validate()?;
            let (train, held) = split(&data)?;
            let poses = train.iter().map(|e| e.load_pose()).collect::<gtnb_core::Result<Vec<_>>>()?;
            let ckpt = train_vqvae(&poses, &cfg, logging::record)?;
            if !held.is_empty() {
                let hp = held.iter().map(|e| e.load_pose()).collect::<gtnb_core::Result<Vec<_>>>()?;
                let mse = reconstruction_mse(&ckpt.params, &cfg.vqvae, &hp)?;
                logging::record(&serde_json::json!({ "stage": STAGE_VQVAE, "heldout_clips": hp.len(), "heldout_recon_mse": mse }));
            }
            save_checkpoint(&ckpt, &out)?;
        }
        Command::TrainFramework {
            data,
            gtn,
            vqvae,
            out,
            stage,
            freeze_epoch,
            alpha,
            beta,
            no_teacher_forcing,
            crop_frames,
            resume,
            log_steps,
        } => {
            let f = &mut cfg.framework;
            set(&mut f.epochs, stage.epochs);
            set(&mut f.batch_size, stage.batch_size);
            set(&mut f.lr, stage.lr);
            set(&mut f.freeze_epoch, freeze_epoch);
            set(&mut f.alpha, alpha);
            set(&mut f.beta, beta);
            set(&mut f.crop_frames, crop_frames);
            if no_teacher_forcing {
                f.teacher_forcing = false;
            }
            let gtn_ckpt = load_stage(&gtn, STAGE_GTN)?;
            let vq_ckpt = load_stage(&vqvae, STAGE_VQVAE)?;
            let (train, _) = split(&data)?;
            let clips = framework_clips(&train, data.cache.as_deref())?;
            let run = FrameworkRun {
                resume: resume.map(|p| load_stage(&p, STAGE_FRAMEWORK)).transpose()?,
                stop_after: None,
            };
            let ckpt = train_framework(&clips, &gtn_ckpt, &vq_ckpt, &cfg, run, &mut Progress { steps: log_steps })?;
            save_checkpoint(&ckpt, &out)?;
        }
        Command::Generate { music, seed_pose, out, framework, genre } => {
            let ckpt = load_stage(&framework, STAGE_FRAMEWORK)?;
            let mut feats = extract_features(&load_audio(&music, SAMPLE_RATE)?)?;
            let usable = feats.frames() / DOWNSAMPLE * DOWNSAMPLE;
            if usable == 0 {
                return Err(Error::Invalid(format!("{} is shorter than {DOWNSAMPLE} frames", music.display())));
            }
            if usable != feats.frames() {
                log::warn!("dropping the last {} music frames to reach a multiple of {DOWNSAMPLE}", feats.frames() - usable);
                feats = feats.crop(0, usable)?;
            }
            let seed = seed_codes(&ckpt, &read_pose_csv(&seed_pose)?)?;
            let opts = GenerateOptions { genre: genre.map(|g| GenreLabel::from_code(&g).map(GenreInjection::Label)).transpose()? };
            let dance = generate_dance(&feats, seed, &ckpt, &opts)?;
            write_pose_csv(&out, &dance.pose)?;
            let sidecar = out.with_extension("json");
            write_sidecar(&sidecar, &dance, &ckpt, &opts, &seed_pose.display().to_string(), Some(&music))?;
            log::info!("wrote {} frames to {}", dance.pose.frames(), out.display());
        }
        Command::Evaluate { generated, reference, out, csv, bas_sigma } => {
            set(&mut cfg.eval.bas_sigma, bas_sigma);
            cfg.validate()?;
            let report = evaluate_suite(&generated, &reference, &cfg)?;
            write_report(&report, &out, csv.as_deref())?;
            logging::record(&report);
        }
        Command::ExportEmbeddings { gtn, manifest, out, cache } => {
            let ckpt = load_stage(&gtn, STAGE_GTN)?;
            let entries = read_manifest(&manifest)?;
            if let Some(c) = &cache {
                std::fs::create_dir_all(c).map_err(gtnb_core::error::io_at(c))?;
            }
            export_embeddings(&ckpt, &genre_examples(&entries, cache.as_deref())?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    logging::init(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
