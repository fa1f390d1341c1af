use std::sync::OnceLock;

use gtnb_core::checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, STAGE_FRAMEWORK, STAGE_GTN, STAGE_VQVAE};
use gtnb_core::config::{Config, FrameworkConfig, GptConfig, GtnConfig, VqConfig};
use gtnb_core::dataset::{genre_examples, holdout_split, read_manifest, ManifestEntry};
use gtnb_core::generate::{generate_dance, seed_codes, write_sidecar, GenerateOptions, GenreInjection};
use gtnb_core::genre::{GenreLabel, N_GENRES};
use gtnb_core::gtn::pretrain_gtn;
use gtnb_core::synth::make_synthetic_corpus;
use gtnb_core::train::{
    teacher_forced_accuracy, train_framework, training_genre_embedding, FrameworkClip, FrameworkEpochLog, FrameworkRun,
    StepLog, TrainObserver,
};
use gtnb_core::vq::train_vqvae;
use gtnb_core::Error;
use gtnb_nn::{ParameterStore, Tensor};

fn tiny_config() -> Config {
    Config {
        seed: 5,
        gtn: GtnConfig { channels: vec![4, 4, 8], embed_dim: 16, epochs: 2, crop_frames: 120, ..GtnConfig::default() },
        vqvae: VqConfig { codebook_size: 16, code_dim: 8, hidden: 12, epochs: 2, crop_frames: 64, ..VqConfig::default() },
        gpt: GptConfig { d_model: 16, heads: 2, blocks: 1, context: 30, temperature: 0.0 },
        framework: FrameworkConfig { epochs: 6, freeze_epoch: 3, crop_frames: 64, batch_size: 2, lr: 1e-3, ..FrameworkConfig::default() },
        ..Config::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    entries: Vec<ManifestEntry>,
    clips: Vec<FrameworkClip>,
    gtn: ModelCheckpoint,
    vq: ModelCheckpoint,
}

/// Two clips per genre and quickly trained stage checkpoints, built once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let entries = make_synthetic_corpus(dir.path(), 3, 2).unwrap();
        let cfg = tiny_config();
        let gtn = pretrain_gtn(&genre_examples(&entries, None).unwrap(), &cfg, |_| {}).unwrap();
        let poses: Vec<_> = entries.iter().map(|e| e.load_pose().unwrap()).collect();
        let vq = train_vqvae(&poses, &cfg, |_| {}).unwrap();
        let clips = entries
            .iter()
            .take(6)
            .map(|e| FrameworkClip {
                clip_id: e.clip_id.clone(),
                features: e.features(None).unwrap(),
                pose: e.load_pose().unwrap(),
                label: e.genre,
            })
            .collect();
        Fixture { _dir: dir, entries, clips, gtn, vq }
    })
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepLog>,
    epochs: Vec<FrameworkEpochLog>,
    gtn: Vec<ParameterStore<f32>>,
    gpt: Vec<ParameterStore<f32>>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, log: &StepLog) {
        self.steps.push(log.clone());
    }

    fn on_epoch(&mut self, log: &FrameworkEpochLog, params: &ParameterStore<f32>) {
        self.epochs.push(log.clone());
        self.gtn.push(params.subset("gtn"));
        self.gpt.push(params.subset("gpt"));
    }
}

fn train(cfg: &Config, run: FrameworkRun, rec: &mut Recorder) -> ModelCheckpoint {
    let f = fixture();
    train_framework(&f.clips, &f.gtn, &f.vq, cfg, run, rec).unwrap()
}

fn same(a: &ParameterStore<f32>, b: &ParameterStore<f32>) -> bool {
    a.names().eq(b.names()) && a.names().all(|n| a.get(n).unwrap().data() == b.get(n).unwrap().data())
}

#[test]
fn gtn_is_frozen_after_the_freeze_epoch_and_losses_add_up() {
    let cfg = tiny_config();
    let mut rec = Recorder::default();
    train(&cfg, FrameworkRun::default(), &mut rec);
    let freeze = cfg.framework.freeze_epoch;
    assert_eq!(rec.epochs.len(), cfg.framework.epochs);
    // Snapshots are indexed by epoch - 1.
    assert!(!same(&rec.gtn[freeze - 2], &rec.gtn[freeze - 1]), "GTN should still train in the freeze epoch");
    for e in freeze..cfg.framework.epochs {
        assert!(same(&rec.gtn[freeze - 1], &rec.gtn[e]), "GTN moved in epoch {}", e + 1);
        assert!(!same(&rec.gpt[e - 1], &rec.gpt[e]), "GPT stopped training in epoch {}", e + 1);
    }
    for log in &rec.steps {
        assert_eq!(log.gtn_frozen, log.epoch > freeze);
        let want = 1.0 * log.loss_gtn + 0.001 * log.loss_gpt;
        assert!((log.loss - want).abs() <= 1e-7, "{log:?}");
        assert!(log.loss_gtn.is_finite() && log.loss_gpt > 0.0);
    }
    // 6 clips in batches of 2.
    assert_eq!(rec.steps.len(), 3 * cfg.framework.epochs);
}

#[test]
fn teacher_forced_embedding_ignores_the_music() {
    let f = fixture();
    let cfg = Config { ..f.gtn.config.clone() };
    let label = GenreLabel::from_id(4).unwrap();
    let m1 = f.clips[0].features.mel.clone();
    let m2 = f.clips[5].features.mel.clone();
    let a = training_genre_embedding(&f.gtn.params, &cfg, &m1, Some(label)).unwrap();
    let b = training_genre_embedding(&f.gtn.params, &cfg, &m2, Some(label)).unwrap();
    assert_eq!(a, b);
    assert!(training_genre_embedding(&f.gtn.params, &cfg, &m1, None).is_err());
    let mut inferred = cfg.clone();
    inferred.framework.teacher_forcing = false;
    let c = training_genre_embedding(&f.gtn.params, &inferred, &m1, None).unwrap();
    let d = training_genre_embedding(&f.gtn.params, &inferred, &m2, None).unwrap();
    assert_ne!(c, d);
}

#[test]
fn runs_are_deterministic_and_resume_matches() {
    let cfg = tiny_config();
    let full = train(&cfg, FrameworkRun::default(), &mut Recorder::default());
    let again = train(&cfg, FrameworkRun::default(), &mut Recorder::default());
    assert_eq!(full.to_bytes(), again.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let half = train(&cfg, FrameworkRun { resume: None, stop_after: Some(2) }, &mut Recorder::default());
    let path = dir.path().join("half.gtnb");
    save_checkpoint(&half, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.to_bytes(), half.to_bytes());
    let resumed = train(&cfg, FrameworkRun { resume: Some(loaded), stop_after: None }, &mut Recorder::default());
    assert_eq!(resumed.to_bytes(), full.to_bytes());

    let mut other = cfg.clone();
    other.framework.lr = 2e-3;
    let f = fixture();
    let err = train_framework(&f.clips, &f.gtn, &f.vq, &other, FrameworkRun { resume: Some(half), stop_after: None }, &mut ())
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn checkpoint_bytes_round_trip() {
    let f = fixture();
    for ckpt in [&f.gtn, &f.vq] {
        let bytes = ckpt.to_bytes();
        assert_eq!(ModelCheckpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
    let mut bad = f.gtn.to_bytes();
    bad.truncate(bad.len() / 2);
    assert!(ModelCheckpoint::from_bytes(&bad).is_err());
}

#[test]
fn framework_input_errors() {
    let f = fixture();
    let cfg = tiny_config();
    let err = train_framework(&f.clips, &f.vq, &f.vq, &cfg, FrameworkRun::default(), &mut ()).unwrap_err();
    assert!(matches!(err, Error::StageMismatch { .. }), "{err}");
    let mut unlabeled = f.clips[..2].to_vec();
    unlabeled[1].label = None;
    let err = train_framework(&unlabeled, &f.gtn, &f.vq, &cfg, FrameworkRun::default(), &mut ()).unwrap_err();
    assert!(err.to_string().contains(&unlabeled[1].clip_id), "{err}");
    let mut short = f.clips[..1].to_vec();
    short[0].pose = short[0].pose.crop(0, 16).unwrap();
    assert!(train_framework(&short, &f.gtn, &f.vq, &cfg, FrameworkRun::default(), &mut ()).is_err());
}

#[test]
fn generation_contract() {
    let f = fixture();
    let cfg = tiny_config();
    let ckpt = train(&cfg, FrameworkRun::default(), &mut Recorder::default());
    assert_eq!(ckpt.stage, STAGE_FRAMEWORK);
    let acc = teacher_forced_accuracy(&ckpt, &f.clips).unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let clip = &f.clips[0];
    let seed = seed_codes(&ckpt, &clip.pose).unwrap();
    let opts = GenerateOptions::default();
    let a = generate_dance(&clip.features, seed, &ckpt, &opts).unwrap();
    let b = generate_dance(&clip.features, seed, &ckpt, &opts).unwrap();
    assert_eq!(a.pose.frames(), clip.features.frames());
    assert_eq!(a.codes.len(), clip.features.frames() / 8);
    assert_eq!((a.codes.upper[0], a.codes.lower[0]), seed);
    assert_eq!(a.pose.data.data(), b.pose.data.data());
    assert_eq!(a.embedding, a.inferred.embedding);

    assert!(generate_dance(&clip.features, (16, 0), &ckpt, &opts).is_err());
    assert!(generate_dance(&clip.features, seed, &f.gtn, &opts).is_err());
    let bad = GenerateOptions { genre: Some(GenreInjection::Weights(vec![1.0; 3])) };
    assert!(generate_dance(&clip.features, seed, &ckpt, &bad).is_err());

    let injected = GenerateOptions { genre: Some(GenreInjection::Label(GenreLabel::from_id(7).unwrap())) };
    let c = generate_dance(&clip.features, seed, &ckpt, &injected).unwrap();
    assert_ne!(c.embedding, a.inferred.embedding);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dance.json");
    write_sidecar(&path, &c, &ckpt, &injected, "seed.csv", None).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["frames"], 240);
    assert_eq!(v["injected_genre"], GenreLabel::from_id(7).unwrap().code());
    assert_eq!(v["genre_weights"].as_array().unwrap().len(), N_GENRES);
    assert_eq!(v["codes_upper"].as_array().unwrap().len(), 30);
}

#[test]
fn stage_checkpoints_carry_their_stage() {
    let f = fixture();
    assert_eq!(f.gtn.stage, STAGE_GTN);
    assert_eq!(f.vq.stage, STAGE_VQVAE);
    assert!(f.gtn.clone().require_stage(STAGE_VQVAE).is_err());
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ea = make_synthetic_corpus(a.path(), 11, 1).unwrap();
    make_synthetic_corpus(b.path(), 11, 1).unwrap();
    assert_eq!(ea.len(), N_GENRES);
    for e in &ea {
        let rel = e.wav_path.as_ref().unwrap().strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        let rel = e.pose_path.as_ref().unwrap().strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
    assert_eq!(read_manifest(&a.path().join("manifest.tsv")).unwrap(), ea);
}

#[test]
fn synthetic_genres_separate_by_mean_mel() {
    // Nearest class centroid of the time-averaged mel spectrum, fitted on
    // the first clip of each genre and tested on the second.
    let f = fixture();
    let (train, test) = holdout_split(&f.entries, 1);
    let mean = |e: &ManifestEntry| -> Vec<f64> {
        let mel: Tensor<f32> = e.features(None).unwrap().mel;
        (0..mel.cols()).map(|c| (0..mel.rows()).map(|r| mel.get2(r, c) as f64).sum::<f64>() / mel.rows() as f64).collect()
    };
    let centroids: Vec<(GenreLabel, Vec<f64>)> = train.iter().map(|e| (e.genre.unwrap(), mean(e))).collect();
    for e in &test {
        let m = mean(e);
        let best = centroids
            .iter()
            .min_by(|x, y| {
                let d = |c: &Vec<f64>| c.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                d(&x.1).total_cmp(&d(&y.1))
            })
            .unwrap();
        assert_eq!(best.0, e.genre.unwrap(), "{}", e.clip_id);
    }
}
