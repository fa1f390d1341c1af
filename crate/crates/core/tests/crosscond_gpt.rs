use gtnb_core::audio::{columns, MusicFeatureClip, FRAME_RATE, N_MELS};
use gtnb_core::config::GptConfig;
use gtnb_core::gpt::{assemble_condition, gpt_forward, gpt_logits, gpt_loss, ActionDistribution, ConditionSequence, CrossCondGpt};
use gtnb_core::gtn::GenreInference;
use gtnb_core::selfcheck::code_loss_error;
use gtnb_core::vq::PoseCodeSequence;
use gtnb_nn::{ParameterStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(frames: usize, seed: u64) -> MusicFeatureClip {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |w: usize| Tensor::new(vec![frames, w], (0..frames * w).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    MusicFeatureClip { mel: t(N_MELS), music: t(columns::WIDTH), energy: t(1), beat_frames: vec![], frame_rate: FRAME_RATE }
}

/// Initialized model with non-zero heads so logits depend on the input.
fn model(cfg: &GptConfig, codebook: usize, seed: u64) -> ParameterStore<f32> {
    let mut s = ParameterStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    CrossCondGpt::new(cfg, codebook).init(&mut s, &mut r).unwrap();
    for h in ["gpt.head_upper.w", "gpt.head_lower.w"] {
        let shape = s.get(h).unwrap().shape().to_vec();
        s.set(h, gtnb_nn::layers::uniform(&mut r, &shape, 0.5));
    }
    s
}

fn genre(d: usize, v: f64) -> GenreInference {
    GenreInference { weights: vec![0.1; 10], embedding: (0..d).map(|i| v * (i as f64 - 3.0)).collect() }
}

#[test]
fn condition_has_two_code_rate_segments() {
    let cfg = GptConfig::default();
    let s = model(&cfg, 512, 1);
    let c = assemble_condition(&s, &cfg, 512, &features(240, 2), &genre(128, 0.0)).unwrap();
    assert_eq!((c.energy.shape(), c.music.shape()), (&[30, 128][..], &[30, 128][..]));
    assert!(assemble_condition(&s, &cfg, 512, &features(241, 2), &genre(128, 0.0)).is_err());
}

#[test]
fn genre_embedding_is_added_to_every_step() {
    let cfg = GptConfig { d_model: 16, ..GptConfig::default() };
    let s = model(&cfg, 8, 3);
    let f = features(64, 4);
    let plain = assemble_condition(&s, &cfg, 8, &f, &genre(16, 0.0)).unwrap();
    let (ga, gb) = (genre(16, 0.5), genre(16, -0.25));
    let a = assemble_condition(&s, &cfg, 8, &f, &ga).unwrap();
    let b = assemble_condition(&s, &cfg, 8, &f, &gb).unwrap();
    for (seg_p, seg_a, seg_b) in [(&plain.energy, &a.energy, &b.energy), (&plain.music, &a.music, &b.music)] {
        for r in 0..seg_p.rows() {
            for c in 0..16 {
                let (p, x, y) = (seg_p.get2(r, c) as f64, seg_a.get2(r, c) as f64, seg_b.get2(r, c) as f64);
                assert!((x - p - ga.embedding[c]).abs() < 1e-5);
                assert!(((x - y) - (ga.embedding[c] - gb.embedding[c])).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn zero_heads_give_uniform_rows_at_default_size() {
    let cfg = GptConfig::default();
    let mut s = ParameterStore::new();
    CrossCondGpt::new(&cfg, 512).init(&mut s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let c = assemble_condition(&s, &cfg, 512, &features(240, 6), &genre(128, 0.1)).unwrap();
    let codes = PoseCodeSequence { upper: (0..30).collect(), lower: (100..130).collect(), downsample_rate: 8 };
    let a = gpt_forward(&s, &cfg, 512, &c, &codes).unwrap();
    assert_eq!((a.upper.shape(), a.lower.shape()), (&[30, 512][..], &[30, 512][..]));
    assert!(a.upper.data().iter().chain(a.lower.data()).all(|p| (p - 1.0 / 512.0).abs() < 1e-12));
    let want = 2.0 * 512f64.ln();
    let uniform = ActionDistribution { upper: a.upper.clone(), lower: a.lower.clone() };
    assert!((gpt_loss(&uniform, &codes).unwrap() - want).abs() < 1e-6);
}

#[test]
fn two_step_loss_is_the_single_prediction() {
    let k = 4;
    let mut up = Tensor::<f64>::zeros(&[2, k]);
    let mut lo = Tensor::<f64>::zeros(&[2, k]);
    up.data_mut()[..k].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
    lo.data_mut()[..k].copy_from_slice(&[0.25, 0.25, 0.4, 0.1]);
    up.data_mut()[k..].copy_from_slice(&[0.25; 4]);
    lo.data_mut()[k..].copy_from_slice(&[0.25; 4]);
    let codes = PoseCodeSequence { upper: vec![0, 3], lower: vec![1, 2], downsample_rate: 8 };
    let l = gpt_loss(&ActionDistribution { upper: up, lower: lo }, &codes).unwrap();
    assert!((l - (-(0.4f64.ln()) - 0.4f64.ln())).abs() < 1e-12);
    let short = PoseCodeSequence { upper: vec![0], lower: vec![1], downsample_rate: 8 };
    assert!(gpt_loss(&ActionDistribution { upper: Tensor::zeros(&[2, k]), lower: Tensor::zeros(&[2, k]) }, &short).is_err());
}

#[test]
fn loss_gradient_at_toy_size() {
    let err = code_loss_error(7).unwrap();
    assert!(err < 1e-5, "{err}");
}

/// Perturbs step `t` of one segment at a time and checks that no output row
/// before `t` moves, in either head, bit for bit.
#[test]
fn no_future_leakage_in_any_segment() {
    let cfg = GptConfig { d_model: 16, heads: 2, blocks: 2, context: 6, temperature: 0.0 };
    let k = 12;
    let s = model(&cfg, k, 8);
    let steps = 6;
    let base_cond = assemble_condition(&s, &cfg, k, &features(steps * 8, 9), &genre(16, 0.2)).unwrap();
    let base_codes = PoseCodeSequence { upper: vec![1, 4, 7, 2, 0, 11], lower: vec![3, 3, 9, 5, 8, 6], downsample_rate: 8 };
    let (bu, bl) = gpt_logits(&s, &cfg, k, &base_cond, &base_codes).unwrap();
    let bump = |t: &Tensor<f32>, row: usize| {
        let mut t = t.clone();
        let c = t.cols();
        t.data_mut()[row * c..(row + 1) * c].iter_mut().for_each(|v| *v += 0.75);
        t
    };
    for seg in 0..4 {
        for t in 0..steps {
            let mut cond = base_cond.clone();
            let mut codes = base_codes.clone();
            match seg {
                0 => cond = ConditionSequence { energy: bump(&cond.energy, t), music: cond.music },
                1 => cond = ConditionSequence { energy: cond.energy, music: bump(&cond.music, t) },
                2 => codes.upper[t] = (codes.upper[t] + 5) % k,
                _ => codes.lower[t] = (codes.lower[t] + 5) % k,
            }
            let (u, l) = gpt_logits(&s, &cfg, k, &cond, &codes).unwrap();
            for r in 0..t {
                assert_eq!(u.row(r), bu.row(r), "segment {seg} step {t} leaked into upper row {r}");
                assert_eq!(l.row(r), bl.row(r), "segment {seg} step {t} leaked into lower row {r}");
            }
            // The perturbed step itself must be visible.
            assert!(u.row(t) != bu.row(t) || l.row(t) != bl.row(t), "segment {seg} step {t} had no effect");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn action_rows_are_probability_vectors(seed in any::<u64>(), steps in 1usize..5) {
        let cfg = GptConfig { d_model: 8, heads: 2, blocks: 1, context: 4, temperature: 0.0 };
        let s = model(&cfg, 6, seed);
        let c = assemble_condition(&s, &cfg, 6, &features(steps * 8, seed ^ 1), &genre(8, 0.3)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let codes = PoseCodeSequence {
            upper: (0..steps).map(|_| r.gen_range(0..6)).collect(),
            lower: (0..steps).map(|_| r.gen_range(0..6)).collect(),
            downsample_rate: 8,
        };
        let a = gpt_forward(&s, &cfg, 6, &c, &codes).unwrap();
        for t in [&a.upper, &a.lower] {
            for row in 0..t.rows() {
                prop_assert!((t.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
