use gtnb_core::config::VqConfig;
use gtnb_core::pose::{merge_body, split_body, PoseSequence, POSE_FPS, POSE_WIDTH};
use gtnb_core::selfcheck::vq_loss_error;
use gtnb_core::vq::{
    nearest_codes, pose_to_codes, quantize, vq_decode, vq_encode, vqvae_loss, Half, HalfVq, PoseCodeSequence,
};
use gtnb_nn::{ParameterStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> VqConfig {
    VqConfig { codebook_size: 16, code_dim: 8, hidden: 12, ..VqConfig::default() }
}

fn store(cfg: &VqConfig, seed: u64) -> ParameterStore<f32> {
    let mut s = ParameterStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for h in Half::BOTH {
        let vq = HalfVq::new(h, cfg);
        vq.init(&mut s, &mut r).unwrap();
        let book = gtnb_nn::layers::uniform(&mut r, &[cfg.codebook_size, cfg.code_dim], 1.0);
        s.set(vq.codebook_name(), book);
    }
    s
}

fn random_pose(frames: usize, seed: u64) -> PoseSequence {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * POSE_WIDTH).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    PoseSequence::new(Tensor::new(vec![frames, POSE_WIDTH], data).unwrap(), POSE_FPS).unwrap()
}

#[test]
fn split_widths_and_zero_pose() {
    let s = split_body(&Tensor::zeros(&[5, POSE_WIDTH])).unwrap();
    assert_eq!((s.upper.cols(), s.lower.cols()), (39, 33));
    assert!(s.upper.data().iter().chain(s.lower.data()).all(|v| *v == 0.0));
    assert!(split_body(&Tensor::zeros(&[5, 71])).is_err());
}

#[test]
fn encoder_downsamples_by_eight() {
    let cfg = small();
    let s = store(&cfg, 1);
    let p = random_pose(240, 2);
    let split = split_body(&p.data).unwrap();
    assert_eq!(vq_encode(&s, &cfg, Half::Upper, &split.upper).unwrap().shape(), &[30, 8]);
    let p8 = random_pose(8, 3);
    let split8 = split_body(&p8.data).unwrap();
    assert_eq!(vq_encode(&s, &cfg, Half::Lower, &split8.lower).unwrap().shape(), &[1, 8]);
    let bad = split_body(&random_pose(20, 4).data).unwrap();
    let err = vq_encode(&s, &cfg, Half::Upper, &bad.upper).unwrap_err().to_string();
    assert!(err.contains("crop"), "{err}");
}

#[test]
fn zero_input_with_zero_biases_gives_zero_latent() {
    let cfg = small();
    let mut s = store(&cfg, 5);
    let names: Vec<String> = s.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for n in names {
        s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let z = vq_encode(&s, &cfg, Half::Upper, &Tensor::zeros(&[16, 39])).unwrap();
    assert!(z.data().iter().all(|v| *v == 0.0));
}

#[test]
fn quantize_examples() {
    let book = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let q = |x: f64, y: f64| nearest_codes(&Tensor::new(vec![1, 2], vec![x, y]).unwrap(), &book).unwrap()[0];
    assert_eq!(q(0.9, 0.8), 1);
    assert_eq!(q(0.5, 0.5), 0);
    let (codes, quant) = quantize(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), &book).unwrap();
    assert_eq!(codes, vec![1]);
    assert_eq!(quant.data(), &[1.0, 1.0]);
    assert!(nearest_codes(&Tensor::<f64>::zeros(&[1, 2]), &Tensor::zeros(&[0, 2])).is_err());
}

#[test]
fn decoder_upsamples_by_eight_and_rejects_bad_codes() {
    let cfg = small();
    let s = store(&cfg, 6);
    let codes = PoseCodeSequence { upper: vec![3; 30], lower: vec![5; 30], downsample_rate: 8 };
    let pose = vq_decode(&s, &cfg, &codes).unwrap();
    assert_eq!((pose.frames(), pose.data.cols()), (240, 72));
    let bad = PoseCodeSequence { upper: vec![16], lower: vec![0], downsample_rate: 8 };
    assert!(vq_decode(&s, &cfg, &bad).is_err());
}

#[test]
fn pose_codes_are_deterministic_and_in_range() {
    let cfg = small();
    let s = store(&cfg, 7);
    let p = random_pose(240, 8);
    let a = pose_to_codes(&s, &cfg, &p).unwrap();
    assert_eq!((a.upper.len(), a.lower.len()), (30, 30));
    assert!(a.upper.iter().chain(&a.lower).all(|c| *c < 16));
    assert_eq!(a, pose_to_codes(&s, &cfg, &p).unwrap());
}

#[test]
fn loss_examples() {
    let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
    let z = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
    assert_eq!(vqvae_loss(&x, &x, &z, &z, 0.25).unwrap(), 0.0);
    // Latent offset δ = (0.1, -0.3) from its code: (1 + β)·mean(δ²).
    let q = Tensor::new(vec![1, 2], vec![0.9, -1.7]).unwrap();
    let want = 1.25 * (0.01 + 0.09) / 2.0;
    assert!((vqvae_loss(&x, &x, &z, &q, 0.25).unwrap() - want).abs() < 1e-12);
    assert!(vqvae_loss(&x, &z, &z, &q, 0.25).is_err());
}

#[test]
fn training_step_gradient() {
    let err = vq_loss_error(3).unwrap();
    assert!(err < 1e-5, "{err}");
}

/// Brute-force nearest entry: smallest squared distance, first index on ties.
fn linear_scan(z: &[f64], book: &Tensor<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..book.rows() {
        let d: f64 = z.iter().zip(book.row(k)).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

proptest! {
    #[test]
    fn quantize_matches_linear_scan(seed in any::<u64>(), k in 1usize..40, d in 1usize..10, n in 1usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let book: Tensor<f64> = gtnb_nn::layers::uniform(&mut r, &[k, d], 1.0);
        let z: Tensor<f64> = gtnb_nn::layers::uniform(&mut r, &[n, d], 1.5);
        let codes = nearest_codes(&z, &book).unwrap();
        for i in 0..n {
            prop_assert_eq!(codes[i], linear_scan(z.row(i), &book));
        }
    }

    #[test]
    fn input_equal_to_an_entry_maps_to_it(seed in any::<u64>(), pick in 0usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let book: Tensor<f64> = gtnb_nn::layers::uniform(&mut r, &[12, 4], 1.0);
        let z = Tensor::new(vec![1, 4], book.row(pick).to_vec()).unwrap();
        let (codes, q) = quantize(&z, &book).unwrap();
        prop_assert_eq!(codes[0], pick);
        prop_assert_eq!(q.data(), z.data());
    }

    #[test]
    fn split_merge_round_trip(seed in any::<u64>(), frames in 1usize..12) {
        let p = random_pose(frames, seed);
        let back = merge_body(&split_body(&p.data).unwrap()).unwrap();
        prop_assert_eq!(back.data(), p.data.data());
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), beta in 0.0f64..2.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = |r: &mut ChaCha8Rng, s: &[usize]| -> Tensor<f64> { gtnb_nn::layers::uniform(r, s, 3.0) };
        let (x, xh, z, q) = (t(&mut r, &[4, 3]), t(&mut r, &[4, 3]), t(&mut r, &[2, 5]), t(&mut r, &[2, 5]));
        prop_assert!(vqvae_loss(&x, &xh, &z, &q, beta).unwrap() >= 0.0);
    }
}
