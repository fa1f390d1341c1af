use gtnb_core::config::Config;
use gtnb_core::metrics::{
    beat_align_score, detect_motion_beats, diversity, evaluate_suite, fid, geometric_features, kinetic_features,
    predicate_table, write_report, EvalReport, PredicateKind, GEOMETRIC_DIM, REPORT_CSV_HEADER,
};
use gtnb_core::pose::{joint_index, write_pose_csv, PoseSequence, N_JOINTS, POSE_FPS, POSE_WIDTH};
use gtnb_core::synth::REST_POSE;
use gtnb_nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pose_from(frames: usize, f: impl Fn(usize, usize, usize) -> f64) -> PoseSequence {
    let mut data = Vec::with_capacity(frames * POSE_WIDTH);
    for t in 0..frames {
        for j in 0..N_JOINTS {
            for a in 0..3 {
                data.push(f(t, j, a) as f32);
            }
        }
    }
    PoseSequence::new(Tensor::new(vec![frames, POSE_WIDTH], data).unwrap(), POSE_FPS).unwrap()
}

fn static_pose(joints: [[f64; 3]; N_JOINTS], frames: usize) -> PoseSequence {
    pose_from(frames, |_, j, a| joints[j][a])
}

fn random_pose(frames: usize, seed: u64) -> PoseSequence {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..frames * POSE_WIDTH).map(|_| r.gen_range(-0.5..0.5)).collect();
    pose_from(frames, |t, j, a| data[t * POSE_WIDTH + j * 3 + a])
}

#[test]
fn kinetic_examples() {
    assert!(kinetic_features(&static_pose(REST_POSE, 10)).unwrap().iter().all(|v| *v == 0.0));
    let moving = pose_from(30, |t, j, a| if j == 5 && a == 0 { t as f64 } else { 0.0 });
    let k = kinetic_features(&moving).unwrap();
    for (i, v) in k.iter().enumerate() {
        if i == 15 {
            assert!((v - 3600.0).abs() < 1e-9, "{v}");
        } else {
            assert_eq!(*v, 0.0);
        }
    }
    assert!(kinetic_features(&static_pose(REST_POSE, 1)).is_err());
}

#[test]
fn kinetic_scales_quadratically() {
    let p = pose_from(50, |t, j, a| 0.25 * ((t as f64) * 0.2 + j as f64 + a as f64).sin());
    let p2 = pose_from(50, |t, j, a| 0.5 * ((t as f64) * 0.2 + j as f64 + a as f64).sin());
    for (a, b) in kinetic_features(&p).unwrap().iter().zip(kinetic_features(&p2).unwrap()) {
        assert!((b - 4.0 * a).abs() <= 1e-6 * b.abs().max(1.0), "{a} {b}");
    }
}

fn predicate_index(name: &str) -> usize {
    predicate_table().iter().position(|p| p.name == name).unwrap()
}

#[test]
fn geometric_t_pose_by_hand() {
    // Rest pose: arms horizontal, wrists 0.42 m up, 0.69 m from the upper
    // spine; feet level, 0.2 m apart. Only the two arm-extension predicates
    // hold.
    let v = geometric_features(&static_pose(REST_POSE, 12));
    assert_eq!(v.len(), GEOMETRIC_DIM);
    let mut want = vec![0.0; GEOMETRIC_DIM];
    want[predicate_index("l_arm_extended")] = 1.0;
    want[predicate_index("r_arm_extended")] = 1.0;
    assert_eq!(v, want);

    // Left arm straight up: wrist at y 0.95 clears the head (0.60) and the
    // shoulder (0.42 + 0.05), and stays 0.67 m from the upper spine.
    let mut raised = REST_POSE;
    raised[joint_index("l_wrist").unwrap()] = [0.18, 0.95, 0.0];
    let v = geometric_features(&static_pose(raised, 12));
    for name in ["l_wrist_above_head", "l_wrist_above_shoulder"] {
        want[predicate_index(name)] = 1.0;
    }
    assert_eq!(v, want);
}

#[test]
fn geometric_half_the_time() {
    // Left wrist above the head on exactly half of the frames.
    let wrist = joint_index("l_wrist").unwrap();
    let p = pose_from(20, |t, j, a| if j == wrist && a == 1 && t % 2 == 0 { 1.0 } else { REST_POSE[j][a] });
    assert_eq!(geometric_features(&p)[predicate_index("l_wrist_above_head")], 0.5);
}

#[test]
fn fid_one_dimensional_closed_form() {
    // Both sets have unbiased variance exactly 1; means 0 and 3.
    let a: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().map(|v| vec![*v]).collect();
    let b: Vec<Vec<f64>> = [2.0, 3.0, 4.0].iter().map(|v| vec![*v]).collect();
    assert!((fid(&a, &b).unwrap() - 9.0).abs() < 1e-6);
    // Unequal spreads: σ 1 vs 2 adds (1 - 2)² on top of the mean gap.
    let c: Vec<Vec<f64>> = [1.0, 3.0, 5.0].iter().map(|v| vec![*v]).collect();
    assert!((fid(&a, &c).unwrap() - (9.0 + 1.0)).abs() < 1e-6);
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let set: Vec<Vec<f64>> = (0..20).map(|i| kinetic_features(&random_pose(10, i)).unwrap()).collect();
    assert!(fid(&set, &set).unwrap() <= 1e-8);
    // Same set, different order: moments agree only up to rounding.
    let rev: Vec<Vec<f64>> = set.iter().rev().cloned().collect();
    assert!(fid(&set, &rev).unwrap() <= 1e-8);
}

#[test]
fn motion_beat_examples() {
    assert!(detect_motion_beats(&static_pose(REST_POSE, 60)).is_empty());
    // Dyadic positions keep every frame-to-frame step exact in f32.
    let glide = pose_from(120, |t, j, a| if a == 0 { t as f64 / 64.0 } else { j as f64 / 8.0 });
    assert!(detect_motion_beats(&glide).is_empty());
    // 1 Hz sway: direction reverses at 0.25 s + k·0.5 s, i.e. frames 15 + 30k.
    let sway = pose_from(240, |t, j, a| {
        REST_POSE[j][a] + if a == 0 { 0.1 * (2.0 * std::f64::consts::PI * t as f64 / 60.0).sin() } else { 0.0 }
    });
    let want: Vec<usize> = (0..8).map(|k| 15 + 30 * k).collect();
    assert_eq!(detect_motion_beats(&sway), want);
}

#[test]
fn report_round_trip_and_csv_append() {
    let dir = tempfile::tempdir().unwrap();
    let r = EvalReport {
        fid_k: 1.5,
        fid_g: 0.25,
        div_k: 3.0,
        div_g: 0.5,
        bas: 0.2,
        clip_count: 4,
        bas_clip_count: 4,
        reference_count: 4,
        skipped: 0,
        config_hash: "abc".into(),
    };
    let json = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    write_report(&r, &json, Some(&csv)).unwrap();
    write_report(&r, &json, Some(&csv)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["fid_k", "fid_g", "div_k", "div_g", "bas"] {
        assert!(v[key].is_number(), "{key}");
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], REPORT_CSV_HEADER);
}

#[test]
fn reference_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..4 {
        write_pose_csv(&dir.path().join(format!("c{i}.csv")), &random_pose(60, i)).unwrap();
    }
    std::fs::write(dir.path().join("broken.csv"), "not,a,pose\n").unwrap();
    let report = evaluate_suite(dir.path(), dir.path(), &Config::default()).unwrap();
    assert!(report.fid_k.abs() <= 1e-8 && report.fid_g.abs() <= 1e-8, "{report:?}");
    assert_eq!((report.clip_count, report.reference_count, report.skipped), (4, 4, 2));
    assert_eq!(report.bas_clip_count, 0);
    assert!(report.div_k > 0.0);
}

#[test]
fn predicate_table_is_well_formed() {
    let t = predicate_table();
    assert_eq!(t.len(), GEOMETRIC_DIM);
    for p in t {
        assert_eq!(p.b.is_none(), p.kind == PredicateKind::Fast, "{}", p.name);
    }
}

fn brute_diversity(set: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            sum += set[i].iter().zip(&set[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

proptest! {
    #[test]
    fn diversity_matches_pairwise_oracle(seed in any::<u64>(), n in 2usize..=50, d in 1usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let set: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        prop_assert_eq!(diversity(&set).unwrap(), brute_diversity(&set));
    }

    #[test]
    fn fid_is_symmetric_and_self_zero(seed in any::<u64>(), n in 3usize..12, d in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0) + shift).collect()).collect()
        };
        let a = draw(0.0);
        let b = draw(0.7);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-10 * ab.max(1.0), "{} vs {}", ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert!(fid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn kinetic_is_translation_invariant(seed in any::<u64>(), dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -3.0f64..3.0) {
        // Offsets are multiples of 1/64 so the shifted f32 values stay exact.
        let q = |v: f64| (v * 64.0).round() / 64.0;
        let off = [q(dx), q(dy), q(dz)];
        let base = pose_from(12, |t, j, a| q((((seed >> (j % 16)) as f64) * 0.37 + t as f64 * (a as f64 + 1.0) * 0.11).sin()));
        let moved = pose_from(12, |t, j, a| base.frame(t)[j * 3 + a] as f64 + off[a]);
        prop_assert_eq!(kinetic_features(&base).unwrap(), kinetic_features(&moved).unwrap());
    }

    #[test]
    fn geometric_position_predicates_ignore_time_reversal(seed in any::<u64>()) {
        let p = pose_from(30, |t, j, a| REST_POSE[j][a] + 0.4 * ((t as f64) * 0.3 + (seed % 97) as f64 + (j * 3 + a) as f64).sin());
        let rev = pose_from(30, |t, j, a| p.frame(29 - t)[j * 3 + a] as f64);
        let (f, r) = (geometric_features(&p), geometric_features(&rev));
        for (i, pr) in predicate_table().iter().enumerate() {
            if !matches!(pr.kind, PredicateKind::Fast | PredicateKind::RelFast) {
                prop_assert_eq!(f[i], r[i], "{}", pr.name);
            }
        }
        prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bas_falls_as_motion_beats_drift(
        beats in proptest::collection::btree_set(0usize..40, 1..8),
        d1 in 0usize..25,
        extra in 0usize..25,
        sigma in 1.0f64..6.0,
    ) {
        // Music beats 100 frames apart; each motion beat trails its music beat.
        let music: Vec<usize> = beats.iter().map(|b| 50 + b * 100).collect();
        let near: Vec<usize> = music.iter().map(|m| m + d1).collect();
        let far: Vec<usize> = music.iter().map(|m| m + d1 + extra).collect();
        let a = beat_align_score(&music, &near, sigma).unwrap();
        let b = beat_align_score(&music, &far, sigma).unwrap();
        prop_assert!(b <= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn bas_three_frames_at_sigma_three() {
    let s = beat_align_score(&[100], &[97], 3.0).unwrap();
    assert!((s - (-0.5f64).exp()).abs() < 1e-9);
    assert!((s - 0.606531).abs() < 1e-6);
}
