use std::sync::OnceLock;

use ada_sv::corpus::{build_corpus, Corpus, CorpusConfig, HeldOut, NoiseBankConfig, NoiseCategory};
use ada_sv::eval::{
    build_trials, compute_eer, cosine_score, evaluate, residual_probe, Condition, EvalConfig, ScoreSet, TrialConfig,
};
use ada_sv::model::{Model, ModelConfig};
use ada_sv::seed;
use ndarray::{array, Array1};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = CorpusConfig {
            n_speakers: 2,
            utts_per_speaker: 1,
            categories: vec![],
            held_out: HeldOut::Speakers {
                speakers: 20,
                utts_per_speaker: 6,
            },
            noise_bank: NoiseBankConfig {
                clips_per_category: 2,
                clip_s: 1.0,
            },
            ..CorpusConfig::default()
        };
        build_corpus(&cfg, 8).unwrap()
    })
}

/// FAR/FRR at every midpoint between distinct scores, plus both ends,
/// counted directly; then the same crossing interpolation.
fn eer_oracle(scores: &[f64], targets: &[bool]) -> f64 {
    let mut d: Vec<f64> = scores.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let mut th = vec![f64::NEG_INFINITY];
    th.extend(d.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    th.push(f64::INFINITY);
    let n_tar = targets.iter().filter(|&&t| t).count() as f64;
    let n_non = targets.len() as f64 - n_tar;
    let pts: Vec<(f64, f64)> = th
        .iter()
        .map(|&t| {
            let fa = scores.iter().zip(targets).filter(|(s, &y)| !y && **s >= t).count() as f64;
            let fr = scores.iter().zip(targets).filter(|(s, &y)| y && **s < t).count() as f64;
            (fa / n_non, fr / n_tar)
        })
        .collect();
    let k = pts.iter().position(|(a, r)| a - r <= 0.0).unwrap();
    if k == 0 {
        return pts[0].0;
    }
    let (a0, r0) = pts[k - 1];
    let (a1, r1) = pts[k];
    let w = (a0 - r0) / ((a0 - r0) - (a1 - r1));
    a0 + w * (a1 - a0)
}

fn set(tar: &[f64], non: &[f64]) -> ScoreSet {
    let s = tar.iter().chain(non).copied().collect();
    let t = tar.iter().map(|_| true).chain(non.iter().map(|_| false)).collect();
    ScoreSet::new(s, t).unwrap()
}

#[test]
fn eer_hand_cases() {
    assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap().eer, 0.0);
    assert_eq!(
        compute_eer(&set(&[0.9, 0.8, 0.7, 0.3], &[0.5, 0.2, 0.15, 0.1])).unwrap().eer,
        0.25
    );
    assert!(compute_eer(&set(&[0.1, 0.2], &[])).is_err());
    assert!(ScoreSet::new(vec![0.1], vec![true, false]).is_err());
}

#[test]
fn eer_matches_brute_force_oracle() {
    for case in 0..200u64 {
        let mut rng = seed::rng(&[case, 21]);
        let n = rng.random_range(2..=1000usize);
        let shift: f64 = rng.random_range(0.0..3.0);
        let quant = [0.0, 0.1, 0.01][case as usize % 3];
        let mut targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        targets[0] = true;
        targets[1] = false;
        let scores: Vec<f64> = targets
            .iter()
            .map(|&t| {
                let v: f64 = rng.sample::<f64, _>(StandardNormal) + if t { shift } else { 0.0 };
                if quant > 0.0 {
                    (v / quant).round() * quant
                } else {
                    v
                }
            })
            .collect();
        let got = compute_eer(&ScoreSet::new(scores.clone(), targets.clone()).unwrap()).unwrap().eer;
        assert_eq!(got, eer_oracle(&scores, &targets), "case {case}");
    }
}

#[test]
fn eer_swap_and_negate_symmetry() {
    let mut rng = seed::rng(&[5]);
    let tar: Vec<f64> = (0..50).map(|_| rng.random::<f64>() + 0.3).collect();
    let non: Vec<f64> = (0..70).map(|_| rng.random::<f64>()).collect();
    let a = compute_eer(&set(&tar, &non)).unwrap().eer;
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let b = compute_eer(&set(&neg(&non), &neg(&tar))).unwrap().eer;
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn cosine_examples() {
    let a = array![0.3, -1.2, 2.0];
    assert!((cosine_score(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
    assert!((cosine_score(a.view(), (-&a).view()).unwrap() + 1.0).abs() < 1e-15);
    let x = array![1.0, 0.0];
    let y = array![3.0, 3.0];
    assert!((cosine_score(x.view(), y.view()).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(cosine_score(x.view(), array![0.0, 0.0].view()).is_err());
}

#[test]
fn trial_counts_and_clean_condition() {
    let cfg = TrialConfig::default();
    let t = build_trials(corpus(), &cfg, Condition::Clean, 1).unwrap();
    assert_eq!(t.len(), 1000);
    assert_eq!(t.trials.iter().filter(|x| x.target).count(), 500);
    assert!(t.test_audio.iter().all(Option::is_none));
    assert!(t.trials.iter().all(|x| x.enroll_utt != x.test_utt));
    let noisy = build_trials(corpus(), &cfg, Condition::Noise, 1).unwrap();
    assert_eq!(noisy.trials, t.trials);
    assert!(noisy.enroll_audio.iter().all(Option::is_none));
    assert!(noisy.test_audio.iter().all(Option::is_some));
    let too_many = TrialConfig {
        n_target: 601,
        ..cfg
    };
    assert!(build_trials(corpus(), &too_many, Condition::Clean, 1).is_err());
}

#[test]
fn all_condition_mixes_seen_categories() {
    let cfg = TrialConfig {
        n_target: 500,
        n_nontarget: 2500,
        ..TrialConfig::default()
    };
    let t = build_trials(corpus(), &cfg, Condition::All, 2).unwrap();
    for c in NoiseCategory::SEEN {
        let n = t.test_labels.iter().filter(|&&l| l == c).count();
        assert!((900..=1100).contains(&n), "{c}: {n}");
    }
}

#[test]
fn report_matches_dumped_scores_and_is_deterministic() {
    let (model, ps) = Model::new(&ModelConfig::default(), 77).unwrap();
    let cfg = EvalConfig::default();
    let (r1, scored) = evaluate(&model, &ps, corpus(), &[Condition::Clean], &cfg, 4).unwrap();
    assert_eq!(r1.rows.len(), 1);
    assert_eq!(r1.rows[0].1.n_trials, 1000);
    let targets: Vec<bool> = scored[0].set.trials.iter().map(|t| t.target).collect();
    assert_eq!(r1.rows[0].1.eer, eer_oracle(&scored[0].scores, &targets));
    let (r2, _) = evaluate(&model, &ps, corpus(), &[Condition::Clean], &cfg, 4).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(scored[0].scores_text().lines().count(), 1000);
}

#[test]
fn untrained_model_clean_eer_is_near_chance() {
    let (model, ps) = Model::new(&ModelConfig::default(), 77).unwrap();
    let (r, _) = evaluate(&model, &ps, corpus(), &[Condition::Clean], &EvalConfig::default(), 4).unwrap();
    let eer = r.rows[0].1.eer;
    assert!((0.35..=0.65).contains(&eer), "untrained Clean EER {eer}");
}

#[test]
fn probe_null_and_perfect_features() {
    let cats = [NoiseCategory::Clean, NoiseCategory::Noise, NoiseCategory::Music, NoiseCategory::Speech];
    let mut rng = seed::rng(&[6]);
    let labels: Vec<NoiseCategory> = (0..400).map(|i| cats[i % 4]).collect();
    let onehot: Vec<Array1<f64>> = labels
        .iter()
        .map(|l| {
            let mut v = Array1::zeros(8);
            v[l.index()] = 1.0;
            v
        })
        .collect();
    assert!(residual_probe(&onehot, &labels, 1).unwrap() > 0.99);

    let noise: Vec<Array1<f64>> = (0..400)
        .map(|_| Array1::from_shape_simple_fn(16, || rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    let acc = residual_probe(&noise, &shuffled, 2).unwrap();
    assert!((0.17..=0.33).contains(&acc), "{acc}");
    assert_eq!(acc, residual_probe(&noise, &shuffled, 2).unwrap());
    assert!(residual_probe(&noise, &vec![NoiseCategory::Noise; 400], 2).is_err());
}

proptest! {
    #[test]
    fn eer_invariant_under_monotone_transform(seed_v in any::<u64>(), n in 4usize..200) {
        let mut rng = seed::rng(&[seed_v]);
        let mut targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        targets[0] = true;
        targets[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 50.0).round() / 50.0).collect();
        let a = compute_eer(&ScoreSet::new(scores.clone(), targets.clone()).unwrap()).unwrap().eer;
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
        let b = compute_eer(&ScoreSet::new(t, targets).unwrap()).unwrap().eer;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_ignores_positive_scale(seed_v in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = seed::rng(&[seed_v]);
        let a = Array1::from_shape_simple_fn(8, || rng.sample::<f64, _>(StandardNormal));
        let b = Array1::from_shape_simple_fn(8, || rng.sample::<f64, _>(StandardNormal));
        let x = cosine_score(a.view(), b.view()).unwrap();
        let y = cosine_score((&a * c).view(), b.view()).unwrap();
        prop_assert!((x - y).abs() < 1e-12);
    }
}
