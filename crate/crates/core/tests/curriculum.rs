use std::sync::Arc;

use mocha_core::data::{mix_batch, pools_by_shot, stage_weights, PreparedSample, Shot, TrainingStage};
use mocha_core::model::AudioSource;
use mocha_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pool() -> Vec<Arc<PreparedSample>> {
    Shot::ALL
        .iter()
        .enumerate()
        .map(|(i, &shot)| {
            Arc::new(PreparedSample {
                x1: Tensor::zeros(&[1, 1, 1, 1]),
                text_ids: vec![i],
                audio: Tensor::ones(&[1, 1]),
                shot,
            })
        })
        .collect()
}

#[test]
fn halving_rule_weights() {
    let w = stage_weights(3, &Shot::ALL).unwrap();
    let got: Vec<f64> = w.iter().map(|&(_, x)| x).collect();
    assert_eq!(got, vec![1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]);
    assert_eq!(w.iter().map(|&(s, _)| s).collect::<Vec<_>>(), Shot::ALL.to_vec());
    let w: Vec<f64> = stage_weights(2, &Shot::ALL).unwrap().iter().map(|&(_, x)| x).collect();
    assert_eq!(w, vec![1.0 / 3.0, 2.0 / 3.0]);
    assert_eq!(stage_weights(1, &Shot::ALL).unwrap(), vec![(Shot::CloseUp, 1.0)]);
}

#[test]
fn mixed_batches_hit_the_speech_ratio() {
    let all = pool();
    let pools = pools_by_shot(&all);
    let stage = TrainingStage::curriculum(3, &Shot::ALL, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut speech, mut total) = (0usize, 0usize);
    for _ in 0..100 {
        for ex in mix_batch(&mut rng, &pools, &all, &stage, 1000).unwrap() {
            total += 1;
            speech += usize::from(matches!(ex.cond.audio, AudioSource::Features(_)));
        }
    }
    assert_eq!(total, 100_000);
    let frac = speech as f64 / total as f64;
    assert!((frac - 0.8).abs() <= 0.01, "speech fraction {frac}");
}

#[test]
fn text_only_stage_draws_no_speech() {
    let all = pool();
    let stage = TrainingStage::curriculum(0, &Shot::ALL, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = mix_batch(&mut rng, &pools_by_shot(&all), &all, &stage, 500).unwrap();
    assert!(batch.iter().all(|ex| ex.cond.audio == AudioSource::Zero));
}

#[test]
fn missing_category_is_a_data_error() {
    let all: Vec<_> = pool().into_iter().filter(|s| s.shot != Shot::MediumShot).collect();
    let stage = TrainingStage::curriculum(3, &Shot::ALL, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = mix_batch(&mut rng, &pools_by_shot(&all), &all, &stage, 4).unwrap_err();
    assert!(err.to_string().contains("medium-shot"), "{err}");
}

proptest! {
    #[test]
    fn weights_normalize_and_double(k in 1usize..=3) {
        let w = stage_weights(k, &Shot::ALL).unwrap();
        prop_assert_eq!(w.len(), k);
        prop_assert!((w.iter().map(|&(_, x)| x).sum::<f64>() - 1.0).abs() < 1e-15);
        for pair in w.windows(2) {
            prop_assert!((pair[1].1 - 2.0 * pair[0].1).abs() < 1e-15);
        }
    }

    #[test]
    fn category_draws_follow_stage_weights(seed in any::<u64>()) {
        let all = pool();
        let pools = pools_by_shot(&all);
        let stage = TrainingStage::curriculum(3, &Shot::ALL, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = mix_batch(&mut rng, &pools, &all, &stage, 7000).unwrap();
        let mut counts = [0usize; 3];
        for ex in &batch {
            prop_assert!(matches!(ex.cond.audio, AudioSource::Features(_)));
            counts[ex.cond.text_ids[0]] += 1;
        }
        for (c, (_, w)) in counts.iter().zip(stage_weights(3, &Shot::ALL).unwrap()) {
            prop_assert!((*c as f64 / 7000.0 - w).abs() < 0.02, "{counts:?}");
        }
    }
}
