//! Cross-module integration checks: the drift schedule really induces
//! forgetting pressure, the metric pipeline agrees with a set-based
//! reference, and shard streams are reproducible from the seed alone.

use fedema_core::metrics::{confusion_from, metric_bundle, ConfusionMatrix};
use fedema_core::numerics::ParamVector;
use fedema_core::scenegen::{
    batch_from_scenes, generate_scenes, partition, GeneratorConfig, LabeledScene, PhaseParams,
};
use fedema_core::segnet::{backward, forward, ModelConfig, RegSign};
use fedema_core::vehicle::{AdamConfig, OptimizerState};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn model() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        hidden_dim: 16,
        class_count: 6,
    }
}

fn miou_on(config: &ModelConfig, params: &ParamVector, scenes: &[LabeledScene]) -> f64 {
    let mut cm = ConfusionMatrix::new(config.class_count);
    for scene in scenes {
        let batch = batch_from_scenes(&[scene], config).unwrap();
        let probs = forward(config, params, &batch).unwrap();
        let preds: Vec<usize> = probs.iter().map(|p| p.argmax()).collect();
        cm.push(confusion_from(&preds, &batch.labels, config.class_count).unwrap());
    }
    metric_bundle(&cm).unwrap().miou
}

#[test]
fn drift_degrades_a_phase0_model() {
    let gen = GeneratorConfig::default();
    let m = model();
    let phase0 = PhaseParams::for_phase(&gen, 0, 42).unwrap();
    let phase1 = PhaseParams::for_phase(&gen, 1, 42).unwrap();

    let train = generate_scenes(&gen, &phase0, 0, 64, 42);
    let held_out0 = generate_scenes(&gen, &phase0, 10_000, 16, 43);
    let eval1 = generate_scenes(&gen, &phase1, 20_000, 16, 44);

    // Train to (desk-scale) convergence on phase-0 data.
    let mut params = m.init_params(7);
    let mut opt = OptimizerState::new(
        params.len(),
        AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
    );
    for step in 0..300 {
        let idx = (step * 8) % train.len();
        let scenes: Vec<&LabeledScene> =
            (0..8).map(|i| &train[(idx + i) % train.len()]).collect();
        let batch = batch_from_scenes(&scenes, &m).unwrap();
        let grad = backward(&m, &params, &batch, 0.0, RegSign::Plus).unwrap();
        params = opt.adam_step(&params, &grad).unwrap();
    }

    let miou_same = miou_on(&m, &params, &held_out0);
    let miou_drifted = miou_on(&m, &params, &eval1);
    assert!(
        miou_same > 0.5,
        "phase-0 model failed to fit its own phase (mIoU {miou_same})"
    );
    assert!(
        miou_drifted < miou_same,
        "drift did not degrade the model: phase0 {miou_same} vs phase1 {miou_drifted}"
    );
}

/// Naive set-based IoU/precision/recall computed from explicit pixel sets,
/// fully independent of the confusion-count implementation.
fn brute_force_bundle(preds: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> (f64, f64, f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut iou_k = Vec::new();
    let mut pre_k = Vec::new();
    let mut rec_k = Vec::new();
    let mut f1_k = Vec::new();
    for class in 0..k {
        let mut ious = Vec::new();
        let mut pres = Vec::new();
        let mut recs = Vec::new();
        for (pred, truth) in preds.iter().zip(truths) {
            let pred_set: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
            let true_set: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
            let inter = pred_set.iter().filter(|i| true_set.contains(i)).count() as f64;
            let union = (pred_set.len() + true_set.len()) as f64 - inter;
            if union > 0.0 {
                ious.push(inter / union);
            }
            if !pred_set.is_empty() {
                pres.push(inter / pred_set.len() as f64);
            }
            if !true_set.is_empty() {
                recs.push(inter / true_set.len() as f64);
            }
        }
        if !ious.is_empty() {
            iou_k.push(mean(&ious));
        }
        if !pres.is_empty() {
            pre_k.push(mean(&pres));
        }
        if !pres.is_empty() && !recs.is_empty() {
            let (p, r) = (mean(&pres), mean(&recs));
            f1_k.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        if !recs.is_empty() {
            rec_k.push(mean(&recs));
        }
    }
    (mean(&iou_k), mean(&f1_k), mean(&pre_k), mean(&rec_k))
}

#[test]
fn metric_bundle_matches_brute_force_on_random_images() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for _case in 0..200 {
        let images = rng.random_range(1..4usize);
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut cm = ConfusionMatrix::new(3);
        for _ in 0..images {
            let pred: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
            let truth: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
            cm.push(confusion_from(&pred, &truth, 3).unwrap());
            preds.push(pred);
            truths.push(truth);
        }
        let bundle = metric_bundle(&cm).unwrap();
        let (miou, mf1, mpre, mrec) = brute_force_bundle(&preds, &truths, 3);
        assert_eq!(bundle.miou, miou);
        assert_eq!(bundle.mf1, mf1);
        assert_eq!(bundle.mprecision, mpre);
        assert_eq!(bundle.mrecall, mrec);
    }
}

#[test]
fn shard_streams_reproducible_from_seed() {
    let gen = GeneratorConfig::default();
    let phase = PhaseParams::for_phase(&gen, 0, 5).unwrap();
    for round in 1..=3u64 {
        let make = || {
            let pool = generate_scenes(&gen, &phase, round << 24, 24, 1000 + round);
            partition(pool, gen.class_count, 3, 0.5, 2000 + round).unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.len(), b.len());
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.scenes, sb.scenes);
        }
    }
}
