use super::*;
use crate::env::{SyntheticConfig, SyntheticTask};
use crate::modular::{modularize, ModelShape, ModuleLayerShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_shape(dim: usize, classes: usize, n: usize, k: usize) -> ModelShape {
    ModelShape {
        input_dim: dim,
        front: vec![8],
        module_layers: vec![ModuleLayerShape {
            out_dim: 8,
            hidden: 8,
            n_modules: n,
        }],
        num_classes: classes,
        shrink_fractions: vec![0.5, 1.0],
        include_residual: true,
        selector_embed: vec![8],
        k,
        noise_scale: 1.0,
    }
}

fn blobs(classes: usize, per_class: usize, seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        num_classes: classes,
        clusters_per_class: 1,
        dim: 6,
        ..SyntheticConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SyntheticTask::generate(&cfg, &mut rng)
        .unwrap()
        .sample_balanced(per_class, 0.0, &mut rng)
}

#[test]
fn separable_blobs_are_learned() {
    let data = blobs(2, 50, 1);
    let mut pair = modularize(&tiny_shape(6, 2, 4, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let cfg = PretrainConfig {
        epochs: 200,
        learning_rate: 0.01,
        ..PretrainConfig::default()
    };
    let log = pretrain(&mut pair, &data, &cfg, 7).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log.last().unwrap().accuracy >= 0.99);
    for e in &log {
        for l in &e.loads.mass {
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for l in &e.loads.routed {
            assert!((l.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let data = blobs(3, 20, 1);
    let run = || {
        let mut pair = modularize(&tiny_shape(6, 3, 4, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let cfg = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        };
        let log = pretrain(&mut pair, &data, &cfg, 9).unwrap();
        (pair, log)
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_data_and_bad_lambda_are_rejected() {
    let mut pair = modularize(&tiny_shape(6, 2, 4, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let empty = Dataset::empty(6, 2);
    assert!(matches!(
        pretrain(&mut pair, &empty, &PretrainConfig::default(), 0),
        Err(Error::EmptyDataset(_))
    ));
    let cfg = PretrainConfig {
        lambda: -1.0,
        ..PretrainConfig::default()
    };
    assert!(matches!(pretrain(&mut pair, &blobs(2, 5, 0), &cfg, 0), Err(Error::Config(_))));
}

#[test]
fn task_map_rows_are_distributions() {
    let data = blobs(4, 10, 3);
    let pair = modularize(&tiny_shape(6, 4, 5, 2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (ids, t) = SubTaskRule::PerClass.assign(&data).unwrap();
    let h = build_task_map(&pair.selector, &data.x, &ids, t).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].len(), 4);
    for row in &h[0] {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn guided_finetuning_concentrates_gate_mass() {
    let data = blobs(4, 40, 5);
    let mut pair = modularize(&tiny_shape(6, 4, 6, 2), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    pretrain(
        &mut pair,
        &data,
        &PretrainConfig {
            epochs: 20,
            ..PretrainConfig::default()
        },
        1,
    )
    .unwrap();
    let (ids, t) = SubTaskRule::PerClass.assign(&data).unwrap();
    let h = build_task_map(&pair.selector, &data.x, &ids, t).unwrap();
    let a = solve_assignment(&h[0], default_kappa1(t, 2, 6), 2).unwrap();
    let (p, _) = target_mapping(&h[0], &a.mask);
    let before = pair.accuracy(&data.x, &data.labels).unwrap();
    let report = finetune_enhance(
        &mut pair,
        &data,
        &ids,
        &[p],
        &[a.mask.clone()],
        &FinetuneConfig {
            epochs: 30,
            ..FinetuneConfig::default()
        },
        2,
    )
    .unwrap();
    let after = pair.accuracy(&data.x, &data.labels).unwrap();
    assert!(after >= before - 0.005, "{before} -> {after}");
    for (s, mass) in report.alignment[0].iter().enumerate() {
        assert!(*mass >= 0.8, "sub-task {s}: {mass}");
    }
    let first = report.log.first().unwrap().aux_loss;
    let last = report.log.last().unwrap().aux_loss;
    assert!(last < first);
}

#[test]
fn finetune_rejects_invalid_targets() {
    let data = blobs(2, 5, 5);
    let mut pair = modularize(&tiny_shape(6, 2, 3, 1), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let bad = vec![vec![vec![0.5, 0.1, 0.1], vec![1.0, 0.0, 0.0]]];
    let mask = vec![vec![vec![true; 3]; 2]];
    assert!(finetune_enhance(&mut pair, &data, &data.labels.clone(), &bad, &mask, &FinetuneConfig::default(), 0).is_err());
}
