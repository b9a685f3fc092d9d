use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use eclm_core::aggregation::{aggregate, DeviceUpdate};
use eclm_core::cloud::solve_assignment;
use eclm_core::derivation::{derive_submodel, importance_profile, ResourceBudget};
use eclm_core::env::{local_train, LocalConfig};
use eclm_core::orchestrator::{prepare_data, PreparedData, ScenarioConfig};
use eclm_core::rng::stream;
use eclm_core::selector::Routing;
use eclm_core::{modularize, ModelPair, SubModelSpec};

fn setup() -> (ModelPair, PreparedData) {
    let cfg = ScenarioConfig::default();
    let data = prepare_data(&cfg).unwrap();
    let pair = modularize(&cfg.model, &mut stream(0, "bench", 0, 0)).unwrap();
    (pair, data)
}

fn half_budget(pair: &ModelPair) -> ResourceBudget {
    let t = pair.total_cost();
    ResourceBudget {
        comm_bytes: t.comm_bytes / 2,
        compute_macs: t.compute_macs / 2,
        mem_bytes: t.mem_bytes / 2,
    }
}

fn benches(c: &mut Criterion) {
    let (pair, data) = setup();
    let batch = data.proxy.x.select_rows(&(0..64).collect::<Vec<_>>());
    c.bench_function("forward_64", |b| b.iter(|| pair.forward(black_box(&batch), Routing::Eval).unwrap()));

    let local = data.proxy.subset(&(0..160).collect::<Vec<_>>());
    let cfg = LocalConfig { epochs: 1, ..LocalConfig::default() };
    c.bench_function("local_train_160x1", |b| {
        b.iter(|| {
            let mut m = pair.clone();
            local_train(&mut m, &local, &cfg, &mut stream(0, "bench", 1, 0)).unwrap()
        })
    });

    let imp = importance_profile(&pair.selector, &batch).unwrap();
    let (costs, shared, budget) = (pair.module_costs(), pair.shared_cost(), half_budget(&pair));
    c.bench_function("derive_submodel_2x16", |b| {
        b.iter(|| derive_submodel(black_box(&imp), &costs, shared, &budget).unwrap())
    });

    let h: Vec<Vec<f64>> = (0..8)
        .map(|t| (0..16).map(|n| 1.0 + ((t * 7 + n * 3) % 11) as f64).collect())
        .collect();
    c.bench_function("solve_assignment_8x16", |b| b.iter(|| solve_assignment(black_box(&h), 2, 4).unwrap()));

    let widths = pair.layer_widths();
    let updates: Vec<DeviceUpdate> = (0..10)
        .map(|d| {
            let spec = SubModelSpec::new(widths.iter().map(|&n| (d % 4..n).step_by(2).collect()).collect());
            DeviceUpdate {
                device: d,
                base_version: 0,
                model: pair.materialize(&spec).unwrap(),
                spec,
                importance: imp.clone(),
                sample_count: 100,
            }
        })
        .collect();
    c.bench_function("aggregate_10", |b| b.iter(|| aggregate(&pair, 0, black_box(&updates)).unwrap()));
}

criterion_group!(hot_paths, benches);
criterion_main!(hot_paths);
